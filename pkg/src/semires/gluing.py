"""The gluing parametrix F and its error operators A_K, A_inf.

Mode ``toCAP`` glues the outgoing resolvent R(E+i0) (inside) to the free
absorbing resolvent R_{W,0}(E) (outside) and inverts P_W - E:

    F = chi_K(|x|-s) R(E+i0) chi_K(|x|) + chi_inf(|x|+s) R_{W,0}(E) chi_inf(|x|)

Mode ``fromCAP`` glues R_W(lam) inside to the free outgoing resolvent
R_0(lam) outside and inverts P - lam. In both modes
(target) F = Id + A_K + A_inf with

    A_K   = [P, chi_K(|x|-s)]   R_inside  chi_K(|x|)
    A_inf = [P, chi_inf(|x|+s)] R_outside chi_inf(|x|).

Outgoing resolvents are realized with the outer absorber W_out beyond r_6,
so "P" in the fromCAP target is P - i W_out. Everything is matrix-free;
dense realizations exist for oracle sizes only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .operators import (
    DEFAULT_LAYOUT,
    CutoffProfile,
    DiscreteOperator,
    Grid,
    LayoutError,
    PotentialSpec,
    SupportLayout,
    assemble_p,
    attach_absorber,
    commutator_with_cutoff,
    make_grid,
    make_profile,
)
from .resolvent import (
    Factorization,
    PowerResult,
    _check_sweep,
    fitted_local_slopes,
    local_slopes,
    power_norm,
)

MODES = ("toCAP", "fromCAP")
DENSE_LIMIT = 400
GLUING_CSV_HEADER = (
    "mode",
    "h",
    "norm_AK",
    "norm_Ainf_cut",
    "norm_product",
    "slope_local",
    "residual_identity",
)


def _col(v):
    return v[:, None] if v.ndim == 1 else v


@dataclass(frozen=True, eq=False)
class GluingSystem:
    mode: str
    grid: Grid = field(repr=False)
    h: float
    lam: complex
    layout: SupportLayout = field(repr=False)
    target: DiscreteOperator = field(repr=False)
    inner: Factorization = field(repr=False)
    outer: Factorization = field(repr=False)
    chiK: CutoffProfile = field(repr=False)
    chiK_in: CutoffProfile = field(repr=False)  # chi_K(|x| - s)
    chiInf: CutoffProfile = field(repr=False)
    chiInf_out: CutoffProfile = field(repr=False)  # chi_inf(|x| + s)
    comm_K: sp.csr_array = field(repr=False)
    comm_inf: sp.csr_array = field(repr=False)
    P: DiscreteOperator = field(repr=False)

    @property
    def n(self) -> int:
        return self.grid.n

    # pieces as (n,) or (n, k) applies -------------------------------------

    def _d(self, prof, v):
        c = prof.values
        return c[:, None] * v if v.ndim == 2 else c * v

    def apply_F(self, v):
        return self._d(self.chiK_in, self.inner.solve(self._d(self.chiK, v))) + self._d(
            self.chiInf_out, self.outer.solve(self._d(self.chiInf, v))
        )

    def apply_F_adjoint(self, v):
        return self._d(self.chiK, self.inner.solve_adjoint(self._d(self.chiK_in, v))) + self._d(
            self.chiInf, self.outer.solve_adjoint(self._d(self.chiInf_out, v))
        )

    def apply_AK(self, v):
        return self.comm_K @ self.inner.solve(self._d(self.chiK, v))

    def apply_AK_adjoint(self, v):
        return self._d(self.chiK, self.inner.solve_adjoint(self.comm_K.conj().T @ v))

    def apply_Ainf(self, v):
        return self.comm_inf @ self.outer.solve(self._d(self.chiInf, v))

    def apply_Ainf_adjoint(self, v):
        return self._d(self.chiInf, self.outer.solve_adjoint(self.comm_inf.conj().T @ v))

    def apply_target(self, v):
        """(target - lam) v."""
        return self.target.to_sparse() @ v - self.lam * v

    # dense realizations -----------------------------------------------------

    def _dense(self, apply):
        if self.n > DENSE_LIMIT:
            raise ValueError(f"dense realization limited to N <= {DENSE_LIMIT}, got {self.n}")
        return apply(np.eye(self.n, dtype=np.complex128))

    @cached_property
    def F_dense(self) -> np.ndarray:
        return self._dense(self.apply_F)

    @cached_property
    def AK_dense(self) -> np.ndarray:
        return self._dense(self.apply_AK)

    @cached_property
    def Ainf_dense(self) -> np.ndarray:
        return self._dense(self.apply_Ainf)

    @cached_property
    def target_dense(self) -> np.ndarray:
        return self.target.to_dense().astype(np.complex128) - self.lam * np.eye(self.n)


def support_violations(sys: GluingSystem) -> list[str]:
    """Discrete support relations the algebra relies on, listed if they fail exactly.

    Each relation is a product of diagonal and banded matrices that must be
    the exact zero matrix (or an exact identity of diagonals).
    """
    bad = []
    cK, cKin = sys.chiK.values, sys.chiK_in.values
    cI, cIout = sys.chiInf.values, sys.chiInf_out.values
    if (sp.diags_array(cK) @ sys.comm_K).count_nonzero():
        bad.append("chi_K(|x|) [P, chi_K(|x|-s)] != 0")
    if (sp.diags_array(cI) @ sys.comm_inf).count_nonzero():
        bad.append("chi_inf(|x|) [P, chi_inf(|x|+s)] != 0")
    if np.any(cKin * cK != cK):
        bad.append("chi_K(|x|-s) chi_K(|x|) != chi_K(|x|)")
    if np.any(cIout * cI != cI):
        bad.append("chi_inf(|x|+s) chi_inf(|x|) != chi_inf(|x|)")
    d_inner = sys.target.diagonal() - sys.inner.op.diagonal()
    if np.any(cKin * d_inner != 0):
        bad.append("chi_K(|x|-s) (target - inner operator) != 0")
    d_outer = sys.target.diagonal() - sys.outer.op.diagonal()
    if np.any(cIout * d_outer != 0):
        bad.append("chi_inf(|x|+s) (target - outer operator) != 0")
    return bad


def build_gluing(
    mode: str,
    grid: Grid,
    V: PotentialSpec | None,
    h: float,
    lam: complex,
    layout: SupportLayout = DEFAULT_LAYOUT,
    stencil: int = 3,
    check_layout: bool = True,
    absorbers: bool = True,
) -> GluingSystem:
    """Assemble F, A_K, A_inf for ``mode`` at spectral point ``lam``.

    ``absorbers=False`` drops both W and W_out (used to check that the
    identity holds for arbitrary glued pieces). With ``check_layout`` the
    nominal stencil-resolution check and the exact discrete support relations
    are enforced before returning.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if check_layout:
        layout.check(grid, stencil)
    s = layout.s
    Vg = V.resample(grid) if V is not None else None
    P = assemble_p(grid, Vg, h, stencil=stencil)
    P0 = assemble_p(grid, None, h, stencil=stencil)
    if absorbers:
        W = make_profile("barrierW", layout, grid)
        Wout = make_profile("absorber", layout, grid)
    else:
        W = Wout = np.zeros(grid.n)
    PW = attach_absorber(P, W)
    Pout = attach_absorber(P, Wout)
    P0W = attach_absorber(P0, W)
    P0out = attach_absorber(P0, Wout)
    if mode == "toCAP":
        target, inner_op, outer_op = PW, Pout, P0W
    else:
        target, inner_op, outer_op = Pout, PW, P0out
    chiK = make_profile("chiK", layout, grid)
    chiK_in = make_profile("chiK", layout, grid, shift=-s)
    chiInf = make_profile("chiInf", layout, grid)
    chiInf_out = make_profile("chiInf", layout, grid, shift=s)
    sys = GluingSystem(
        mode=mode,
        grid=grid,
        h=float(h),
        lam=complex(lam),
        layout=layout,
        target=target,
        inner=Factorization(inner_op, lam),
        outer=Factorization(outer_op, lam),
        chiK=chiK,
        chiK_in=chiK_in,
        chiInf=chiInf,
        chiInf_out=chiInf_out,
        comm_K=commutator_with_cutoff(P, chiK_in).to_sparse(),
        comm_inf=commutator_with_cutoff(P, chiInf_out).to_sparse(),
        P=P,
    )
    if check_layout:
        bad = support_violations(sys)
        if bad:
            raise LayoutError("support layout violated: " + "; ".join(bad))
    return sys


# ---------------------------------------------------------------------------
# exact algebra checks (dense)


def _rel(A, B) -> float:
    return float(np.linalg.norm(A - B, 2) / np.linalg.norm(B, 2))


def check_basic_identity(sys: GluingSystem) -> float:
    """Relative residual of (target) F = Id + A_K + A_inf."""
    I = np.eye(sys.n)
    return _rel(sys.target_dense @ sys.F_dense, I + sys.AK_dense + sys.Ainf_dense)


class Nilpotency(NamedTuple):
    AK_squared: float
    Ainf_squared: float
    violation: bool


def check_nilpotency(sys: GluingSystem, rel_tol: float = 1e-12) -> Nilpotency:
    """(||A_K^2||, ||A_inf^2||) and whether they exceed rel_tol * ||A||.

    The violation flag is also raised when a discrete support relation fails.
    """
    AK, Ai = sys.AK_dense, sys.Ainf_dense
    nk = np.linalg.norm(AK @ AK, 2)
    ni = np.linalg.norm(Ai @ Ai, 2)
    bad = (
        nk > rel_tol * np.linalg.norm(AK, 2)
        or ni > rel_tol * np.linalg.norm(Ai, 2)
        or bool(support_violations(sys))
    )
    return Nilpotency(float(nk), float(ni), bool(bad))


def check_factor_identity(sys: GluingSystem, drop_errors: bool = False) -> float:
    """Relative residual of the factorization identity

        (target) F (Id - A_K - A_inf + A_K A_inf) = Id - A_inf A_K + A_inf A_K A_inf.

    ``drop_errors`` replaces A_K, A_inf by zero, a negative control that must
    leave a large residual.
    """
    I = np.eye(sys.n)
    T, F = sys.target_dense, sys.F_dense
    if drop_errors:
        AK = Ai = np.zeros_like(F)
        lhs = T @ F
        rhs = I
        return _rel(lhs, rhs)
    AK, Ai = sys.AK_dense, sys.Ainf_dense
    lhs = T @ F @ (I - AK - Ai + AK @ Ai)
    rhs = I - Ai @ AK + Ai @ AK @ Ai
    return _rel(lhs, rhs)


# ---------------------------------------------------------------------------
# matrix-free norms


def matfree_identity_residual(sys: GluingSystem, n_vectors: int = 3, seed: int = 0) -> float:
    """max over random v of ||target F v - (v + A_K v + A_inf v)|| / ||v||, any grid size."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((sys.n, n_vectors)) + 1j * rng.standard_normal((sys.n, n_vectors))
    lhs = sys.apply_target(sys.apply_F(v))
    rhs = v + sys.apply_AK(v) + sys.apply_Ainf(v)
    return float(np.max(np.linalg.norm(lhs - rhs, axis=0) / np.linalg.norm(v, axis=0)))


def _norm(apply, adjoint, n, tol, max_iter, full_output):
    res = power_norm(apply, adjoint, n, tol=tol, max_iter=max_iter)
    return res if full_output else res.value


def error_product_norm(sys: GluingSystem, tol: float = 1e-6, max_iter: int = 500, full_output=False):
    """||A_inf A_K|| by power iteration."""
    return _norm(
        lambda v: sys.apply_Ainf(sys.apply_AK(v)),
        lambda v: sys.apply_AK_adjoint(sys.apply_Ainf_adjoint(v)),
        sys.n,
        tol,
        max_iter,
        full_output,
    )


def error_norms(sys: GluingSystem, chi: CutoffProfile | None = None, tol: float = 1e-6) -> dict:
    """||A_K||, ||chi A_inf chi||, ||A_inf||."""
    if chi is None:
        chi = make_profile("chi", sys.layout, sys.grid)
    c = chi.values[:, None]
    return {
        "AK": _norm(sys.apply_AK, sys.apply_AK_adjoint, sys.n, tol, 500, False),
        "Ainf_cut": _norm(
            lambda v: c * sys.apply_Ainf(c * v),
            lambda v: c * sys.apply_Ainf_adjoint(c * v),
            sys.n,
            tol,
            500,
            False,
        ),
    }


def parametrix_cutoff_norm(sys: GluingSystem, chi: CutoffProfile | None = None, tol: float = 1e-6) -> float:
    """|| chi F (Id - A_K - A_inf + A_K A_inf) chi ||, the bound routed through the parametrix."""
    if chi is None:
        chi = make_profile("chi", sys.layout, sys.grid)
    c = chi.values[:, None]

    def right(v):
        return v - sys.apply_AK(v) - sys.apply_Ainf(v) + sys.apply_AK(sys.apply_Ainf(v))

    def right_adj(v):
        return (
            v
            - sys.apply_AK_adjoint(v)
            - sys.apply_Ainf_adjoint(v)
            + sys.apply_Ainf_adjoint(sys.apply_AK_adjoint(v))
        )

    return power_norm(
        lambda v: c * sys.apply_F(right(c * v)),
        lambda v: c * right_adj(sys.apply_F_adjoint(c * v)),
        sys.n,
        tol=tol,
    ).value


# ---------------------------------------------------------------------------
# decay of the error product


class DecayFit(NamedTuple):
    h: np.ndarray
    norms: np.ndarray
    slopes: np.ndarray  # fitted local orders, one per h
    raw_slopes: np.ndarray  # finite-difference orders, one per interval
    order: float
    superpolynomial: bool


def fit_decay(h, norms, threshold: float = 3.0, min_samples: int = 5) -> DecayFit:
    """Decay order of ``norms`` ~ h^k along a sweep, ordered by decreasing h.

    ``slopes`` are the local orders -d log(norm) / d log(1/h) of a quadratic
    fit in log(1/h); ``raw_slopes`` are the successive finite differences,
    kept for inspection since they wiggle with the reflection phase of the
    absorber. ``order`` is the least-squares linear order. Superpolynomial
    behavior is declared when every fitted local order is at least
    ``threshold`` and the fitted orders are non-decreasing as h shrinks.
    """
    h = np.asarray(h, dtype=float)
    norms = np.asarray(norms, dtype=float)
    _check_sweep(h, min_samples, 1.0)
    idx = np.argsort(-h)
    h, norms = h[idx], norms[idx]
    slopes = -fitted_local_slopes(h, norms)
    raw = -local_slopes(h, norms)
    order = -np.polyfit(np.log(1.0 / h), np.log(norms), 1)[0]
    superpoly = bool(np.all(slopes >= threshold) and np.all(np.diff(slopes) >= -1e-12))
    return DecayFit(h, norms, slopes, raw, float(order), superpoly)


def decay_sweep(
    mode: str,
    h_list: Sequence[float],
    V: PotentialSpec | None,
    lam: complex = 1.0,
    layout: SupportLayout = DEFAULT_LAYOUT,
    L: float = 13.0,
    points_per_h: float = 10.0,
    tol: float = 1e-6,
    threshold: float = 3.0,
) -> DecayFit:
    """||A_inf A_K|| across ``h_list`` (dx = h / points_per_h) and its decay order."""
    h_sorted = sorted(h_list, reverse=True)
    _check_sweep(np.asarray(h_sorted), 5, 1.0)
    norms = []
    for h in h_sorted:
        sys = build_gluing(mode, make_grid(L, h / points_per_h), V, h, lam, layout)
        norms.append(error_product_norm(sys, tol=tol))
    return fit_decay(h_sorted, norms, threshold)


class GluingRow(NamedTuple):
    mode: str
    h: float
    norm_AK: float
    norm_Ainf_cut: float
    norm_product: float
    slope_local: float
    residual_identity: float


def gluing_report(
    mode: str,
    h_list: Sequence[float],
    V: PotentialSpec | None,
    lam: complex = 1.0,
    layout: SupportLayout = DEFAULT_LAYOUT,
    L: float = 13.0,
    points_per_h: float = 10.0,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[list[GluingRow], DecayFit]:
    """Per-h error norms, fitted local decay order, and matrix-free identity residual."""
    h_sorted = sorted(h_list, reverse=True)
    parts = []
    for h in h_sorted:
        sys = build_gluing(mode, make_grid(L, h / points_per_h), V, h, lam, layout)
        en = error_norms(sys, tol=tol)
        parts.append((h, en["AK"], en["Ainf_cut"], error_product_norm(sys, tol=tol), matfree_identity_residual(sys, seed=seed)))
    fit = fit_decay([p[0] for p in parts], [p[3] for p in parts])
    rows = [
        GluingRow(mode, float(h), ak, ai, pr, float(sl), res)
        for (h, ak, ai, pr, res), sl in zip(parts, fit.slopes)
    ]
    return rows, fit


def gluing_csv(rows: Sequence[GluingRow], config_hash: str | None = None) -> str:
    head = list(GLUING_CSV_HEADER) + (["config_hash"] if config_hash else [])
    lines = [",".join(head)]
    for r in rows:
        cells = [r.mode] + [repr(float(x)) for x in r[1:]]
        if config_hash:
            cells.append(config_hash)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
