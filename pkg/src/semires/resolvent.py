"""Shifted banded solves, cutoff resolvent norms and power-law fits.

Resolvents are never formed; every apply is a banded LU solve. Operator
norms are largest singular values found by power iteration on M M^*.
Multiplication operators are self-adjoint and the quadrature weight dx is
uniform, so matrix 2-norms equal the discrete L^2 operator norms.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

from .operators import (
    DEFAULT_LAYOUT,
    CutoffProfile,
    DiscreteOperator,
    Grid,
    GridError,
    PotentialSpec,
    SupportLayout,
    assemble_p,
    attach_absorber,
    make_grid,
    make_profile,
)

POLE_CONDITION = 1e14
NORM_CSV_HEADER = ("h", "lambda_re", "lambda_im", "operator", "norm", "iters", "converged")


class NearSingularError(ArithmeticError):
    """The shift is numerically an eigenvalue; treat it as a suspected pole."""

    def __init__(self, lam, cond):
        super().__init__(f"(op - lambda) near singular at lambda={lam}: cond ~ {cond:.3g}")
        self.lam = lam
        self.cond = cond


class ConvergenceError(ArithmeticError):
    def __init__(self, msg, rayleigh=None, gap=None, iterations=None):
        super().__init__(msg)
        self.rayleigh = rayleigh
        self.gap = gap
        self.iterations = iterations


class StabilityError(RuntimeError):
    """Cutoff norm moved by more than the tolerance when the box was enlarged."""

    def __init__(self, msg, values=None):
        super().__init__(msg)
        self.values = values


# ---------------------------------------------------------------------------
# factorization


class Factorization:
    """Banded LU of (op - lam Id) with adjoint solves and a 1-norm condition estimate."""

    def __init__(self, op: DiscreteOperator, lam: complex, check: bool = True):
        self.op = op
        self.lam = complex(lam)
        self.kl = self.ku = op.bandwidth
        shifted = op.shifted(self.lam)
        ab = np.zeros((2 * self.kl + self.ku + 1, op.n), dtype=np.complex128)
        ab[self.kl :, :] = shifted
        lu, ipiv, info = lapack.zgbtrf(ab, self.kl, self.ku)
        if info < 0:
            raise ValueError(f"zgbtrf: illegal argument {-info}")
        if info > 0:
            raise NearSingularError(self.lam, np.inf)
        self._lu = lu
        self._ipiv = ipiv
        self._norm1 = float(np.abs(shifted).sum(axis=0).max())
        self.cond = self.condition_estimate() if check else float("nan")
        if check and self.cond > POLE_CONDITION:
            raise NearSingularError(self.lam, self.cond)

    @property
    def n(self) -> int:
        return self.op.n

    @property
    def grid(self) -> Grid:
        return self.op.grid

    def _solve(self, b, trans):
        b = np.asarray(b, dtype=np.complex128)
        vec = b.ndim == 1
        x, info = lapack.zgbtrs(self._lu, self.kl, self.ku, b.reshape(self.n, -1), self._ipiv, trans=trans)
        if info != 0:
            raise ValueError(f"zgbtrs failed with info={info}")
        return x[:, 0] if vec else x

    def solve(self, b):
        """(op - lam)^{-1} b."""
        return self._solve(b, 0)

    def solve_adjoint(self, b):
        """(op - lam)^{-*} b."""
        return self._solve(b, 2)

    def condition_estimate(self) -> float:
        inv = spla.LinearOperator(
            (self.n, self.n),
            matvec=self.solve,
            rmatvec=self.solve_adjoint,
            dtype=np.complex128,
        )
        return self._norm1 * float(spla.onenormest(inv))


def factorize_shifted(op: DiscreteOperator, lam: complex, check: bool = True) -> Factorization:
    return Factorization(op, lam, check=check)


# ---------------------------------------------------------------------------
# power iteration


class PowerResult(NamedTuple):
    value: float
    iterations: int
    converged: bool
    rayleigh: float
    gap: float


def power_norm(
    apply: Callable[[np.ndarray], np.ndarray],
    apply_adjoint: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = 1e-6,
    max_iter: int = 500,
    seed: int = 0,
    block: int = 4,
    raise_on_failure: bool = True,
) -> PowerResult:
    """Largest singular value of M from block power iteration on M M^*.

    ``apply`` and ``apply_adjoint`` act on (n, block) arrays. Each sweep
    applies M^* then M to an orthonormal block and takes the top Rayleigh-Ritz
    value of M M^* on it, so near-degenerate leading pairs (parity-symmetric
    setups produce them) do not stall convergence. Stops when the extrapolated
    error delta/(1-q) of the Ritz value, q the observed contraction of
    successive changes, falls below ``tol`` relative; ``gap`` reports q.
    """
    rng = np.random.default_rng(seed)
    b = max(1, min(block, n))
    V = rng.standard_normal((n, b)) + 1j * rng.standard_normal((n, b))
    V, _ = np.linalg.qr(V)
    theta_prev = None
    delta_prev = None
    q = 0.0
    theta = 0.0
    for it in range(1, max_iter + 1):
        Wm = apply_adjoint(V)
        G = Wm.conj().T @ Wm
        theta = float(np.linalg.eigvalsh(G)[-1])
        if theta <= 0.0:
            return PowerResult(0.0, it, True, 0.0, 0.0)
        Z = apply(Wm)
        V, _ = np.linalg.qr(Z)
        if theta_prev is not None:
            delta = abs(theta - theta_prev)
            if delta_prev is not None and delta_prev > 0:
                q = min(delta / delta_prev, 0.99)
            err = delta / (1.0 - q)
            if err <= tol * theta and it > 2:
                return PowerResult(float(np.sqrt(theta)), it, True, theta, q)
            delta_prev = delta
        theta_prev = theta
    if raise_on_failure:
        raise ConvergenceError(
            f"power iteration did not converge in {max_iter} iterations",
            rayleigh=theta,
            gap=q,
            iterations=max_iter,
        )
    return PowerResult(float(np.sqrt(theta)), max_iter, False, theta, q)


def _weights(chi, grid: Grid) -> np.ndarray:
    if chi is None:
        return np.ones(grid.n)
    if isinstance(chi, CutoffProfile):
        if not chi.grid.same_as(grid):
            raise GridError("cutoff lives on a different grid")
        return chi.values
    w = np.asarray(chi, dtype=float)
    if w.shape != (grid.n,):
        raise GridError("cutoff samples do not match the grid")
    return w


def cutoff_norm(
    fact: Factorization,
    chi_left=None,
    chi_right=None,
    tol: float = 1e-6,
    max_iter: int = 500,
    full_output: bool = False,
    seed: int = 0,
):
    """|| diag(chi_left) (op - lam)^{-1} diag(chi_right) ||.

    ``None`` stands for the identity cutoff. With ``full_output`` the
    PowerResult is returned instead of the bare float.
    """
    a = _weights(chi_left, fact.grid)
    b = _weights(chi_right, fact.grid)
    a = a[:, None]
    b = b[:, None]
    res = power_norm(
        lambda v: a * fact.solve(b * v),
        lambda v: b * fact.solve_adjoint(a * v),
        fact.n,
        tol=tol,
        max_iter=max_iter,
        seed=seed,
    )
    return res if full_output else res.value


# ---------------------------------------------------------------------------
# outgoing resolvent surrogate


def outgoing_operator(
    grid: Grid,
    V: PotentialSpec | None,
    h: float,
    layout: SupportLayout = DEFAULT_LAYOUT,
    stencil: int = 3,
) -> DiscreteOperator:
    """P - i W_out, with W_out the outer absorber beyond r_6.

    Its resolvent is the artifact's realization of the outgoing resolvent
    R(lambda) of P, both at E + i0 and continued below the real axis.
    """
    Vg = V.resample(grid) if V is not None else None
    P = assemble_p(grid, Vg, h, stencil=stencil)
    return attach_absorber(P, make_profile("absorber", layout, grid))


def _chi_on(chi, layout, grid):
    if chi is None:
        return make_profile("chi", layout, grid)
    if isinstance(chi, CutoffProfile):
        return chi.resample(grid) if not chi.grid.same_as(grid) else chi
    raise TypeError("chi must be a CutoffProfile so it can be resampled on an enlarged box")


class OutgoingNorm(NamedTuple):
    value: float
    enlarged_value: float
    rel_change: float
    iterations: int
    converged: bool


def outgoing_cutoff_norm(
    grid: Grid,
    V: PotentialSpec | None,
    h: float,
    lam: complex,
    chi: CutoffProfile | None = None,
    layout: SupportLayout = DEFAULT_LAYOUT,
    tol: float = 1e-6,
    max_iter: int = 500,
    stability_tol: float = 1e-3,
    check_stability: bool = True,
    stencil: int = 3,
    full_output: bool = False,
):
    """|| chi R(lam) chi || with R realized through the outer absorber.

    For real ``lam = E`` this is the ||chi R(E + i0) chi|| surrogate. The
    stability check repeats the computation with L -> L + 4 (same dx) and
    raises StabilityError if the relative change exceeds ``stability_tol``.
    """
    layout.check(grid, stencil)
    chi = _chi_on(chi, layout, grid)
    fact = Factorization(outgoing_operator(grid, V, h, layout, stencil), lam)
    res = cutoff_norm(fact, chi, chi, tol=tol, max_iter=max_iter, full_output=True)
    big = res.value
    rel = 0.0
    if check_stability:
        g2 = make_grid(grid.L + 4.0, grid.dx)
        f2 = Factorization(outgoing_operator(g2, V, h, layout, stencil), lam)
        chi2 = chi.resample(g2)
        big = cutoff_norm(f2, chi2, chi2, tol=tol, max_iter=max_iter)
        rel = abs(big - res.value) / res.value
        if rel > stability_tol:
            raise StabilityError(
                f"cutoff norm changed by {rel:.2e} under L -> L+4 (h={h}, lambda={lam})",
                values=(res.value, big),
            )
    if full_output:
        return OutgoingNorm(res.value, big, rel, res.iterations, res.converged)
    return res.value


def damped_box_cutoff_norm(
    V: PotentialSpec | None,
    h: float,
    lam: complex,
    dx: float,
    layout: SupportLayout = DEFAULT_LAYOUT,
    tol: float = 1e-8,
    decay_lengths: float = 9.25,
) -> float:
    """||chi (P - lam)^{-1} chi|| for Im lam > 0 on a Dirichlet box without absorbers.

    The box extends ``decay_lengths`` damping lengths 2h sqrt(Re lam) / Im lam
    beyond r_6, so the wave returning from the wall is damped by e^{-2*9.25}
    (about 1e-8) over the round trip. This is the unmodified resolvent, an
    oracle for the absorber surrogate in the upper half-plane.
    """
    lam = complex(lam)
    if lam.imag <= 0:
        raise ValueError("damped box needs Im lam > 0")
    decay_len = 2.0 * h * np.sqrt(max(lam.real, h)) / lam.imag
    g = make_grid(layout.radius(6) + decay_lengths * decay_len + 1.0, dx)
    P = assemble_p(g, V.resample(g) if V is not None else None, h)
    fact = Factorization(P, lam, check=False)
    chi = make_profile("chi", layout, g)
    return cutoff_norm(fact, chi, chi, tol=tol, max_iter=2000)


def eps_ladder_cutoff_norm(
    V: PotentialSpec | None,
    h: float,
    E: float,
    dx: float,
    layout: SupportLayout = DEFAULT_LAYOUT,
    eps_factors: Sequence[float] = (0.02, 0.01, 0.005),
    tol: float = 1e-8,
) -> tuple[float, list[tuple[float, float]]]:
    """Cross-check of ||chi R(E + i0) chi|| by the limit eps -> 0+ without absorbers.

    Evaluates the damped-box norm at E + i eps for eps = f*h and extrapolates
    the ladder to eps = 0 with a polynomial through all rungs. Returns the
    extrapolated value and the ladder.
    """
    ladder = []
    for f in eps_factors:
        eps = f * h
        ladder.append((eps, damped_box_cutoff_norm(V, h, E + 1j * eps, dx, layout, tol)))
    eps_arr = np.array([e for e, _ in ladder])
    vals = np.array([v for _, v in ladder])
    coef = np.polyfit(eps_arr, vals, len(ladder) - 1)
    return float(np.polyval(coef, 0.0)), ladder


# ---------------------------------------------------------------------------
# norm curves and fits


@dataclass
class NormSample:
    h: float
    norm: float
    lam: complex
    operator: str
    iters: int = 0
    converged: bool = True


@dataclass
class NormCurve:
    """Measured h -> norm samples (the empirical a(h))."""

    samples: list[NormSample] = field(default_factory=list)
    label: str = ""

    def add(self, sample: NormSample) -> None:
        if not sample.norm > 0:
            raise ValueError("norms must be positive")
        self.samples.append(sample)

    @property
    def h(self) -> np.ndarray:
        return np.array([s.h for s in self.samples])

    @property
    def norms(self) -> np.ndarray:
        return np.array([s.norm for s in self.samples])

    def sorted(self) -> "NormCurve":
        return NormCurve(sorted(self.samples, key=lambda s: -s.h), self.label)

    @classmethod
    def from_arrays(cls, h, norms, lam=1.0, operator="synthetic", label="") -> "NormCurve":
        curve = cls(label=label)
        for hi, ni in zip(h, norms):
            curve.add(NormSample(float(hi), float(ni), complex(lam), operator))
        return curve

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = list(NORM_CSV_HEADER) + (["config_hash"] if config_hash else [])
        w.writerow(header)
        for s in self.samples:
            row = [
                repr(float(s.h)),
                repr(float(s.lam.real)),
                repr(float(s.lam.imag)),
                s.operator,
                repr(float(s.norm)),
                s.iters,
                int(bool(s.converged)),
            ]
            w.writerow(row + ([config_hash] if config_hash else []))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "NormCurve":
        rows = csv.DictReader(io.StringIO(text))
        missing = set(NORM_CSV_HEADER) - set(rows.fieldnames or ())
        if missing:
            raise ValueError(f"norm curve CSV lacks columns {sorted(missing)}")
        curve = cls(label=label)
        for r in rows:
            curve.add(
                NormSample(
                    h=float(r["h"]),
                    norm=float(r["norm"]),
                    lam=complex(float(r["lambda_re"]), float(r["lambda_im"])),
                    operator=r["operator"],
                    iters=int(r["iters"]),
                    converged=bool(int(r["converged"])),
                )
            )
        return curve


class ScalingFit(NamedTuple):
    exponent: float
    prefactor: float
    residual: float


def _check_sweep(h: np.ndarray, min_samples: int, min_span: float) -> None:
    if h.size == 0 or np.all(h == h[0]):
        raise ValueError("degenerate sweep: all h equal")
    if h.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {h.size}")
    if h.max() / h.min() < min_span * (1 - 1e-12):
        raise ValueError(f"sweep spans a factor {h.max() / h.min():.3g} < {min_span} in h")


def scaling_fit(curve: NormCurve | tuple, min_samples: int = 5, min_span: float = 4.0) -> ScalingFit:
    """Least-squares fit of log(norm) = log(c) + p log(1/h).

    Returns (p, c, rms of the log residuals). Accepts a NormCurve or an
    ``(h, norms)`` pair.
    """
    h, y = (curve.h, curve.norms) if isinstance(curve, NormCurve) else map(np.asarray, curve)
    h = np.asarray(h, dtype=float)
    _check_sweep(h, min_samples, min_span)
    u = np.log(1.0 / h)
    ly = np.log(np.asarray(y, dtype=float))
    p, logc = np.polyfit(u, ly, 1)
    resid = ly - (logc + p * u)
    return ScalingFit(float(p), float(np.exp(logc)), float(np.sqrt(np.mean(resid**2))))


def loglog_curvature(h, y) -> float:
    """Quadratic coefficient of log(y) against log(1/h).

    Negative for log(1/h)/h (local exponent 1 + 1/log(1/h) decreasing as h
    shrinks), zero for exact power laws.
    """
    u = np.log(1.0 / np.asarray(h, dtype=float))
    return float(np.polyfit(u, np.log(np.asarray(y, dtype=float)), 2)[0])


def local_slopes(h, y) -> np.ndarray:
    """Successive slopes d log(y) / d log(1/h), ordered by decreasing h."""
    h = np.asarray(h, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(-h)
    u = np.log(1.0 / h[order])
    ly = np.log(y[order])
    return np.diff(ly) / np.diff(u)


def fitted_local_slopes(h, y) -> np.ndarray:
    """Local slopes d log(y) / d log(1/h) of a quadratic fit in log(1/h), at each h (decreasing).

    Smooths the step-to-step wiggle of ``local_slopes`` while keeping the
    trend; a negative quadratic coefficient means the slope decreases.
    """
    h = np.asarray(h, dtype=float)
    y = np.asarray(y, dtype=float)
    if h.size < 3:
        raise ValueError("need at least three samples for a quadratic fit")
    order = np.argsort(-h)
    u = np.log(1.0 / h[order])
    c = np.polyfit(u, np.log(y[order]), 2)
    return c[1] + 2.0 * c[0] * u


def sweep_norms(
    h_list: Iterable[float],
    measure: Callable[[float], tuple[float, PowerResult | OutgoingNorm]],
    operator: str,
    lam: complex,
    label: str = "",
    workers: int = 1,
) -> NormCurve:
    """Run ``measure(h)`` over the sweep and collect a NormCurve (sorted by decreasing h)."""
    hs = sorted(set(float(h) for h in h_list), reverse=True)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(measure, hs))
    else:
        results = [measure(h) for h in hs]
    curve = NormCurve(label=label)
    for h, res in zip(hs, results):
        curve.add(NormSample(h, res.value, complex(lam), operator, res.iterations, res.converged))
    return curve


def measure_a(
    h_list: Iterable[float],
    V: PotentialSpec | None,
    E: float = 1.0,
    layout: SupportLayout = DEFAULT_LAYOUT,
    L: float = 13.0,
    points_per_h: float = 10.0,
    tol: float = 1e-6,
    check_stability: bool = True,
    label: str = "",
    workers: int = 1,
) -> NormCurve:
    """The empirical a(h): ||chi R(E + i0) chi|| over an h sweep."""

    def measure(h):
        grid = make_grid(L, h / points_per_h)
        return outgoing_cutoff_norm(
            grid, V, h, E, layout=layout, tol=tol, check_stability=check_stability, full_output=True
        )

    return sweep_norms(h_list, measure, "chi_R_chi", E, label=label, workers=workers)
