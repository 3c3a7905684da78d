"""Continuation of the cutoff resolvent off the real axis and the disk certificate.

Three pieces:

* the resolvent-identity Neumann series
  R(lam) = sum_k (lam - E)^k R(E)^{k+1}, valid while |lam - E| ||R(E)|| < 1;
* the continued cutoff resolvent chi R(lam) chi for Im lam < 0, realized by
  the outer-absorber operator P - i W_out;
* the certificate: sup over a sampled disk |lam - E| <= 1 / (C a(h)) of
  ||chi R(lam) chi|| / a(h) is at most C for every h, with C found by
  doubling.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .operators import (
    DEFAULT_LAYOUT,
    DiscreteOperator,
    Grid,
    PotentialSpec,
    SupportLayout,
    assemble_p,
    attach_absorber,
    make_grid,
    make_profile,
)
from .resolvent import (
    Factorization,
    NearSingularError,
    NormCurve,
    StabilityError,
    outgoing_cutoff_norm,
    power_norm,
)

LOWER_IM_LIMIT = -0.3
# Continued outgoing waves grow like exp(|Im lam| x / (2h)); past this depth
# the absorber reflection dominates and box enlargement no longer detects it.
LOWER_IM_PER_H = 0.4
DISK_CSV_HEADER = ("h", "a_h", "C_trial", "lambda_re", "lambda_im", "norm", "ratio", "pole_flag")
SUMMARY_CSV_HEADER = ("h", "sup_ratio", "pass")


class NeumannDivergence(ArithmeticError):
    """The resolvent-identity series does not converge at this lambda."""

    def __init__(self, msg, ratio=None, terms=None):
        super().__init__(msg)
        self.ratio = ratio
        self.terms = terms


# ---------------------------------------------------------------------------
# Neumann series


def cap_operator(
    grid: Grid,
    V: PotentialSpec | None,
    h: float,
    layout: SupportLayout = DEFAULT_LAYOUT,
    stencil: int = 3,
) -> DiscreteOperator:
    """P_W = P - i W with the barrier W of ``layout``."""
    P = assemble_p(grid, V.resample(grid) if V is not None else None, h, stencil=stencil)
    return attach_absorber(P, make_profile("barrierW", layout, grid))


def resolvent_norm(fact: Factorization, tol: float = 1e-8, max_iter: int = 1000) -> float:
    """||(op - lam)^{-1}|| by power iteration (no cutoffs)."""
    res = power_norm(fact.solve, fact.solve_adjoint, fact.n, tol=tol, max_iter=max_iter)
    return res.value


@dataclass(frozen=True)
class NeumannResult:
    value: np.ndarray = field(repr=False)
    terms: int
    ratio: float  # |lam - E| * ||R(E)||
    term_norms: np.ndarray = field(repr=False)
    tail_bound: float


def neumann_resolvent(
    fact_at_E: Factorization,
    lam: complex,
    v: np.ndarray,
    tol: float = 1e-10,
    max_terms: int = 500,
    norm_R: float | None = None,
    guard: float = 0.9,
    full_output: bool = False,
):
    """R(lam) v from the factorization at E alone.

    Sums (lam - E)^k R(E)^{k+1} v until the geometric tail bound
    |t_K| q / (1 - q), q = |lam - E| ||R(E)||, falls below tol times the
    partial-sum norm. ``norm_R`` defaults to a power-iteration estimate.

    Raises NeumannDivergence when q >= ``guard`` (lambda outside the
    guaranteed disk), or, with ``guard=None``, when term norms fail to
    decrease for five consecutive terms or max_terms is reached.
    """
    E = fact_at_E.lam
    d = complex(lam) - E
    v = np.asarray(v, dtype=np.complex128)
    if norm_R is None:
        norm_R = resolvent_norm(fact_at_E)
    q = abs(d) * norm_R
    if guard is not None and q >= guard:
        raise NeumannDivergence(
            f"|lambda - E| ||R(E)|| = {q:.3g} >= {guard}: outside the guaranteed disk", ratio=q
        )
    term = fact_at_E.solve(v)
    total = term.copy()
    norms = [np.linalg.norm(term)]
    rising = 0
    tail = np.inf
    k = 1
    while True:
        tail = norms[-1] * q / (1.0 - q) if q < 1.0 else np.inf
        if d == 0 or tail <= tol * np.linalg.norm(total):
            break
        if k >= max_terms:
            raise NeumannDivergence(f"no convergence within {max_terms} terms", ratio=q, terms=k)
        term = d * fact_at_E.solve(term)
        total += term
        norms.append(np.linalg.norm(term))
        rising = rising + 1 if norms[-1] >= norms[-2] else 0
        if rising >= 5:
            raise NeumannDivergence("term norms non-decreasing over five terms", ratio=q, terms=k + 1)
        k += 1
    if full_output:
        return NeumannResult(total, k, q, np.array(norms), float(tail))
    return total


def measured_ratio(result: NeumannResult) -> float:
    """Largest successive term-norm ratio of a Neumann sum."""
    t = result.term_norms
    if t.size < 2:
        return 0.0
    return float(np.max(t[1:] / t[:-1]))


# ---------------------------------------------------------------------------
# continued cutoff resolvent


def cap_lower_halfplane_norm(
    grid: Grid,
    V: PotentialSpec | None,
    h: float,
    lam: complex,
    chi=None,
    layout: SupportLayout = DEFAULT_LAYOUT,
    tol: float = 1e-6,
    check_stability: bool = True,
    stability_tol: float = 1e-3,
) -> float:
    """||chi (P - i W_out - lam)^{-1} chi||, the continued cutoff resolvent.

    Valid for Im lam >= max(-0.3, -0.4 h): the continued norm grows like
    exp(c |Im lam| / h) and deeper samples are absorber artifacts. Raises
    NearSingularError at a pole (resonance candidate) and StabilityError if
    moving the absorber changes the value.
    """
    lam = complex(lam)
    floor = max(LOWER_IM_LIMIT, -LOWER_IM_PER_H * h)
    if lam.imag < floor:
        raise ValueError(f"Im lambda = {lam.imag:g} below the valid strip Im >= {floor:g}")
    return outgoing_cutoff_norm(
        grid,
        V,
        h,
        lam,
        chi=chi,
        layout=layout,
        tol=tol,
        check_stability=check_stability,
        stability_tol=stability_tol,
    )


def real_axis_jump(
    grid: Grid,
    V: PotentialSpec | None,
    h: float,
    E: float,
    offset: float,
    layout: SupportLayout = DEFAULT_LAYOUT,
    tol: float = 1e-8,
) -> float:
    """Relative jump of the continued norm between E + i offset and E - i offset.

    The norm is Lipschitz with constant of order ||R||^2, so the jump of a
    continuous continuation is about 2 offset a(h); offsets are best given
    in units of 1/a(h).
    """
    up = cap_lower_halfplane_norm(grid, V, h, E + 1j * offset, layout=layout, tol=tol)
    down = cap_lower_halfplane_norm(grid, V, h, E - 1j * offset, layout=layout, tol=tol)
    return abs(up - down) / max(up, down)


# ---------------------------------------------------------------------------
# disk certificate


def disk_samples(E: float, radius: float, n_boundary: int = 16, n_diameter: int = 8) -> np.ndarray:
    """Center, boundary circle, and interior points of the real and vertical diameters."""
    if n_boundary < 16:
        raise ValueError("need at least 16 boundary samples")
    theta = 2 * np.pi * np.arange(n_boundary) / n_boundary
    t = -1.0 + (2.0 * np.arange(n_diameter) + 1.0) / n_diameter  # interior, symmetric
    pts = np.concatenate(
        [
            [E + 0j],
            E + radius * np.exp(1j * theta),
            E + radius * t + 0j,
            E + 1j * radius * t,
        ]
    )
    return pts


@dataclass(frozen=True)
class DiskSample:
    h: float
    a_h: float
    C_trial: float
    lam: complex
    norm: float  # nan at a pole
    ratio: float  # inf when the sample could not be certified
    pole: bool
    unstable: bool = False


@dataclass
class DiskCertificate:
    E: float
    h: np.ndarray
    a: np.ndarray
    C_trial: float | None  # smallest passing trial, None if none passed
    samples: list[DiskSample] = field(repr=False)
    sup_ratio: dict = field(default_factory=dict)
    passed: bool = False
    out_of_hypothesis: list[float] = field(default_factory=list)
    trials: list[tuple[float, bool]] = field(default_factory=list)
    real_axis_only: bool = False

    @property
    def poles(self) -> list[DiskSample]:
        return [s for s in self.samples if s.pole]

    def to_csv(self) -> str:
        lines = [",".join(DISK_CSV_HEADER)]
        for s in self.samples:
            lines.append(
                f"{float(s.h)!r},{float(s.a_h)!r},{float(s.C_trial)!r},{float(s.lam.real)!r},{float(s.lam.imag)!r},"
                f"{float(s.norm)!r},{float(s.ratio)!r},{int(s.pole)}"
            )
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = [",".join(SUMMARY_CSV_HEADER)]
        C = self.C_trial if self.C_trial is not None else np.inf
        for h in self.h:
            r = self.sup_ratio.get(float(h), np.inf)
            lines.append(f"{float(h)!r},{r!r},{int(r <= C and float(h) not in self.out_of_hypothesis)}")
        return "\n".join(lines) + "\n"


def _evaluate(task):
    h, a, C, lam, grid, V, layout, tol = task
    try:
        n = cap_lower_halfplane_norm(grid, V, h, lam, layout=layout, tol=tol)
        return DiskSample(h, a, C, lam, n, n / a, False)
    except NearSingularError:
        return DiskSample(h, a, C, lam, float("nan"), float("inf"), True)
    except StabilityError as err:
        # the absorber moved the value: the sample is not certified
        return DiskSample(h, a, C, lam, float(err.values[0]), float("inf"), False, True)
    except ValueError:
        # below the valid strip: not certified either
        return DiskSample(h, a, C, lam, float("nan"), float("inf"), False, True)


def _trial(V, hs, a, E, C, layout, L, points_per_h, n_boundary, n_diameter, real_axis_only, tol, workers, skip):
    tasks = []
    for h, ah in zip(hs, a):
        if h in skip:
            continue
        grid = make_grid(L, h / points_per_h)
        pts = disk_samples(E, 1.0 / (C * ah), n_boundary, n_diameter)
        if real_axis_only:
            pts = pts[np.abs(pts.imag) == 0]
        tasks += [(float(h), float(ah), float(C), complex(lam), grid, V, layout, tol) for lam in pts]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(_evaluate, tasks))
    else:
        samples = [_evaluate(t) for t in tasks]
    samples.sort(key=lambda s: (-s.h, s.lam.real, s.lam.imag))
    sup = {}
    for s in samples:
        sup[s.h] = max(sup.get(s.h, 0.0), s.ratio)
    ok = all(r <= C for r in sup.values()) and not any(s.pole for s in samples)
    return samples, sup, ok


def disk_certificate(
    V: PotentialSpec | None,
    a_curve: NormCurve | tuple,
    E: float = 1.0,
    C_trial: float | None = None,
    layout: SupportLayout = DEFAULT_LAYOUT,
    L: float = 13.0,
    points_per_h: float = 10.0,
    n_boundary: int = 16,
    n_diameter: int = 8,
    C_max: float = 2.0**10,
    N_max: float = 3.0,
    real_axis_only: bool = False,
    tol: float = 1e-6,
    workers: int = 1,
) -> DiskCertificate:
    """Certify sup_{|lam - E| <= 1/(C a(h))} ||chi R(lam) chi|| <= C a(h) on the sweep.

    ``a_curve`` holds the measured a(h) (a NormCurve or an ``(h, a)`` pair).
    With ``C_trial`` given, that single constant is tested; otherwise C runs
    through 1, 2, 4, ..., C_max and the first pass is reported. Values of h
    with a(h) > h^{-N_max} (or a non-finite a(h)) are outside the hypothesis
    of the bound and are listed in ``out_of_hypothesis`` instead of being
    tested; the certificate then passes only on the remaining h.
    """
    if isinstance(a_curve, NormCurve):
        hs, a = a_curve.h, a_curve.norms
    else:
        hs, a = map(np.asarray, a_curve)
    order = np.argsort(-np.asarray(hs, dtype=float))
    hs = np.asarray(hs, dtype=float)[order]
    a = np.asarray(a, dtype=float)[order]
    skip = [float(h) for h, ah in zip(hs, a) if not np.isfinite(ah) or ah > h ** (-N_max)]
    cert = DiskCertificate(float(E), hs, a, None, [], real_axis_only=real_axis_only, out_of_hypothesis=skip)
    if len(skip) == hs.size:
        return cert
    if C_trial is not None:
        if C_trial < 1:
            raise ValueError("C_trial must be >= 1")
        trials = [float(C_trial)]
    else:
        trials = [2.0**k for k in range(int(np.log2(C_max)) + 1)]
    args = (layout, L, points_per_h, n_boundary, n_diameter, real_axis_only, tol, workers, skip)
    for C in trials:
        samples, sup, ok = _trial(V, hs, a, E, C, *args)
        cert.trials.append((C, ok))
        cert.samples, cert.sup_ratio = samples, sup
        if ok:
            cert.C_trial, cert.passed = C, True
            break
    return cert
