"""Phase-space diagnostics in T*R: FBI transform, wavefront masks, rays, flows.

The semiclassical wavefront set is read off a Gaussian-windowed (FBI)
transform

    T_h u(x, xi) = c_h \\int exp(i (x - y) xi / h - (x - y)^2 / (2h)) u(y) dy,
    c_h = 2^{-1/2} (pi h)^{-3/4},

which is an isometry L^2(R) -> L^2(R^2). A point is in the mask when
|T_h u| >= tau * max |T_h u|; "O(h^infinity)" is read as decay faster than
h^k across an h sweep for the tested orders k.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage, signal

from .operators import Grid, PotentialSpec, SupportLayout
from .resolvent import fitted_local_slopes


class PhasePoint(NamedTuple):
    x: float
    xi: float

    def energy(self, V=None) -> float:
        v = 0.0 if V is None else float(np.asarray(V(np.array([self.x])))[0])
        return self.xi**2 + v


class DriftError(ArithmeticError):
    """Energy drift along a flow exceeded its tolerance; refine dt."""


# ---------------------------------------------------------------------------
# FBI transform and masks


@dataclass(frozen=True)
class PhaseField:
    x: np.ndarray = field(repr=False)
    xi: np.ndarray = field(repr=False)
    amp: np.ndarray = field(repr=False)  # shape (len(xi), len(x))
    h: float
    input_norm: float

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dxi(self) -> float:
        return float(self.xi[1] - self.xi[0])

    def phase_norm(self) -> float:
        """L^2 norm over phase space by the rectangle rule."""
        return float(np.sqrt(np.sum(self.amp**2) * self.dx * self.dxi))

    def to_csv(self) -> str:
        X, XI = np.meshgrid(self.x, self.xi)
        lines = ["x,xi,amp"]
        lines += [f"{float(a)!r},{float(b)!r},{float(c)!r}" for a, b, c in zip(X.ravel(), XI.ravel(), self.amp.ravel())]
        return "\n".join(lines) + "\n"


def coherent_state(grid: Grid, h: float, x0: float, xi0: float) -> np.ndarray:
    """L^2-normalized Gaussian packet centered at (x0, xi0), width sqrt(h)."""
    u = np.exp(-((grid.x - x0) ** 2) / (2 * h) + 1j * xi0 * (grid.x - x0) / h)
    return u / np.sqrt(np.sum(np.abs(u) ** 2) * grid.dx)


def l2_norm(u, grid: Grid) -> float:
    return float(np.sqrt(np.sum(np.abs(u) ** 2) * grid.dx))


def fbi_transform(
    u: np.ndarray,
    grid: Grid,
    h: float,
    xi_max: float = 2.0,
    x_stride: int = 4,
    xi_step: float | None = None,
) -> PhaseField:
    """|T_h u| on the phase grid x = grid.x[::x_stride], |xi| <= xi_max.

    The default xi spacing is sqrt(h)/4. Phase grids coarser than sqrt(h)
    in either direction are rejected.
    """
    u = np.asarray(u, dtype=np.complex128)
    if u.shape != (grid.n,):
        raise ValueError("u must be sampled on the grid")
    sq = np.sqrt(h)
    dxi = sq / 4 if xi_step is None else xi_step
    if x_stride * grid.dx > sq or dxi > sq:
        raise ValueError("phase grid under-resolved: spacing exceeds sqrt(h)")
    m = int(np.ceil(xi_max / dxi))
    xi = dxi * np.arange(-m, m + 1)
    c = 2 ** -0.5 * (np.pi * h) ** -0.75
    half = int(np.ceil(9.0 * sq / grid.dx))
    z = grid.dx * np.arange(-half, half + 1)
    window = np.exp(-(z**2) / (2 * h))
    # T(x, xi) = c e^{i x xi / h} sum_y g(x - y) e^{-i y xi / h} u(y) dy
    mod = np.exp(-1j * np.outer(xi, grid.x) / h) * u[None, :]
    conv = signal.fftconvolve(mod, window[None, :], mode="same", axes=1)
    amp = c * grid.dx * np.abs(conv[:, ::x_stride])
    return PhaseField(grid.x[::x_stride].copy(), xi, amp, float(h), l2_norm(u, grid))


@dataclass(frozen=True)
class WavefrontMask:
    phase: PhaseField = field(repr=False)
    tau: float
    mask: np.ndarray = field(repr=False)

    @property
    def empty(self) -> bool:
        return not self.mask.any()

    def points(self) -> list[PhasePoint]:
        j, i = np.nonzero(self.mask)
        return [PhasePoint(float(self.phase.x[a]), float(self.phase.xi[b])) for a, b in zip(i, j)]

    def contains(self, x: float, xi: float) -> bool:
        i = int(np.argmin(np.abs(self.phase.x - x)))
        j = int(np.argmin(np.abs(self.phase.xi - xi)))
        return bool(self.mask[j, i])

    def n_components(self) -> int:
        return int(ndimage.label(self.mask)[1])


def wavefront_mask(field_: PhaseField, tau: float = 1e-3) -> WavefrontMask:
    """Cells where the amplitude is at least tau times its maximum."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    top = field_.amp.max()
    if top == 0.0:
        return WavefrontMask(field_, tau, np.zeros_like(field_.amp, dtype=bool))
    return WavefrontMask(field_, tau, field_.amp >= tau * top)


class OrderVerdict(NamedTuple):
    order: int
    empty: bool
    fitted_orders: np.ndarray
    relative_amplitudes: np.ndarray


def empty_at_order(fields: Sequence[PhaseField], k: float, input_norms=None) -> OrderVerdict:
    """Is the family O(h^k)-small across the sweep?

    The relative amplitude max|T_h u| / ||f|| must decay faster than h^k:
    the local orders of a quadratic fit of its logarithm against log(1/h)
    are all at least k. ``input_norms`` are the norms ||f|| of the data each
    field was produced from (default: the norm of the transformed function
    itself). An all-zero family is empty at every order.
    """
    if len(fields) < 3:
        raise ValueError("need at least three values of h")
    norms = [f.input_norm for f in fields] if input_norms is None else list(input_norms)
    if len(norms) != len(fields):
        raise ValueError("one input norm per field")
    pairs = sorted(zip(fields, norms), key=lambda p: -p[0].h)
    h = np.array([f.h for f, _ in pairs])
    rel = np.array([f.amp.max() / n for f, n in pairs])
    if np.all(rel == 0):
        return OrderVerdict(k, True, np.full(h.size, np.inf), rel)
    if np.any(rel == 0):
        rel = np.maximum(rel, np.finfo(float).tiny)
    orders = -fitted_local_slopes(h, rel)
    return OrderVerdict(k, bool(np.all(orders >= k)), orders, rel)


# ---------------------------------------------------------------------------
# rays and flows


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    xi: np.ndarray = field(repr=False)
    dt: float
    energy_drift: float = 0.0


def free_backward_ray(rho: PhasePoint | tuple, t_grid) -> Trajectory:
    """gamma^-: (x + 2 t xi, xi) for t <= 0."""
    x0, xi0 = rho
    t = np.asarray(t_grid, dtype=float)
    if np.any(t > 0):
        raise ValueError("backward rays take t <= 0")
    dt = float(abs(t[1] - t[0])) if t.size > 1 else 0.0
    return Trajectory(t, x0 + 2.0 * t * xi0, np.full_like(t, xi0), dt)


def _force(V):
    if V is None:
        return lambda x: np.zeros_like(x), lambda x: np.zeros_like(x)
    if isinstance(V, PotentialSpec):
        return V, V.gradient
    value, grad = V
    return value, grad


def hamiltonian_flow(
    rho,
    V: PotentialSpec | tuple[Callable, Callable] | None,
    t_max: float,
    dt: float,
    drift_tol: float = 1e-6,
    record: bool = True,
) -> Trajectory:
    """RK4 integration of x' = 2 xi, xi' = -V'(x) for t in [0, t_max] (t_max may be negative).

    ``rho`` may hold arrays of seeds. ``V`` is a PotentialSpec, a
    (value, gradient) pair of callables, or None for free motion. Raises
    DriftError when |p(rho(t)) - p(rho(0))| exceeds drift_tol relative.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > 1e-3 * abs(t_max) and t_max != 0:
        raise ValueError("dt must not exceed 1e-3 |t_max|")
    value, grad = _force(V)
    x = np.array(rho[0], dtype=float)
    xi = np.array(rho[1], dtype=float)
    steps = int(np.ceil(abs(t_max) / dt))
    step = np.sign(t_max) * abs(t_max) / steps if steps else 0.0

    def rhs(x, xi):
        return 2.0 * xi, -grad(x)

    p0 = xi**2 + value(x)
    xs, xis = [x.copy()], [xi.copy()]
    for _ in range(steps):
        k1x, k1p = rhs(x, xi)
        k2x, k2p = rhs(x + 0.5 * step * k1x, xi + 0.5 * step * k1p)
        k3x, k3p = rhs(x + 0.5 * step * k2x, xi + 0.5 * step * k2p)
        k4x, k4p = rhs(x + step * k3x, xi + step * k3p)
        x = x + step / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xi = xi + step / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if record:
            xs.append(x.copy())
            xis.append(xi.copy())
    drift = float(np.max(np.abs(xi**2 + value(x) - p0) / np.maximum(1.0, np.abs(p0))))
    if drift > drift_tol:
        raise DriftError(f"energy drift {drift:.2e} exceeds {drift_tol:.0e}; refine dt")
    if record:
        t = step * np.arange(steps + 1)
        return Trajectory(t, np.array(xs), np.array(xis), abs(step), drift)
    return Trajectory(np.array([steps * step]), x[None], xi[None], abs(step), drift)


def escape_certificate(rho, R: float) -> bool:
    """Does the free backward ray from rho = (x, xi), |x| > R, stay in {|x| > R}?

    |x + 2t xi|^2 = |x|^2 + 4t x.xi + 4t^2 |xi|^2 >= |x|^2 for all t <= 0
    exactly when x.xi <= 0 (incoming data run backwards move outwards). For
    x.xi > 0 the ray runs back toward the origin and, in one dimension,
    through it.
    """
    x, xi = rho
    if abs(x) <= R:
        raise ValueError("escape certificate needs |x| > R")
    return bool(x * xi <= 0)


def ray_stays_outside(rho, R: float, t_min: float = -1e3, samples: int = 20001) -> bool:
    """Sampled-ray version of the escape certificate (an independent check)."""
    t = np.linspace(t_min, 0.0, samples)
    x = rho[0] + 2.0 * t * rho[1]
    return bool(np.all(np.abs(x) > R))


# ---------------------------------------------------------------------------
# propagation checks


@dataclass
class PropagationReport:
    passed: bool
    n_points: int
    violations: list[PhasePoint]
    skipped: list[PhasePoint]
    mode: str

    def to_csv(self) -> str:
        lines = ["kind,x,xi"]
        lines += [f"violation,{float(p.x)!r},{float(p.xi)!r}" for p in self.violations]
        lines += [f"skipped,{float(p.x)!r},{float(p.xi)!r}" for p in self.skipped]
        return "\n".join(lines) + "\n"


def tail_width(h: float, tau: float, delta: int = 0) -> float:
    """Momentum half-width of the tau-mask of a plane wave plus delta xi-cells of sqrt(h)/4."""
    return float(np.sqrt(2.0 * h * np.log(1.0 / tau)) + delta * np.sqrt(h) / 4.0)


def resolves_tails(h: float, E: float, tau: float = 1e-3, delta: int = 3) -> bool:
    """Does the dilated mask of a wave on the shell p = E stay off xi = 0?"""
    return tail_width(h, tau, delta) < np.sqrt(E)


def propagation_check(
    u_out: np.ndarray,
    f: np.ndarray,
    grid: Grid,
    h: float,
    mode: str = "free-CAP",
    tau: float = 1e-3,
    delta: int = 3,
    xi_max: float = 2.0,
    R0: float | None = None,
    E: float | None = None,
) -> PropagationReport:
    """Check that every mask point of u_out has a backward ray meeting WF(f).

    The backward ray from (x, xi) keeps xi and sweeps x + 2t xi, t <= 0, so it
    meets the delta-dilated mask of f iff that mask has a cell in the same xi
    row on the correct side of x. In ``full`` mode, points whose backward ray
    enters {|x| <= R0} are outside the propagation statement and are listed
    as skipped rather than checked.

    With ``E`` given, h is rejected unless the tau-mask of a wave on the
    shell |xi| = sqrt(E), widened by the delta-cell dilation, stays off
    xi = 0; coarser h lets Gaussian tails masquerade as wavefront.
    """
    if E is not None and not resolves_tails(h, E, tau, delta):
        raise ValueError(
            f"mask tails under-resolved at h={h}: {tail_width(h, tau, delta):.3g} >= sqrt(E)"
        )
    if mode not in ("free-CAP", "full"):
        raise ValueError("mode must be 'free-CAP' or 'full'")
    if mode == "full" and R0 is None:
        raise ValueError("full mode needs R0")
    Fo = fbi_transform(u_out, grid, h, xi_max=xi_max)
    Ff = fbi_transform(f, grid, h, xi_max=xi_max)
    mo = wavefront_mask(Fo, tau).mask
    mf = wavefront_mask(Ff, tau).mask
    if mf.sum() < 4:
        raise ValueError("mask of f under-resolved")
    mf = ndimage.binary_dilation(mf, structure=np.ones((3, 3), bool), iterations=delta)
    nx = mf.shape[1]
    first = np.where(mf.any(axis=1), np.argmax(mf, axis=1), nx)
    last = np.where(mf.any(axis=1), nx - 1 - np.argmax(mf[:, ::-1], axis=1), -1)
    half = 0.5 * Fo.dxi
    violations, skipped = [], []
    jj, ii = np.nonzero(mo)
    for j, i in zip(jj, ii):
        x, xi = float(Fo.x[i]), float(Fo.xi[j])
        if mode == "full":
            if abs(x) <= R0 or not escape_certificate((x, xi), R0):
                skipped.append(PhasePoint(x, xi))
                continue
        if xi > half:
            ok = first[j] <= i
        elif xi < -half:
            ok = last[j] >= i
        else:
            ok = bool(mf[j, i])
        if not ok:
            violations.append(PhasePoint(x, xi))
    return PropagationReport(not violations, int(mo.sum()), violations, skipped, mode)


def gluing_contradiction(layout: SupportLayout, xi_values=None, n_x: int = 41) -> list[tuple]:
    """Search for the three-point chain the first gluing argument rules out.

    A chain is rho = (x, xi) with r_1 < |x| < r_2, a point rho' on its free
    backward ray with r_3 < |x'| < r_4, and a point rho'' on the backward ray
    of rho' with |x''| < r_3. Returns every chain found on the sampled phase
    grid; the argument says there are none.
    """
    r = layout.radius
    xi_values = np.linspace(-2, 2, 41) if xi_values is None else np.asarray(xi_values)
    chains = []
    for sgn in (-1.0, 1.0):
        for x in sgn * np.linspace(r(1), r(2), n_x)[1:-1]:
            for xi in xi_values:
                if xi == 0:
                    continue
                # rho' = x + 2t xi, t < 0, landing in r_3 < |x'| < r_4
                for xp in (np.linspace(r(3), r(4), 11)[1:-1] * s for s in (-1.0, 1.0)):
                    t = (xp - x) / (2 * xi)
                    for xpk in xp[t < 0]:
                        # backward ray of rho' reaches |x''| < r_3 iff it heads toward the origin
                        if xpk * xi > 0:
                            chains.append((PhasePoint(x, xi), PhasePoint(float(xpk), xi)))
    return chains


# ---------------------------------------------------------------------------
# trapped set probe


class TrappingResult(NamedTuple):
    status: str  # "empty" or "nonempty"
    witnesses: list[PhasePoint]
    n_seeds: int


def _shell_critical_points(V: PotentialSpec, E: float, radius: float) -> list[float]:
    """Zeros of V' in [-radius, radius] with V = E (fixed points of H_p on the shell)."""
    from scipy.optimize import brentq

    xs = np.linspace(-radius, radius, 4001)
    g = V.gradient(xs)
    out = []
    for a, b, ga, gb in zip(xs[:-1], xs[1:], g[:-1], g[1:]):
        if ga == 0.0:
            c = a
        elif ga * gb < 0:
            c = brentq(V.gradient, a, b, xtol=1e-14)
        else:
            continue
        if abs(float(V(np.array([c]))[0]) - E) <= 1e-9 * max(1.0, abs(E)) and abs(V(np.array([c]))[0]) > 0:
            out.append(float(c))
    return out


def trapping_probe(
    V: PotentialSpec | None,
    E: float,
    n_seeds: int = 200,
    T: float = 20.0,
    radius: float = 2.0,
    dt: float | None = None,
    refinements: int = 6,
) -> TrappingResult:
    """Look for energy-shell points whose flow stays in |x| <= radius for |t| <= T.

    Seeds are x on a uniform grid of [-radius, radius] with xi = +-sqrt(E - V(x)),
    plus the fixed points of H_p lying on the shell. The step starts at
    ``dt`` (default T/2000) and is halved on energy drift.
    """
    if V is None or V.family == "zero":
        from .operators import make_potential

        V = make_potential("zero")
    xs = np.linspace(-radius, radius, max(n_seeds // 2, 2))
    vals = V(xs)
    ok = vals <= E
    if not ok.any():
        raise ValueError(f"no seeds on the energy shell p = {E} inside |x| <= {radius}")
    sx = np.concatenate([xs[ok], xs[ok]])
    sxi = np.sqrt(np.maximum(E - V(sx), 0.0)) * np.repeat([1.0, -1.0], ok.sum())
    crit = _shell_critical_points(V, E, radius) if V.centers else []
    sx = np.concatenate([sx, crit])
    sxi = np.concatenate([sxi, np.zeros(len(crit))])
    step = dt if dt is not None else T / 2000.0
    for _ in range(refinements + 1):
        try:
            trapped = np.ones(sx.size, bool)
            for direction in (1.0, -1.0):
                traj = hamiltonian_flow((sx, sxi), V, direction * T, step)
                trapped &= np.all(np.abs(traj.x) <= radius, axis=0)
            break
        except DriftError:
            step /= 2.0
    else:
        raise DriftError(f"energy drift persists after {refinements} dt halvings")
    witnesses = [PhasePoint(float(a), float(b)) for a, b in zip(sx[trapped], sxi[trapped])]
    return TrappingResult("nonempty" if witnesses else "empty", witnesses, int(sx.size))
