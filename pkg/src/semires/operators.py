"""Grids, cutoff profiles, potentials and banded Schrödinger operators in 1D.

Everything lives on a uniform grid on [-L, L]. Operators are stored in
LAPACK general-band layout, ``ab[bw + i - j, j] = A[i, j]``, with equal lower
and upper bandwidth ``bw`` set by the stencil (1 for the 3-point Laplacian,
2 for the 5-point one). All nodes, including x = +-L, are unknowns; the
homogeneous Dirichlet condition is imposed on the ghost nodes just outside.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
import scipy.sparse as sp

MIN_CELLS_PER_HALF_LENGTH = 50

# finite-difference weights for -d^2/dx^2 (times dx^2), offsets 0, 1, 2
_STENCILS = {
    3: (2.0, -1.0),
    5: (30.0 / 12.0, -16.0 / 12.0, 1.0 / 12.0),
}

PROFILE_KINDS = ("chi", "chiK", "chiInf", "barrierW", "absorber")
POTENTIAL_FAMILIES = ("zero", "nontrap_bump", "barrier_top", "double_bump_well")
OPERATOR_TAGS = ("P", "P0", "PW", "PW0", "custom")


class GridError(ValueError):
    pass


class LayoutError(ValueError):
    """Support layout does not fit the grid or breaks the support algebra."""


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    L: float
    dx: float
    x: np.ndarray = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.x.size

    def same_as(self, other: "Grid") -> bool:
        return self.n == other.n and self.L == other.L and self.dx == other.dx


def make_grid(L: float, dx: float) -> Grid:
    """Uniform grid on [-L, L] with both endpoints.

    The requested spacing is rounded so that 2L/dx is an integer; the stored
    ``dx`` is the actual spacing.
    """
    if L <= 0 or dx <= 0:
        raise GridError(f"need L > 0 and dx > 0, got L={L}, dx={dx}")
    if L / dx < MIN_CELLS_PER_HALF_LENGTH:
        raise GridError(
            f"grid too coarse: L/dx = {L / dx:.3g} < {MIN_CELLS_PER_HALF_LENGTH}"
        )
    cells = int(round(2.0 * L / dx))
    x = np.linspace(-L, L, cells + 1)
    return Grid(L=float(L), dx=2.0 * L / cells, x=x)


def grid_for(h: float, L: float = 13.0, points_per_h: float = 10.0) -> Grid:
    """Grid obeying the resolution rule dx <= h / points_per_h."""
    return make_grid(L, h / points_per_h)


# ---------------------------------------------------------------------------
# smooth transitions


def smooth_step(t, order: int | None = None) -> np.ndarray:
    """0 for t <= 0, 1 for t >= 1, monotone in between.

    With ``order=None`` this is the C-infinity template
    exp(-1/t) / (exp(-1/t) + exp(-1/(1-t))). An integer ``order`` k gives the
    C^k polynomial smoothstep instead. The ends are exact 0 and 1, which is
    what makes the discrete support algebra exact.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    out[t >= 1.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    if order is None:
        a = np.exp(-1.0 / tm)
        b = np.exp(-1.0 / (1.0 - tm))
        out[mid] = a / (a + b)
    else:
        from math import comb

        k = int(order)
        s = np.zeros_like(tm)
        for j in range(k + 1):
            s += comb(k + j, j) * comb(2 * k + 1, k - j) * (-tm) ** j
        out[mid] = tm ** (k + 1) * s
    return out


# ---------------------------------------------------------------------------
# support layout and cutoff profiles


@dataclass(frozen=True)
class SupportLayout:
    """Nested radii r_k = R0 + k*s, k = 1..6, plus the outer absorbing collar.

    ``margin`` is the fraction of each unit interval [r_k, r_{k+1}] kept flat
    on either side of a transition, so a transition happens strictly inside
    its interval. Two transitions that touch nominally (e.g. chi_K(|x|) and
    chi_K(|x| - s) at r_3) are then separated by 2*margin*s.
    ``barrier_margin`` plays the same role for the barrier W on [r_4, r_5];
    it defaults to 0 because W touches no other transition, and the longest
    ramp reflects least.
    """

    R0: float = 1.0
    s: float = 1.0
    absorber_width: float = 4.0
    margin: float = 0.1
    absorber_ramp: float = 3.0
    absorber_strength: float = 1.0
    barrier_margin: float = 0.0

    def __post_init__(self):
        if self.R0 <= 0 or self.s <= 0:
            raise LayoutError("R0 and s must be positive")
        if not (0.0 <= self.margin < 0.5 and 0.0 <= self.barrier_margin < 0.5):
            raise LayoutError("margins must lie in [0, 0.5)")
        if not 0 < self.absorber_ramp <= self.absorber_width:
            raise LayoutError("absorber ramp must fit inside the collar")

    def radius(self, k: int) -> float:
        return self.R0 + k * self.s

    @property
    def transition_gap(self) -> float:
        return 2.0 * self.margin * self.s

    def check(self, grid: Grid, stencil: int = 3) -> None:
        """Raise LayoutError unless the layout fits ``grid`` at stencil resolution."""
        if not self.radius(6) < grid.L - self.absorber_width:
            raise LayoutError(
                f"r_6 = {self.radius(6):g} must be < L - absorber_width = "
                f"{grid.L - self.absorber_width:g}"
            )
        reach = (stencil // 2) * grid.dx
        if not reach < self.transition_gap:
            raise LayoutError(
                f"stencil reach {reach:.3g} does not fit in the transition gap "
                f"{self.transition_gap:.3g} (s too small for this stencil)"
            )


DEFAULT_LAYOUT = SupportLayout()


@dataclass(frozen=True)
class CutoffProfile:
    """A cutoff sampled on a grid; ``shift`` evaluates it at |x| + shift."""

    kind: str
    inner: float
    outer: float
    values: np.ndarray = field(repr=False, compare=False)
    grid: Grid = field(repr=False, compare=False)
    layout: SupportLayout = field(repr=False, compare=False)
    shift: float = 0.0
    smoothness: int | None = None

    def resample(self, grid: Grid) -> "CutoffProfile":
        return make_profile(self.kind, self.layout, grid, self.smoothness, self.shift)

    def to_csv(self) -> str:
        """Rows ``x,value``."""
        lines = ["x,value"] + [f"{float(a)!r},{float(b)!r}" for a, b in zip(self.grid.x, self.values)]
        return "\n".join(lines) + "\n"


def _profile_radii(kind: str, layout: SupportLayout, grid: Grid) -> tuple[float, float]:
    r = layout.radius
    if kind == "chi":
        return r(5), r(6)
    if kind in ("chiK", "chiInf"):
        return r(2), r(3)
    if kind == "barrierW":
        return r(4), r(5)
    if kind == "absorber":
        start = grid.L - layout.absorber_width
        return start, start + layout.absorber_ramp
    raise ValueError(f"unknown profile kind {kind!r}; expected one of {PROFILE_KINDS}")


def make_profile(
    kind: str,
    layout: SupportLayout = DEFAULT_LAYOUT,
    grid: Grid | None = None,
    smoothness: int | None = None,
    shift: float = 0.0,
) -> CutoffProfile:
    """Sample a cutoff or barrier of the given kind on ``grid``.

    chi, chiK are 1 inside and 0 outside their interval; chiInf = 1 - chiK;
    barrierW and the outer ``absorber`` rise from 0 to 1 (the absorber is
    scaled by ``layout.absorber_strength``). ``shift=-s`` gives chi_K(|x|-s),
    ``shift=+s`` gives chi_inf(|x|+s).
    """
    if grid is None:
        raise ValueError("a grid is required")
    inner, outer = _profile_radii(kind, layout, grid)
    if not inner < outer:
        raise LayoutError(f"radius ordering violated for {kind}: {inner} >= {outer}")
    if kind == "absorber":
        if inner <= layout.radius(6) or outer > grid.L:
            raise LayoutError("outer absorber must sit between r_6 and L")
        m = 0.0
    elif kind == "barrierW":
        m = layout.barrier_margin * (outer - inner)
    else:
        m = layout.margin * (outer - inner)
    r = np.abs(grid.x) + shift
    t = (r - (inner + m)) / ((outer - m) - (inner + m))
    rise = smooth_step(t, smoothness)
    if kind in ("chi", "chiK"):
        values = 1.0 - rise
    elif kind == "chiInf":
        values = 1.0 - (1.0 - rise)
    elif kind == "absorber":
        values = layout.absorber_strength * rise
    else:
        values = rise
    return CutoffProfile(
        kind=kind,
        inner=inner,
        outer=outer,
        values=values,
        grid=grid,
        layout=layout,
        shift=shift,
        smoothness=smoothness,
    )


# ---------------------------------------------------------------------------
# potentials


def _bump(y):
    """exp(1 - 1/(1 - y^2)) on |y| < 1, zero elsewhere; peak value 1 at y = 0."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - y[inside] ** 2))
    return out


def _bump_prime(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - yi**2)) * (-2.0 * yi / (1.0 - yi**2) ** 2)
    return out


@dataclass(frozen=True)
class PotentialSpec:
    """Real C-infinity potential, compactly supported in |x| < R0.

    The family is a sum of bumps ``amplitude * b((x - c) / w)``; ``centers``
    and ``width`` describe them. ``values`` is the sample on ``grid``.
    """

    family: str
    amplitude: float
    centers: tuple[float, ...]
    width: float
    R0: float
    grid: Grid | None = field(default=None, repr=False, compare=False)
    values: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        v = np.zeros_like(x)
        for c in self.centers:
            v += self.amplitude * _bump((x - c) / self.width)
        return v

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        for c in self.centers:
            g += self.amplitude / self.width * _bump_prime((x - c) / self.width)
        return g

    @property
    def max_value(self) -> float:
        if not self.centers or self.amplitude == 0:
            return 0.0
        xs = np.linspace(-self.R0, self.R0, 4001)
        return float(max(self(xs).max(), self(np.asarray(self.centers)).max()))

    def resample(self, grid: Grid) -> "PotentialSpec":
        return PotentialSpec(
            family=self.family,
            amplitude=self.amplitude,
            centers=self.centers,
            width=self.width,
            R0=self.R0,
            grid=grid,
            values=self(grid.x),
        )


def make_potential(
    family: str,
    grid: Grid | None = None,
    R0: float = 1.0,
    amplitude: float | None = None,
    width: float | None = None,
    separation: float | None = None,
) -> PotentialSpec:
    """Build one of the shipped potential families.

    nontrap_bump: single bump of height 0.5 (below E = 1).
    barrier_top: single bump of height 1, a nondegenerate maximum at E = 1.
    double_bump_well: two bumps of height 4 at +-0.6*R0 enclosing a well.
    """
    if family == "zero":
        spec = PotentialSpec("zero", 0.0, (), 1.0, R0)
    elif family in ("nontrap_bump", "barrier_top"):
        amp = amplitude if amplitude is not None else (0.5 if family == "nontrap_bump" else 1.0)
        w = width if width is not None else 0.9 * R0
        spec = PotentialSpec(family, float(amp), (0.0,), float(w), R0)
    elif family == "double_bump_well":
        amp = amplitude if amplitude is not None else 4.0
        c = separation if separation is not None else 0.6 * R0
        w = width if width is not None else 0.35 * R0
        spec = PotentialSpec(family, float(amp), (-c, c), float(w), R0)
    else:
        raise ValueError(f"unknown potential family {family!r}; expected one of {POTENTIAL_FAMILIES}")
    if any(abs(c) + spec.width > R0 for c in spec.centers):
        raise LayoutError("potential support must lie inside |x| < R0")
    return spec.resample(grid) if grid is not None else spec


# ---------------------------------------------------------------------------
# banded operators


@dataclass(frozen=True)
class DiscreteOperator:
    """Banded complex (or real) matrix on a grid; immutable after assembly."""

    ab: np.ndarray = field(repr=False)
    bandwidth: int
    h: float
    tag: str
    grid: Grid = field(repr=False)

    def __post_init__(self):
        if self.tag not in OPERATOR_TAGS:
            raise ValueError(f"tag must be one of {OPERATOR_TAGS}")
        self.ab.setflags(write=False)

    @property
    def n(self) -> int:
        return self.ab.shape[1]

    def diagonal(self, k: int = 0) -> np.ndarray:
        """k-th diagonal (k > 0 above the main one), length n - |k|."""
        row = self.bandwidth - k
        return self.ab[row, max(k, 0) : self.n + min(k, 0)]

    def to_sparse(self) -> sp.csr_array:
        bw = self.bandwidth
        offsets = list(range(-bw, bw + 1))
        diags = [self.diagonal(k) for k in offsets]
        return sp.diags_array(diags, offsets=offsets, shape=(self.n, self.n), format="csr")

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=self.ab.dtype)
        idx = np.arange(self.n)
        for k in range(-self.bandwidth, self.bandwidth + 1):
            rows = idx[max(-k, 0) : self.n - max(k, 0)]
            out[rows, rows + k] = self.diagonal(k)
        return out

    def matvec(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u)
        out = np.zeros(u.shape, dtype=np.result_type(self.ab, u))
        n, bw = self.n, self.bandwidth
        for k in range(-bw, bw + 1):
            d = self.diagonal(k)
            if k >= 0:
                out[: n - k] += d * u[k:]
            else:
                out[-k:] += d * u[: n + k]
        return out

    def to_csv(self) -> str:
        """One row per node: ``x`` then re/im of A[i, i+k] for k = -bw..bw (0 off the matrix)."""
        bw, n = self.bandwidth, self.n
        head = ["x"]
        for k in range(-bw, bw + 1):
            head += [f"d{k}_re", f"d{k}_im"]
        cols = []
        for k in range(-bw, bw + 1):
            full = np.zeros(n, dtype=np.complex128)
            full[max(-k, 0) : n - max(k, 0)] = self.diagonal(k)
            cols.append(full)
        lines = [",".join(head)]
        for i in range(n):
            cells = [repr(float(self.grid.x[i]))]
            for c in cols:
                cells += [repr(float(c[i].real)), repr(float(c[i].imag))]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, h: float, tag: str) -> "DiscreteOperator":
        """Inverse of ``to_csv`` (the grid is rebuilt from the node column)."""
        rows = [line.split(",") for line in text.strip().splitlines()]
        data = np.array(rows[1:], dtype=float)
        x = data[:, 0]
        bw = (data.shape[1] - 1) // 4
        n = x.size
        grid = make_grid(float(x[-1]), float((x[-1] - x[0]) / (n - 1)))
        ab = np.zeros((2 * bw + 1, n), dtype=np.complex128)
        for j, k in enumerate(range(-bw, bw + 1)):
            vals = data[:, 1 + 2 * j] + 1j * data[:, 2 + 2 * j]
            ab[bw - k, max(k, 0) : n + min(k, 0)] = vals[max(-k, 0) : n - max(k, 0)]
        return cls(ab, bw, h, tag, grid)

    def shifted(self, lam: complex) -> np.ndarray:
        """Band array of (self - lam * Id)."""
        ab = self.ab.astype(np.complex128, copy=True)
        ab[self.bandwidth, :] -= lam
        return ab


def _check_same_grid(a: Grid, b: Grid) -> None:
    if not a.same_as(b):
        raise GridError("objects live on different grids")


def assemble_p(
    grid: Grid,
    potential: PotentialSpec | np.ndarray | None,
    h: float,
    stencil: int = 3,
    boundary: str = "dirichlet",
) -> DiscreteOperator:
    """Banded matrix for -h^2 d^2/dx^2 + V.

    ``potential=None`` (or the zero family) gives the free operator, tagged P0.
    ``boundary='neumann'`` (3-point only) replaces the ghost-node Dirichlet
    ends by a symmetric first-order Neumann closure; it exists to test that
    the absorber makes the boundary condition immaterial.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if stencil not in _STENCILS:
        raise ValueError("stencil must be 3 or 5")
    if potential is None:
        v = np.zeros(grid.n)
        free = True
    elif isinstance(potential, PotentialSpec):
        if potential.grid is None:
            potential = potential.resample(grid)
        _check_same_grid(potential.grid, grid)
        v = np.asarray(potential.values, dtype=float)
        free = potential.family == "zero"
    else:
        v = np.asarray(potential, dtype=float)
        if v.shape != (grid.n,):
            raise GridError("potential samples do not match the grid")
        free = not np.any(v)
    weights = _STENCILS[stencil]
    bw = len(weights) - 1
    n = grid.n
    scale = h * h / (grid.dx * grid.dx)
    ab = np.zeros((2 * bw + 1, n))
    ab[bw, :] = scale * weights[0] + v
    for k in range(1, bw + 1):
        ab[bw - k, k:] = scale * weights[k]  # superdiagonal k
        ab[bw + k, : n - k] = scale * weights[k]  # subdiagonal k
    if boundary == "neumann":
        if stencil != 3:
            raise ValueError("neumann closure is only available for the 3-point stencil")
        ab[bw, 0] -= scale
        ab[bw, -1] -= scale
    elif boundary != "dirichlet":
        raise ValueError("boundary must be 'dirichlet' or 'neumann'")
    return DiscreteOperator(ab=ab, bandwidth=bw, h=float(h), tag="P0" if free else "P", grid=grid)


def attach_absorber(op: DiscreteOperator, W: CutoffProfile | np.ndarray) -> DiscreteOperator:
    """op - i diag(W); tags P -> PW and P0 -> PW0."""
    if op.tag not in ("P", "P0"):
        raise ValueError(f"absorber attaches to P or P0, not {op.tag}")
    if isinstance(W, CutoffProfile):
        _check_same_grid(W.grid, op.grid)
        w = W.values
    else:
        w = np.asarray(W, dtype=float)
        if w.shape != (op.n,):
            raise GridError("absorber samples do not match the grid")
    ab = op.ab.astype(np.complex128, copy=True)
    ab[op.bandwidth, :] -= 1j * w
    return DiscreteOperator(ab=ab, bandwidth=op.bandwidth, h=op.h, tag={"P": "PW", "P0": "PW0"}[op.tag], grid=op.grid)


def commutator_with_cutoff(op: DiscreteOperator, profile: CutoffProfile | np.ndarray) -> DiscreteOperator:
    """[op, diag(c)] = op diag(c) - diag(c) op, entrywise A_ij c_j - c_i A_ij.

    The two products are formed exactly as in the dense computation, so the
    result equals the dense ``A @ diag(c) - diag(c) @ A`` bit for bit.
    """
    if isinstance(profile, CutoffProfile):
        _check_same_grid(profile.grid, op.grid)
        c = profile.values
    else:
        c = np.asarray(profile, dtype=float)
        if c.shape != (op.n,):
            raise GridError("profile samples do not match the grid")
    bw, n = op.bandwidth, op.n
    ab = np.zeros_like(op.ab)
    for k in range(-bw, bw + 1):
        d = op.diagonal(k)
        rows = np.arange(max(-k, 0), n - max(k, 0))
        cols = rows + k
        ab[bw - k, cols] = d * c[cols] - c[rows] * d
    return DiscreteOperator(ab=ab, bandwidth=bw, h=op.h, tag="custom", grid=op.grid)


def support_rows(op: DiscreteOperator) -> np.ndarray:
    """Indices of rows with at least one nonzero entry."""
    return np.unique(op.to_sparse().nonzero()[0])
