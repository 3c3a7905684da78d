"""Neumann continuation, the continued cutoff resolvent, and the disk certificate."""
import numpy as np
import pytest
import scipy.sparse.linalg as spla

from semires.continuation import (
    DISK_CSV_HEADER,
    LOWER_IM_LIMIT,
    SUMMARY_CSV_HEADER,
    NeumannDivergence,
    cap_lower_halfplane_norm,
    cap_operator,
    disk_certificate,
    disk_samples,
    measured_ratio,
    neumann_resolvent,
    real_axis_jump,
    resolvent_norm,
)
from semires.operators import make_grid, make_potential
from semires.resolvent import Factorization, damped_box_cutoff_norm, outgoing_operator

E = 1.0


@pytest.fixture(scope="module")
def cap_setup():
    h = 0.2
    g = make_grid(13.0, h / 10)
    op = cap_operator(g, make_potential("nontrap_bump", g), h)
    fact = Factorization(op, E)
    return op, fact, resolvent_norm(fact, tol=1e-12)


def _lam(norm_R, q, phase=0.7):
    return E + q / norm_R * np.exp(1j * phase)


class TestNeumann:
    @pytest.mark.parametrize("q", [0.1, 0.3, 0.5])
    @pytest.mark.parametrize("phase", [0.0, 0.7, -2.0])
    def test_matches_direct_solve(self, cap_setup, rng, q, phase):
        op, fact, nR = cap_setup
        lam = _lam(nR, q, phase)
        v = rng.standard_normal(op.n) + 1j * rng.standard_normal(op.n)
        got = neumann_resolvent(fact, lam, v, norm_R=nR)
        ref = Factorization(op, lam).solve(v)
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-8

    def test_measured_ratio_below_bound(self, cap_setup, rng):
        op, fact, nR = cap_setup
        v = rng.standard_normal(op.n)
        res = neumann_resolvent(fact, _lam(nR, 0.5), v, norm_R=nR, full_output=True)
        assert res.ratio == pytest.approx(0.5)
        assert measured_ratio(res) <= 0.5 + 1e-8
        assert res.tail_bound <= 1e-10 * np.linalg.norm(res.value)

    def test_center_is_single_term(self, cap_setup, rng):
        op, fact, nR = cap_setup
        v = rng.standard_normal(op.n)
        res = neumann_resolvent(fact, E, v, norm_R=nR, full_output=True)
        assert res.terms == 1
        assert np.array_equal(res.value, fact.solve(v))

    def test_guard_flags_divergence(self, cap_setup, rng):
        op, fact, nR = cap_setup
        with pytest.raises(NeumannDivergence) as info:
            neumann_resolvent(fact, _lam(nR, 2.0), rng.standard_normal(op.n), norm_R=nR)
        assert info.value.ratio == pytest.approx(2.0)

    def test_runtime_divergence_without_guard(self, cap_setup, rng):
        op, fact, nR = cap_setup
        # along the direction of the dominant resonance the terms grow geometrically
        with pytest.raises(NeumannDivergence, match="non-decreasing|terms"):
            neumann_resolvent(fact, _lam(nR, 2.0, phase=-np.pi / 2), rng.standard_normal(op.n), norm_R=nR, guard=None)


@pytest.fixture(scope="module")
def setup():
    g = make_grid(13.0, 0.01)
    return g, make_potential("nontrap_bump", g)


class TestContinuedNorm:
    H = 0.1

    def test_strip_limit(self, setup):
        g, V = setup
        with pytest.raises(ValueError, match="strip"):
            cap_lower_halfplane_norm(g, V, self.H, E + (LOWER_IM_LIMIT - 0.01) * 1j)
        with pytest.raises(ValueError, match="strip"):
            cap_lower_halfplane_norm(g, V, self.H, E - 0.05j)

    def test_upper_halfplane_matches_damped_box(self, setup):
        g, V = setup
        lam = E + 0.1j
        got = cap_lower_halfplane_norm(g, V, self.H, lam, tol=1e-10)
        ref = damped_box_cutoff_norm(V, self.H, lam, g.dx, tol=1e-10)
        assert got == pytest.approx(ref, rel=1e-6)

    def test_lower_halfplane_grows(self, setup):
        g, V = setup
        # the continued norm grows with depth below the axis and stays box-independent
        vals = [cap_lower_halfplane_norm(g, V, self.H, E + im * 1j, stability_tol=3e-3) for im in (0.0, -0.01, -0.03)]
        assert np.all(np.diff(vals) > 0)

    def test_jump_is_linear_in_offset(self, setup):
        g, V = setup
        a = cap_lower_halfplane_norm(g, V, self.H, E)
        j1 = real_axis_jump(g, V, self.H, E, 1e-3 / a)
        j2 = real_axis_jump(g, V, self.H, E, 0.5e-3 / a)
        assert j1 < 0.01
        assert j2 / j1 == pytest.approx(0.5, abs=0.05)


class TestDiskSamples:
    def test_layout(self):
        pts = disk_samples(E, 0.1)
        assert pts.size == 1 + 16 + 8 + 8
        assert pts[0] == E
        assert np.allclose(np.abs(pts[1:17] - E), 0.1)
        assert np.all(np.abs(pts[17:] - E) < 0.1)
        assert np.sum(pts.imag < 0) >= 7 + 4  # the lower half-disk is sampled

    def test_too_few_boundary_points(self):
        with pytest.raises(ValueError):
            disk_samples(E, 0.1, n_boundary=8)


class TestCertificate:
    @pytest.fixture
    def curve(self, a_curves):
        c = a_curves["nontrap_bump"]
        return c.h[:2], c.norms[:2]

    def test_monotone_in_C(self, curve):
        c2 = disk_certificate(make_potential("nontrap_bump"), curve, C_trial=2)
        c4 = disk_certificate(make_potential("nontrap_bump"), curve, C_trial=4)
        assert c2.passed and c4.passed
        assert all(c4.sup_ratio[h] <= c2.sup_ratio[h] * 1.05 for h in c2.sup_ratio)
        assert not c2.poles

    def test_search_and_csv(self, curve):
        cert = disk_certificate(make_potential("nontrap_bump"), curve)
        assert cert.passed and cert.C_trial <= 4
        assert cert.trials[-1] == (cert.C_trial, True)
        assert cert.to_csv().splitlines()[0] == ",".join(DISK_CSV_HEADER)
        summary = cert.summary_csv().splitlines()
        assert summary[0] == ",".join(SUMMARY_CSV_HEADER)
        assert all(line.endswith(",1") for line in summary[1:])

    def test_real_axis_only(self, curve):
        cert = disk_certificate(make_potential("nontrap_bump"), curve, C_trial=1, real_axis_only=True)
        assert all(s.lam.imag == 0 for s in cert.samples)
        # on the real diameter the norm stays close to its value at E
        assert all(0.8 < r < 1.25 for r in cert.sup_ratio.values())

    def test_rejects_small_C(self, curve):
        with pytest.raises(ValueError):
            disk_certificate(None, curve, C_trial=0.5)

    def test_synthetic_out_of_hypothesis(self):
        cert = disk_certificate(None, ([0.1, 0.07], [1e5, np.inf]))
        assert cert.out_of_hypothesis == [0.1, 0.07]
        assert not cert.passed and cert.samples == []


def test_well_resonance_out_of_hypothesis():
    # a resonance just below the real axis makes a(h) exceed h^-3
    h = 0.05
    g = make_grid(13.0, h / 10)
    V = make_potential("double_bump_well", g)
    Q = outgoing_operator(g, V, h).to_sparse().tocsc()
    res = spla.eigs(Q, k=1, sigma=2.108, return_eigenvectors=False)[0]
    assert -1e-6 < res.imag < 0
    a = cap_lower_halfplane_norm(g, V, h, res.real, check_stability=False)
    assert a > h**-3
    cert = disk_certificate(V, ([h], [a]))
    assert cert.out_of_hypothesis == [h]
