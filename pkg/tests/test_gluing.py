"""Gluing parametrix: exact algebra, supports, matrix-free norms and decay fits."""
import numpy as np
import pytest

from semires.gluing import (
    GLUING_CSV_HEADER,
    MODES,
    build_gluing,
    check_basic_identity,
    check_factor_identity,
    check_nilpotency,
    decay_sweep,
    error_product_norm,
    fit_decay,
    gluing_csv,
    gluing_report,
    matfree_identity_residual,
    parametrix_cutoff_norm,
    support_violations,
)
from semires.operators import DEFAULT_LAYOUT, make_grid, make_potential, make_profile
from semires.resolvent import Factorization, cutoff_norm

from conftest import SMALL_H, SMALL_LAYOUT, SWEEP, small_grid, small_potential

LAMBDA = {"toCAP": 1.0, "fromCAP": 1.0 - 0.02j}


@pytest.fixture(scope="module", params=[(m, f) for m in MODES for f in ("zero", "barrier_top")])
def dense_system(request):
    mode, fam = request.param
    return build_gluing(mode, small_grid(), small_potential(fam), SMALL_H, LAMBDA[mode], SMALL_LAYOUT)


class TestExactAlgebra:
    def test_basic_identity(self, dense_system):
        assert check_basic_identity(dense_system) < 1e-12

    def test_nilpotent(self, dense_system):
        nil = check_nilpotency(dense_system)
        assert nil.AK_squared == 0.0 and nil.Ainf_squared == 0.0
        assert not nil.violation

    def test_factor_identity(self, dense_system):
        assert check_factor_identity(dense_system) < 1e-12

    def test_negative_control(self, dense_system):
        assert check_factor_identity(dense_system, drop_errors=True) > 1e-1

    def test_matfree_matches_dense(self, dense_system):
        assert matfree_identity_residual(dense_system) < 1e-12

    def test_without_absorbers(self):
        sys = build_gluing("toCAP", small_grid(), small_potential("nontrap_bump"), SMALL_H, 1.0 + 0.05j, SMALL_LAYOUT, absorbers=False)
        assert check_factor_identity(sys) < 1e-12


class TestStructure:
    def test_supports(self):
        g = make_grid(13.0, 0.01)
        sys = build_gluing("toCAP", g, make_potential("nontrap_bump", g), 0.1, 1.0)
        assert support_violations(sys) == []
        r = np.abs(g.x)
        rng = np.random.default_rng(0)
        v = rng.standard_normal(g.n)
        # A_K lives on the transition of chi_K(|x| - s), A_inf on that of chi_inf(|x| + s)
        assert np.all(sys.apply_AK(v)[(r <= 4) | (r >= 5)] == 0)
        assert np.all(sys.apply_Ainf(v)[(r <= 2) | (r >= 3)] == 0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_gluing("sideways", small_grid(), None, SMALL_H, 1.0, SMALL_LAYOUT)

    def test_dense_limit(self):
        g = make_grid(13.0, 0.01)
        sys = build_gluing("toCAP", g, None, 0.1, 1.0)
        with pytest.raises(ValueError, match="dense"):
            sys.F_dense

    def test_product_norm_against_dense(self, dense_system):
        s = dense_system
        dense = np.linalg.norm(s.Ainf_dense @ s.AK_dense, 2)
        assert error_product_norm(s, tol=1e-12) == pytest.approx(dense, rel=1e-9)


class TestParametrixRoute:
    def test_cutoff_norm_via_parametrix(self):
        h = 0.07
        g = make_grid(13.0, h / 10)
        V = make_potential("nontrap_bump", g)
        sys = build_gluing("toCAP", g, V, h, 1.0)
        chi = make_profile("chi", DEFAULT_LAYOUT, g)
        direct = cutoff_norm(Factorization(sys.target, 1.0), chi, chi, tol=1e-10)
        glued = parametrix_cutoff_norm(sys, chi, tol=1e-10)
        # the two differ by the dropped A_inf A_K terms only
        assert abs(glued - direct) / direct <= 5 * error_product_norm(sys)


class TestDecayFit:
    H = np.array(SWEEP)

    def test_synthetic_h4(self):
        fit = fit_decay(self.H, 2.5 * self.H**4)
        assert fit.order == pytest.approx(4.0, abs=0.1)
        assert np.all(np.abs(fit.slopes - 4.0) < 0.1)
        assert np.all(np.abs(fit.raw_slopes - 4.0) < 0.1)
        assert fit.superpolynomial

    def test_polynomial_is_not_superpolynomial(self):
        assert not fit_decay(self.H, self.H**2).superpolynomial

    def test_exponential_is_superpolynomial(self):
        fit = fit_decay(self.H, np.exp(-0.5 / self.H))
        assert fit.superpolynomial
        assert np.all(np.diff(fit.slopes) > 0)

    def test_noisy_input_smoothed(self):
        # a reflection-phase wiggle of +-20% scrambles the two-point slopes, not the fit
        wiggle = 1 + 0.2 * np.array([1, -1, 1, -1, 1])
        fit = fit_decay(self.H, self.H**5 * wiggle)
        assert not np.all(np.diff(fit.raw_slopes) >= 0)
        assert fit.order == pytest.approx(5.0, abs=0.5)
        assert np.all(fit.slopes > 3.0)

    def test_sweep_ordering(self):
        fit = fit_decay(self.H[::-1], (self.H**4)[::-1])
        assert list(fit.h) == list(self.H)


class TestReport:
    def test_rows_and_csv(self):
        rows, fit = gluing_report("fromCAP", SWEEP, make_potential("nontrap_bump"))
        assert len(rows) == 5 and fit.superpolynomial
        assert all(r.residual_identity < 1e-10 for r in rows)
        text = gluing_csv(rows, "h4sh")
        assert text.splitlines()[0] == ",".join(GLUING_CSV_HEADER) + ",config_hash"
        # ||A_K|| is of size a(h) h, one power of h below a(h)
        assert all(2.0 < r.norm_AK < 6.0 for r in rows)

    def test_decay_sweep(self):
        fit = decay_sweep("toCAP", SWEEP, None)
        assert fit.superpolynomial
        assert fit.slopes.min() >= 3.0
