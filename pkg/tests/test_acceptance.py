"""Acceptance criteria 1-8 at their stated tolerances.

Each test records one pass/fail line, printed in the terminal summary.
"""
import numpy as np
import pytest

from semires.continuation import (
    NeumannDivergence,
    cap_operator,
    disk_certificate,
    neumann_resolvent,
    real_axis_jump,
    resolvent_norm,
)
from semires.gluing import (
    MODES,
    build_gluing,
    check_basic_identity,
    check_factor_identity,
    check_nilpotency,
    fit_decay,
    gluing_report,
)
from semires.harness import classify_curve
from semires.microlocal import (
    coherent_state,
    empty_at_order,
    fbi_transform,
    l2_norm,
    propagation_check,
    trapping_probe,
)
from semires.operators import assemble_p, commutator_with_cutoff, make_grid, make_potential, make_profile
from semires.resolvent import Factorization, outgoing_operator, power_norm, scaling_fit

from conftest import SMALL_H, SMALL_LAYOUT, SMALL_N, SWEEP, small_grid, small_potential

E = 1.0


def record(log, k, ok, detail):
    log[k] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_exact_algebra(acceptance_log):
    worst_nil, worst_id = 0.0, 0.0
    for mode, lam in (("toCAP", 1.0), ("fromCAP", 1.0 - 0.02j)):
        for fam in ("zero", "nontrap_bump", "barrier_top", "double_bump_well"):
            sys = build_gluing(mode, small_grid(), small_potential(fam), SMALL_H, lam, SMALL_LAYOUT)
            assert sys.grid.n <= SMALL_N
            nil = check_nilpotency(sys)
            scale = max(np.linalg.norm(sys.AK_dense, 2), np.linalg.norm(sys.Ainf_dense, 2))
            worst_nil = max(worst_nil, nil.AK_squared / scale, nil.Ainf_squared / scale)
            worst_id = max(worst_id, check_basic_identity(sys), check_factor_identity(sys))
    ok = worst_nil <= 1e-12 and worst_id <= 1e-10 and not nil.violation
    record(acceptance_log, 1, ok, f"max rel ||A^2|| = {worst_nil:.1e}, max residual = {worst_id:.1e}")


def test_criterion_2_nontrapping_scaling(acceptance_log, a_curves):
    parts, ok = [], True
    for fam in ("zero", "nontrap_bump"):
        c = a_curves[fam]
        fit = scaling_fit((c.h, c.norms))
        ok &= 0.85 <= fit.exponent <= 1.15 and fit.residual <= 0.05
        parts.append(f"{fam}: p = {fit.exponent:.4f}, rms = {fit.residual:.1e}")
    record(acceptance_log, 2, ok, "; ".join(parts))


def test_criterion_3_error_decay(acceptance_log):
    V = make_potential("nontrap_bump")
    parts, ok = [], True
    for mode in MODES:
        _, fit = gluing_report(mode, SWEEP, V)
        mono = bool(np.all(np.diff(fit.slopes) >= 0))
        ok &= bool(fit.slopes.min() >= 3.0) and mono
        parts.append(f"{mode} slopes {np.round(fit.slopes, 2).tolist()}")
    synth = fit_decay(np.array(SWEEP), 0.3 * np.array(SWEEP) ** 4)
    ok &= abs(synth.order - 4.0) <= 0.1
    parts.append(f"synthetic h^4 -> {synth.order:.3f}")
    record(acceptance_log, 3, ok, "; ".join(parts))


def test_criterion_4_disk_certificate(acceptance_log, a_curves):
    cert = disk_certificate(make_potential("nontrap_bump"), a_curves["nontrap_bump"], E)
    lower = sum(1 for s in cert.samples if s.lam.imag < 0)
    unstable = sum(1 for s in cert.samples if s.unstable)
    C = cert.C_trial if cert.C_trial is not None else np.inf
    ok = cert.passed and C <= 2**10 and lower > 0 and not cert.poles and unstable == 0 and not cert.out_of_hypothesis
    record(
        acceptance_log, 4, ok,
        f"C_trial = {C:g}, {len(cert.samples)} samples ({lower} with Im < 0), poles {len(cert.poles)}",
    )


def test_criterion_5_continuation(acceptance_log, a_curves, rng):
    h = 0.2
    g = make_grid(13.0, h / 10)
    op = cap_operator(g, make_potential("nontrap_bump", g), h)
    fact = Factorization(op, E)
    nR = resolvent_norm(fact, tol=1e-12)
    worst = 0.0
    for q in (0.1, 0.25, 0.5):
        for phase in np.linspace(0, 2 * np.pi, 6, endpoint=False):
            lam = E + q / nR * np.exp(1j * phase)
            v = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
            ref = Factorization(op, lam).solve(v)
            got = neumann_resolvent(fact, lam, v, norm_R=nR)
            worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    flagged = 0
    for q in (2.0, 4.0):
        try:
            neumann_resolvent(fact, E + q / nR, rng.standard_normal(g.n), norm_R=nR)
        except NeumannDivergence:
            flagged += 1
    try:
        neumann_resolvent(fact, E - 2.0j / nR, rng.standard_normal(g.n), norm_R=nR, guard=None)
    except NeumannDivergence:
        flagged += 1
    c = a_curves["nontrap_bump"]
    jumps = [
        real_axis_jump(make_grid(13.0, hh / 10), make_potential("nontrap_bump"), hh, E, 1e-3 / a)
        for hh, a in zip(c.h, c.norms)
    ]
    ok = worst <= 1e-8 and flagged == 3 and max(jumps) <= 0.01
    record(
        acceptance_log, 5, ok,
        f"Neumann err {worst:.1e}, divergence flagged {flagged}/3, max jump {max(jumps):.2%}",
    )


def test_criterion_6_norms_and_commutators(acceptance_log, rng):
    worst = 0.0
    for mode, lam in (("toCAP", 1.0), ("fromCAP", 1.0 - 0.02j)):
        sys = build_gluing(mode, small_grid(), small_potential("nontrap_bump"), SMALL_H, lam, SMALL_LAYOUT)
        for M in (sys.AK_dense, sys.Ainf_dense, sys.Ainf_dense @ sys.AK_dense, sys.F_dense):
            res = power_norm(lambda v: M @ v, lambda v: M.conj().T @ v, M.shape[0], tol=1e-12)
            worst = max(worst, abs(res.value / np.linalg.norm(M, 2) - 1))
    exact = True
    g = small_grid()
    for stencil in (3, 5):
        P = assemble_p(g, small_potential("barrier_top").resample(g), SMALL_H, stencil=stencil)
        A = P.to_dense()
        for kind in ("chiK", "chi", "chiInf", "barrierW"):
            c = make_profile(kind, SMALL_LAYOUT, g).values
            exact &= np.array_equal(commutator_with_cutoff(P, c).to_dense(), A @ np.diag(c) - np.diag(c) @ A)
        c = rng.uniform(0, 1, g.n)
        exact &= np.array_equal(commutator_with_cutoff(P, c).to_dense(), A @ np.diag(c) - np.diag(c) @ A)
    ok = worst <= 1e-8 and exact
    record(acceptance_log, 6, ok, f"power vs SVD rel err {worst:.1e}, commutators exact: {exact}")


def test_criterion_7_microlocal(acceptance_log, rng):
    h = 0.05
    g = make_grid(13.0, h / 10)
    iso = 0.0
    for _ in range(10):
        u = sum(
            complex(*rng.standard_normal(2)) * coherent_state(g, h, rng.uniform(-8, 8), rng.uniform(-1.2, 1.2))
            for _ in range(3)
        )
        iso = max(iso, abs(fbi_transform(u, g, h).phase_norm() / l2_norm(u, g) - 1))

    fact = Factorization(outgoing_operator(g, None, h), E)
    violations = 0
    for _ in range(20):
        s = rng.choice([-1.0, 1.0])
        f = coherent_state(g, h, s * rng.uniform(3.5, 5.5), s * rng.uniform(0.8, 1.2))
        violations += len(propagation_check(fact.solve(f), f, g, h, E=E).violations)

    V = make_potential("nontrap_bump")
    fields = []
    for hh in SWEEP:
        gg = make_grid(13.0, hh / 10)
        sys = build_gluing("toCAP", gg, V, hh, E)
        f = coherent_state(gg, hh, 0.0, 1.0)
        fields.append(fbi_transform(sys.apply_Ainf(sys.apply_AK(f)), gg, hh, xi_max=2.0 * np.sqrt(2.0)))
    verdict = empty_at_order(fields, 4, [1.0] * len(fields))

    probes = {fam: trapping_probe(make_potential(fam), E) for fam in ("nontrap_bump", "zero", "barrier_top")}
    witness = any(abs(w.x) < 1e-9 and w.xi == 0 for w in probes["barrier_top"].witnesses)
    trap_ok = (
        probes["nontrap_bump"].status == "empty"
        and probes["zero"].status == "empty"
        and probes["barrier_top"].status == "nonempty"
        and witness
    )
    ok = iso <= 1e-4 and violations == 0 and verdict.empty and trap_ok
    record(
        acceptance_log, 7, ok,
        f"isometry {iso:.1e}, propagation violations {violations}/20 packets, "
        f"A_inf A_K f orders {np.round(verdict.fitted_orders, 2).tolist()}, trapping ok: {trap_ok}",
    )


def test_criterion_8_barrier_top(acceptance_log, a_curves):
    c = a_curves["barrier_top"]
    ah = c.norms * c.h
    row = classify_curve(c.h, c.norms, "barrier_top")
    ok = bool(np.all(np.diff(ah) > 0)) and row.classification == "log-compatible"
    record(acceptance_log, 8, ok, f"a(h) h = {np.round(ah, 3).tolist()}, class {row.classification}")
