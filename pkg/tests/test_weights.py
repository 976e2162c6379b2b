"""Unit tests for the Carleman weight families and the inequality
evaluators."""

import numpy as np
import pytest

from degenctrl import coeff, mesh, pde, weights
from degenctrl.errors import ConfigError, ConstraintError


def constant_profile(n=101):
    xs = np.linspace(0.0, 1.0, n)
    return coeff.CoefficientProfile(
        xs, np.ones(n), None, 0.0, coeff.KIND_ND,
        func=lambda x: np.ones_like(np.asarray(x, dtype=float)))


def test_eval_theta_domain_and_symmetry():
    assert weights.eval_theta(0.5, 1.0) == pytest.approx(
        1.0 / (0.5 * 0.5) ** 4)
    assert weights.eval_theta(0.3, 1.0) == pytest.approx(
        weights.eval_theta(0.7, 1.0), rel=1e-12)
    with pytest.raises(ValueError):
        weights.eval_theta(0.0, 1.0)
    with pytest.raises(ValueError):
        weights.eval_theta(1.0, 1.0)


def test_degenerate_weight_invariants():
    for alpha, form in ((0.5, mesh.FORM_DIV), (1.5, mesh.FORM_DIV),
                        (0.5, mesh.FORM_NONDIV)):
        p = coeff.make_prototype_profile(alpha, 0.5, 201)
        w = weights.build_degenerate_weight(p, form, 1.0, 0.2)
        x = np.linspace(0.0, 1.0, 301)
        psi = w.psi(x)
        c1 = w.constants.get("c1", w.constants.get("d1"))
        c2 = w.constants.get("c2", w.constants.get("d2"))
        assert np.all(psi < 0.0)
        assert np.all(psi >= -c1 * c2 - 1e-12)
        assert w.psi(0.5) == pytest.approx(-c1 * c2)


def test_degenerate_weight_afix_identity():
    # a(x) phi_x = c1 Theta (x - x0) for the divergence weight
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    w = weights.build_degenerate_weight(p, mesh.FORM_DIV, 1.3, 0.2)
    x = np.linspace(0.05, 0.95, 181)
    t, T = 0.4, 1.0
    theta = weights.eval_theta(t, T)
    lhs = p(x) * theta * w.dpsi_fn(x)
    rhs = 1.3 * theta * (x - 0.5)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_degenerate_weight_rejects_bad_constants():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    with pytest.raises(ConstraintError):
        weights.build_degenerate_weight(p, mesh.FORM_DIV, 1.0, 0.0)
    with pytest.raises(ConstraintError):
        weights.build_degenerate_weight(p, mesh.FORM_DIV, -1.0, 0.2)
    p2 = coeff.make_prototype_profile(2.0, 0.5, 201,
                                      allow_exponent_override=True)
    with pytest.raises(ConstraintError):
        weights.build_degenerate_weight(p2, mesh.FORM_DIV, 1.0, 0.2)


def test_nondegenerate_a2_constant_coefficient():
    p = constant_profile()
    pair = coeff.NonDegeneratePair(
        g=lambda t: np.full_like(np.asarray(t, dtype=float), 1.0),
        h=lambda t: np.full_like(np.asarray(t, dtype=float), 1.0),
        g0=0.5, h0=1.0, form="nondivergence", interval=(0.6, 0.9))
    w = weights.build_nondegenerate_weight(p, pair,
                                           weights.VARIANT_NONDEG_A2,
                                           r=1.0, interval=(0.6, 0.9))
    # a' == 0 makes zeta == 0, so psi == e^0 - (1 + max e^0) == -1
    x = np.linspace(0.6, 0.9, 31)
    assert np.allclose(w.psi(x), -1.0)


def test_nondegenerate_a1_decreasing():
    p = constant_profile()
    pair = coeff.NonDegeneratePair(
        g=lambda t: 1.0 / np.sqrt(np.maximum(np.asarray(t, dtype=float)
                                             - 0.59, 1e-6)),
        h=lambda t: np.full_like(np.asarray(t, dtype=float), 1.0),
        g0=0.5, h0=1.0, form="divergence", interval=(0.6, 0.9))
    w = weights.build_nondegenerate_weight(p, pair,
                                           weights.VARIANT_NONDEG_A1,
                                           r=1.0, interval=(0.6, 0.9))
    x = np.linspace(0.6, 0.9, 31)
    psi = w.psi(x)
    assert np.all(np.diff(psi) < 0.0)
    assert np.all(psi < 0.0)


def test_carleman_report_finite_and_csv(tmp_path):
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    tgrid = mesh.TimeGrid(1.0, 120)
    w = weights.build_degenerate_weight(
        p, mesh.FORM_DIV, 1.0, 0.2,
        s_grid=weights.default_s_grid(0.5, 2.0, 8))
    rng = np.random.default_rng(3)
    vT = rng.standard_normal(g.n_nodes)
    vT[0] = vT[-1] = 0.0
    v = pde.solve_adjoint(pde.ProblemSpec(p, mesh.FORM_DIV, vT=vT),
                          g, tgrid)
    report = weights.carleman_ratio(v, w, p, g, tgrid)
    assert np.all(np.isfinite(report.ratio))
    assert report.verdict in ("bounded", "unbounded")
    report.to_csv(tmp_path / "ratio.csv")
    data = np.loadtxt(tmp_path / "ratio.csv", delimiter=",", skiprows=1)
    assert data.shape == (8, 4)


def test_hardy_certificate():
    p = coeff.make_prototype_profile(0.5, 0.5, 401)
    g = mesh.build_grid(200, p, grading=3.0)
    good = np.abs(g.nodes - 0.5) ** 2
    assert weights.hardy_weight_certificate(good, g).verdict == "pass"
    bad = np.abs(np.sin(6.0 * np.pi * (g.nodes - 0.5)))
    assert weights.hardy_weight_certificate(bad, g).verdict == "fail"


def test_hardy_constant_scale_invariance():
    p = coeff.make_prototype_profile(0.5, 0.5, 401)
    g = mesh.build_grid(200, p, grading=3.0)
    pw = np.abs(g.nodes - 0.5) ** 2
    c1 = weights.hardy_poincare_constant(pw, g)
    c2 = weights.hardy_poincare_constant(5.0 * pw, g)
    assert c1 == pytest.approx(c2, rel=1e-10)


def test_inverse_coefficient_constant_sd_rejected():
    p = coeff.make_prototype_profile(1.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    with pytest.raises(ConstraintError):
        weights.inverse_coefficient_constant(p, g)


def test_inverse_coefficient_constant_wd():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    c = weights.inverse_coefficient_constant(p, g)
    assert 0.0 < c < 10.0


def test_caccioppoli_geometry_errors():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    tgrid = mesh.TimeGrid(1.0, 80)
    w = weights.build_degenerate_weight(p, mesh.FORM_DIV, 1.0, 0.2)
    vT = np.sin(np.pi * g.nodes)
    v = pde.solve_adjoint(pde.ProblemSpec(p, mesh.FORM_DIV, vT=vT),
                          g, tgrid)
    with pytest.raises(ConfigError):
        # omega' not compactly contained in omega
        weights.caccioppoli_check(v, w, [(0.6, 0.9)], [(0.6, 0.9)])
    with pytest.raises(ConfigError):
        # x0 inside omega'
        weights.caccioppoli_check(v, w, [(0.4, 0.6)], [(0.3, 0.7)])
    report = weights.caccioppoli_check(v, w, [(0.65, 0.85)], [(0.6, 0.9)])
    assert np.all(np.isfinite(report.ratio))
