"""Unit tests for the theta-scheme forward/adjoint solvers."""

import numpy as np
import pytest

from degenctrl import coeff, mesh, pde
from degenctrl.errors import ConfigError, GeometryError


def constant_profile(n=101):
    xs = np.linspace(0.0, 1.0, n)
    return coeff.CoefficientProfile(
        xs, np.ones(n), None, 0.0, coeff.KIND_ND,
        func=lambda x: np.ones_like(np.asarray(x, dtype=float)))


def test_heat_equation_accuracy():
    p = constant_profile()
    g = mesh.build_grid(101)
    tgrid = mesh.TimeGrid(0.1, 200)
    spec = pde.ProblemSpec(p, mesh.FORM_DIV, u0=np.sin(np.pi * g.nodes),
                           theta=0.5)
    u = pde.solve_forward(spec, g, tgrid)
    exact = np.exp(-np.pi ** 2 * 0.1) * np.sin(np.pi * g.nodes)
    assert np.linalg.norm(u.values[-1] - exact) <= 1e-2 * np.linalg.norm(exact)


def test_maximum_principle():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    tgrid = mesh.TimeGrid(0.5, 100)
    u0 = np.clip(np.sin(np.pi * g.nodes), 0.0, 1.0)
    spec = pde.ProblemSpec(p, mesh.FORM_DIV, u0=u0)
    u = pde.solve_forward(spec, g, tgrid)
    assert np.min(u.values) >= -1e-12
    assert np.max(u.values) <= 1.0 + 1e-12


def test_discrete_duality_exact():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(65, p)
    tgrid = mesh.TimeGrid(0.5, 64)
    rng = np.random.default_rng(1)
    u0 = rng.standard_normal(g.n_nodes)
    vT = rng.standard_normal(g.n_nodes)
    u0[0] = u0[-1] = vT[0] = vT[-1] = 0.0
    h = rng.standard_normal((tgrid.M + 1, g.n_nodes))
    h[:, 0] = h[:, -1] = 0.0
    spec_f = pde.ProblemSpec(p, mesh.FORM_DIV, omega=[(0.0, 1.0)],
                             u0=u0, h=h)
    spec_b = pde.ProblemSpec(p, mesh.FORM_DIV, vT=vT)
    u = pde.solve_forward(spec_f, g, tgrid)
    v = pde.solve_adjoint(spec_b, g, tgrid)
    w = g.hbar
    tau = tgrid.step
    lhs = float(np.sum(w * u.values[-1] * vT) - np.sum(w * u0 * v.values[0]))
    rhs = tau * float(np.sum(w[None, :] * h[1:] * v.values[:-1]))
    assert abs(lhs - rhs) <= 1e-12 * (abs(lhs) + abs(rhs) + 1.0)


def test_adjoint_closed_form_constant_coefficient():
    p = constant_profile()
    g = mesh.build_grid(101)
    tgrid = mesh.TimeGrid(0.1, 200)
    spec = pde.ProblemSpec(p, mesh.FORM_DIV, vT=np.sin(np.pi * g.nodes),
                           theta=0.5)
    v = pde.solve_adjoint(spec, g, tgrid)
    exact = np.exp(-np.pi ** 2 * 0.1) * np.sin(np.pi * g.nodes)
    assert np.linalg.norm(v.values[0] - exact) <= 1e-2 * np.linalg.norm(exact)


def test_energy_estimate_finite():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    tgrid = mesh.TimeGrid(0.5, 100)
    spec = pde.ProblemSpec(p, mesh.FORM_DIV, u0=np.sin(np.pi * g.nodes))
    u = pde.solve_forward(spec, g, tgrid)
    report = pde.energy_estimate_check(u, spec)
    assert np.isfinite(report.constant)
    assert report.lhs <= report.constant * report.rhs_budget * (1 + 1e-12)


def test_gradient_monotonicity():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    tgrid = mesh.TimeGrid(0.5, 100)
    rng = np.random.default_rng(7)
    vT = rng.standard_normal(g.n_nodes)
    vT[0] = vT[-1] = 0.0
    spec = pde.ProblemSpec(p, mesh.FORM_DIV, vT=vT)
    v = pde.solve_adjoint(spec, g, tgrid)
    assert pde.gradient_monotonicity_check(v, p).verdict == "pass"


def test_theta_validation():
    p = constant_profile()
    with pytest.raises(ConfigError):
        pde.ProblemSpec(p, mesh.FORM_DIV, theta=0.3)
    with pytest.raises(ConfigError):
        pde.ProblemSpec(p, mesh.FORM_DIV, theta=1.2)


def test_source_requires_omega():
    p = constant_profile()
    with pytest.raises(ConfigError):
        pde.ProblemSpec(p, mesh.FORM_DIV, h=lambda t, x: x)


def test_omega_normalization():
    assert pde.normalize_omega([(0.7, 0.9), (0.1, 0.3)]) == \
        ((0.1, 0.3), (0.7, 0.9))
    with pytest.raises(GeometryError):
        pde.normalize_omega([(0.1, 0.5), (0.4, 0.9)])
    with pytest.raises(GeometryError):
        pde.normalize_omega([(0.5, 0.3)])


def test_field_csv_and_binary_round_trip(tmp_path):
    p = constant_profile(21)
    g = mesh.build_grid(21)
    tgrid = mesh.TimeGrid(0.1, 10)
    spec = pde.ProblemSpec(p, mesh.FORM_DIV, u0=np.sin(np.pi * g.nodes))
    u = pde.solve_forward(spec, g, tgrid)
    u.to_binary(tmp_path / "u.bin")
    values = pde.Field.read_binary(tmp_path / "u.bin")
    assert np.array_equal(values, u.values)
    u.to_csv(tmp_path / "u.csv")
    data = np.loadtxt(tmp_path / "u.csv", delimiter=",", skiprows=1)
    assert np.allclose(data[:, 1:], u.values)


def test_advection_bound_check():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    spec = pde.ProblemSpec(
        p, mesh.FORM_DIV, u0=np.sin(np.pi * g.nodes),
        b=lambda t, x: 0.5 * np.sqrt(np.abs(x - 0.5)) * np.sign(x - 0.5))
    spec.check_advection_bound(g, np.linspace(0.0, 0.5, 5))
    bad = pde.ProblemSpec(p, mesh.FORM_DIV, u0=np.sin(np.pi * g.nodes),
                          b=lambda t, x: np.ones_like(x))
    with pytest.raises(GeometryError):
        bad.check_advection_bound(g, np.linspace(0.0, 0.5, 5))
