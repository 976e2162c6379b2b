"""Unit tests for grids, operators, and weighted inner products."""

import numpy as np
import pytest

from degenctrl import coeff, mesh


def test_grid_snaps_node_to_x0():
    p = coeff.make_prototype_profile(0.5, 0.37, 401)
    g = mesh.build_grid(100, p)
    assert g.x0_index is not None
    assert g.nodes[g.x0_index] == pytest.approx(0.37, abs=1e-12)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0


def test_graded_grid_clusters_at_x0():
    p = coeff.make_prototype_profile(0.5, 0.5, 401)
    uniform = mesh.build_grid(100, p)
    graded = mesh.build_grid(100, p, grading=3.0)
    i0 = graded.x0_index
    near = graded.nodes[i0 + 1] - graded.nodes[i0]
    assert near < 0.5 * np.max(uniform.h)


def test_subgrid():
    g = mesh.build_grid(101)
    sub, i, j = g.subgrid(0.2, 0.6)
    assert sub.nodes[0] == pytest.approx(g.nodes[i])
    assert sub.nodes[-1] == pytest.approx(g.nodes[j])
    assert np.allclose(sub.nodes, g.nodes[i:j + 1])


def test_weighted_norm_positive():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(101, p)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(g.n_nodes)
    for name in ("L2", "L2_inv_a", "H1_a"):
        norm = mesh.make_norm(name, g, p)
        assert mesh.norm_of(v, norm) > 0.0


def test_divergence_operator_symmetric_in_weight():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(64, p)
    op = mesh.assemble_operator(p, g, mesh.FORM_DIV)
    S = op.stiffness_dense()
    assert np.allclose(S, S.T)


def test_nondivergence_weighted_symmetry():
    p = coeff.make_prototype_profile(0.5, 0.5, 201)
    g = mesh.build_grid(64, p)
    op = mesh.assemble_operator(p, g, mesh.FORM_NONDIV)
    # the 1/a weight symmetrizes the stencil: W A = -S away from the
    # regularized x0 row
    A = op.to_dense()
    WA = np.diag(op.step_weight) @ A
    S = op.stiffness_dense()
    keep = np.ones(op.n_interior, dtype=bool)
    keep[g.x0_index - 1] = False
    assert np.allclose(WA[keep], -S[keep],
                       atol=1e-12 * np.max(np.abs(S)))


def test_sd_nondivergence_constrains_x0_row():
    p = coeff.make_prototype_profile(1.5, 0.5, 201)
    g = mesh.build_grid(64, p)
    op = mesh.assemble_operator(p, g, mesh.FORM_NONDIV)
    assert np.any(op.constrained)


def test_eigenvalues_nonpositive_small():
    p = coeff.make_prototype_profile(0.5, 0.5, 101)
    g = mesh.build_grid(32, p)
    for form in (mesh.FORM_DIV, mesh.FORM_NONDIV):
        op = mesh.assemble_operator(p, g, form)
        lam = mesh.operator_eigenvalues(op)
        assert np.max(lam) <= 1e-10


def test_sbp_defect_second_order_constant_coefficient():
    defects = []
    for n in (51, 101, 201):
        g = mesh.build_grid(n)
        xs = np.linspace(0.0, 1.0, n)
        p = coeff.CoefficientProfile(
            xs, np.ones(n), None, 0.0, coeff.KIND_ND,
            func=lambda x: np.ones_like(np.asarray(x, dtype=float)))
        op = mesh.assemble_operator(p, g, mesh.FORM_DIV)
        u = np.sin(np.pi * g.nodes)
        v = g.nodes * (1.0 - g.nodes)
        defects.append(mesh.summation_by_parts_defect(u, v, op))
    orders = np.log2(np.array(defects[:-1]) / np.array(defects[1:]))
    assert np.all(orders >= 1.8)


def test_time_grid():
    tg = mesh.TimeGrid(0.5, 100)
    assert tg.step == pytest.approx(0.005)
    assert len(tg.times) == 101
    assert tg.times[0] == 0.0 and tg.times[-1] == pytest.approx(0.5)


def test_operator_export_coo(tmp_path):
    p = coeff.make_prototype_profile(0.5, 0.5, 101)
    g = mesh.build_grid(32, p)
    op = mesh.assemble_operator(p, g, mesh.FORM_DIV)
    path = tmp_path / "op.coo"
    op.export_coo(path)
    A = np.zeros((op.n_interior, op.n_interior))
    with open(path) as f:
        for line in f:
            i, j, val = line.split()
            A[int(i), int(j)] = float(val)
    assert np.allclose(A, op.to_dense())
