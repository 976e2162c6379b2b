"""Theta-scheme time stepping for the forward controlled problem and the
homogeneous adjoint problem (pure, complete-linear and advective variants),
plus discrete checks of the well-posedness energy estimates."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .coeff import Check, CoefficientProfile
from .errors import ConfigError, GeometryError, StepFailureError
from .mesh import (FORM_DIV, FORM_NONDIV, DiscreteOperator, SpaceGrid,
                   TimeGrid, assemble_operator, half_point_values)

BINARY_MAGIC = b"DGF1"


def normalize_omega(omega):
    """Validate a control region given as a union of <= 2 open
    subintervals of (0,1); returns a sorted tuple of (lo, hi) pairs."""
    if omega is None:
        return None
    pieces = [(float(lo), float(hi)) for lo, hi in omega]
    if not 1 <= len(pieces) <= 2:
        raise GeometryError("omega must be a union of 1 or 2 subintervals")
    pieces.sort()
    for lo, hi in pieces:
        if not (0.0 <= lo < hi <= 1.0):
            raise GeometryError("bad subinterval (%g,%g)" % (lo, hi))
    if len(pieces) == 2 and pieces[0][1] > pieces[1][0]:
        raise GeometryError("omega subintervals overlap")
    return tuple(pieces)


def omega_mask(grid: SpaceGrid, omega):
    """Boolean nodal indicator of the open control region."""
    x = grid.nodes
    mask = np.zeros(x.size, dtype=bool)
    if omega is None:
        return mask
    for lo, hi in omega:
        mask |= (x > lo) & (x < hi)
    return mask


def _eval_tx(f, t, x):
    """Evaluate a coefficient given as callable f(t, x), scalar, or None."""
    if f is None:
        return None
    if callable(f):
        return np.asarray(f(t, x), dtype=float) * np.ones_like(x)
    return float(f) * np.ones_like(x)


@dataclass
class ProblemSpec:
    """Data of one forward/adjoint solve.

    `c` and `b` are optional reaction/advection coefficients, callables
    (t, x) -> values (or scalars); `h` is an optional source supported in
    omega, same convention, or a precomputed (M+1, N+1) array.  Exactly the
    data used by the direction of the solve needs to be present (`u0`
    forward, `vT` adjoint)."""

    profile: CoefficientProfile
    form: str
    omega: Optional[Sequence] = None
    u0: Optional[np.ndarray] = None
    vT: Optional[np.ndarray] = None
    h: Optional[object] = None
    c: Optional[object] = None
    b: Optional[object] = None
    theta: float = 1.0
    b_bound: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.form not in (FORM_DIV, FORM_NONDIV):
            raise ConfigError("unknown form %r" % self.form)
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigError("theta=%g outside [1/2, 1]" % self.theta)
        self.omega = normalize_omega(self.omega)
        if self.h is not None and self.omega is None:
            raise ConfigError("a source h requires a control region omega")

    def check_advection_bound(self, grid: SpaceGrid, times):
        """Verify |b(t,x)| <= C sqrt(a(x)) at every node and record the
        smallest such C; at the degeneracy node b must vanish."""
        if self.b is None:
            self.b_bound = 0.0
            return 0.0
        x = grid.nodes
        sqa = np.sqrt(self.profile(x))
        worst = 0.0
        for t in times:
            bv = np.abs(_eval_tx(self.b, t, x))
            at0 = sqa == 0.0
            if np.any(bv[at0] > 1e-14):
                raise GeometryError(
                    "advection b does not vanish at the degeneracy point"
                )
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(at0, 0.0, bv / np.where(at0, 1.0, sqa))
            worst = max(worst, float(np.max(ratio)))
        self.b_bound = worst
        return worst


@dataclass
class Field:
    """Space-time field on a tensor grid: values[k, i] = value at time
    t_k, node x_i.  Boundary columns are identically zero (Dirichlet)."""

    values: np.ndarray
    form: str
    grid: SpaceGrid
    tgrid: TimeGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.tgrid.M + 1, self.grid.n_nodes):
            raise ConfigError("field shape %s does not match grids" % (v.shape,))
        if np.max(np.abs(v[:, 0])) > 0 or np.max(np.abs(v[:, -1])) > 0:
            raise ConfigError("boundary columns must be exactly zero")
        self.values = v

    def at_time(self, k):
        return self.values[k]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + ["x=%r" % float(x) for x in self.grid.nodes])
            for t, row in zip(self.tgrid.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(u)) for u in row])

    def to_binary(self, path):
        with open(path, "wb") as f:
            f.write(BINARY_MAGIC)
            f.write(struct.pack("<qq", *self.values.shape))
            f.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @staticmethod
    def read_binary(path):
        """Read back a binary dump; returns the raw (M+1, N+1) array."""
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != BINARY_MAGIC:
                raise ConfigError("bad magic %r in %s" % (magic, path))
            rows, cols = struct.unpack("<qq", f.read(16))
            data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8")
        return data.reshape(rows, cols).copy()


def _source_at(spec: ProblemSpec, k, t, x, mask_int):
    """Nodal source at time level k restricted to omega (interior nodes)."""
    if spec.h is None:
        return None
    if isinstance(spec.h, np.ndarray):
        hv = spec.h[k, 1:-1].astype(float).copy()
    else:
        hv = _eval_tx(spec.h, t, x[1:-1]).copy()
    hv[~mask_int] = 0.0
    return hv


def _tridiag_parts(spec: ProblemSpec, op: DiscreteOperator, t, x):
    """Assemble (sub, diag, sup) of the weighted spatial matrix
    S + W·C(t) + W·D_b(t) acting on interior unknowns, where -S u is the
    weighted operator action, C the reaction and D_b the centered
    advection derivative."""
    n = op.n_interior
    diag = op.stiff_diag.copy()
    sub = np.zeros(n)
    sup = np.zeros(n)
    sub[1:] = op.stiff_off
    sup[:-1] = op.stiff_off
    xi = x[1:-1]
    w = op.step_weight
    cv = _eval_tx(spec.c, t, xi)
    if cv is not None:
        diag += w * cv
    bv = _eval_tx(spec.b, t, xi)
    if bv is not None:
        gap = x[2:] - x[:-2]
        sup[:-1] += (w * bv / gap)[:-1]
        sub[1:] -= (w * bv / gap)[1:]
    return sub, diag, sup


def _apply_tridiag(sub, diag, sup, u):
    out = diag * u
    out[:-1] += sup[:-1] * u[1:]
    out[1:] += sub[1:] * u[:-1]
    return out


def _theta_march(spec: ProblemSpec, op: DiscreteOperator, tgrid: TimeGrid,
                 start, source_fn):
    """March the theta scheme W u' = -(S + WC + WD) u + W h from `start`;
    `source_fn(k)` returns the interior source at level k (or None).
    Returns the (M+1, n_interior) history."""
    tau = tgrid.step
    th = spec.theta
    times = tgrid.times
    n = op.n_interior
    w = op.step_weight
    con = op.constrained
    hist = np.empty((tgrid.M + 1, n))
    u = np.asarray(start, dtype=float).copy()
    u[con] = 0.0
    hist[0] = u
    x = op.grid.nodes
    sub1, diag1, sup1 = _tridiag_parts(spec, op, times[0], x)
    hprev = source_fn(0)
    for k in range(tgrid.M):
        sub0, diag0, sup0 = sub1, diag1, sup1
        sub1, diag1, sup1 = _tridiag_parts(spec, op, times[k + 1], x)
        rhs = w * u - (1.0 - th) * tau * _apply_tridiag(sub0, diag0, sup0, u)
        hcur = source_fn(k + 1)
        if hcur is not None or hprev is not None:
            hmix = np.zeros(n)
            if hcur is not None:
                hmix += th * hcur
            if hprev is not None:
                hmix += (1.0 - th) * hprev
            rhs += tau * w * hmix
        hprev = hcur

        bsub = th * tau * sub1
        bdiag = w + th * tau * diag1
        bsup = th * tau * sup1
        if np.any(con):
            bdiag[con] = 1.0
            bsup[con] = 0.0
            bsub[con] = 0.0
            rhs[con] = 0.0
        ab = np.zeros((3, n))
        ab[0, 1:] = bsup[:-1]
        ab[1] = bdiag
        ab[2, :-1] = bsub[1:]
        try:
            u = scipy.linalg.solve_banded((1, 1), ab, rhs)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise StepFailureError(
                "banded solve failed at time step %d: %s" % (k + 1, exc), k + 1
            )
        if not np.all(np.isfinite(u)):
            raise StepFailureError(
                "non-finite iterate at time step %d" % (k + 1), k + 1
            )
        hist[k + 1] = u
    return hist


def _embed(hist, grid):
    out = np.zeros((hist.shape[0], grid.n_nodes))
    out[:, 1:-1] = hist
    return out


def solve_forward(spec: ProblemSpec, grid: SpaceGrid, tgrid: TimeGrid,
                  op: Optional[DiscreteOperator] = None) -> Field:
    """Implicit theta-scheme solve of u_t = Au - c u - b u_x + h chi_omega
    with Dirichlet boundary, from the initial datum spec.u0."""
    if spec.u0 is None:
        raise ConfigError("forward solve needs an initial datum u0")
    if op is None:
        op = assemble_operator(spec.profile, grid, spec.form)
    spec.check_advection_bound(grid, tgrid.times[:: max(1, tgrid.M // 8)])
    u0 = np.asarray(spec.u0, dtype=float)
    if u0.shape != (grid.n_nodes,):
        raise ConfigError("u0 must be a full nodal vector")
    mask_int = omega_mask(grid, spec.omega)[1:-1]
    x = grid.nodes

    def source_fn(k):
        return _source_at(spec, k, tgrid.times[k], x, mask_int)

    hist = _theta_march(spec, op, tgrid, u0[1:-1], source_fn)
    return Field(_embed(hist, grid), spec.form, grid, tgrid)


def solve_adjoint(spec: ProblemSpec, grid: SpaceGrid, tgrid: TimeGrid,
                  op: Optional[DiscreteOperator] = None) -> Field:
    """Backward solve of the homogeneous adjoint v_t + Av - c v = 0 from
    the final datum spec.vT, via time reversal.  The spatial operator is
    self-adjoint in its weighted inner product, so the reversed problem is
    a forward solve with the same operator."""
    if spec.vT is None:
        raise ConfigError("adjoint solve needs a final datum vT")
    if op is None:
        op = assemble_operator(spec.profile, grid, spec.form)
    vT = np.asarray(spec.vT, dtype=float)
    if vT.shape != (grid.n_nodes,):
        raise ConfigError("vT must be a full nodal vector")
    T = tgrid.T
    rev = ProblemSpec(
        spec.profile, spec.form, omega=None, u0=None, vT=None, h=None,
        c=(None if spec.c is None else (lambda t, x: _eval_tx(spec.c, T - t, x))),
        b=None, theta=spec.theta,
    )

    hist = _theta_march(rev, op, tgrid, vT[1:-1], lambda k: None)
    return Field(_embed(hist[::-1], grid), spec.form, grid, tgrid)


@dataclass
class EnergyReport:
    """Two sides of the discrete energy estimate
    sup_t ||u||_w^2 + int_0^T |u|_grad^2 dt <= C (||u0||_w^2 + ||h||_w^2)."""

    sup_norm_sq: float
    grad_integral: float
    rhs_budget: float
    constant: float

    @property
    def lhs(self):
        return self.sup_norm_sq + self.grad_integral


def _state_weights(u: Field, profile: CoefficientProfile):
    """Nodal weight of the natural state norm and per-cell gradient weight
    of the associated space-integrated seminorm."""
    g = u.grid
    if u.form == FORM_DIV:
        node_w = g.hbar.copy()
        grad_w = half_point_values(profile, g) * g.h
    else:
        a = profile(g.nodes)
        with np.errstate(divide="ignore"):
            inva = np.where(a > 0, 1.0 / np.where(a > 0, a, 1.0), 0.0)
        node_w = g.hbar * inva
        grad_w = g.h.copy()
    return node_w, grad_w


def energy_estimate_check(u: Field, spec: ProblemSpec) -> EnergyReport:
    """Evaluate both sides of the well-posedness energy estimate with the
    discrete norms natural to the form (L2 + a-weighted gradient for the
    divergence form, 1/a-weighted L2 + plain gradient otherwise) and
    report the empirical constant; NaN signals the 0/0 case."""
    node_w, grad_w = _state_weights(u, spec.profile)
    vals = u.values
    norms = (vals * vals) @ node_w
    dv = np.diff(vals, axis=1)
    grads = (dv * dv / u.grid.h) @ (grad_w / u.grid.h)
    tau = u.tgrid.step
    sup_sq = float(np.max(norms))
    grad_int = float(np.trapezoid(grads, dx=tau))

    rhs = float(norms[0])
    if spec.h is not None:
        x = u.grid.nodes
        mask_int = omega_mask(u.grid, spec.omega)[1:-1]
        hsq = np.zeros(u.tgrid.M + 1)
        for k, t in enumerate(u.tgrid.times):
            hv = _source_at(spec, k, t, x, mask_int)
            hsq[k] = (hv * hv) @ node_w[1:-1]
        rhs += float(np.trapezoid(hsq, dx=tau))
    lhs = sup_sq + grad_int
    if rhs > 0:
        const = lhs / rhs
    else:
        const = float("nan") if lhs == 0.0 else float("inf")
    return EnergyReport(sup_sq, grad_int, rhs, const)


def gradient_monotonicity_check(v: Field, p: CoefficientProfile) -> Check:
    """Verify that E(t) = sum a_{i+1/2} ((v_{i+1}-v_i)/dx)^2 dx is
    nondecreasing in time for a homogeneous adjoint solution, up to
    tolerance 1e-8 E(T); returns the worst monotonicity defect."""
    g = v.grid
    a_half = half_point_values(p, g)
    dv = np.diff(v.values, axis=1)
    E = (dv * dv / g.h) @ a_half
    tol = 1e-8 * max(E[-1], 1e-300)
    drops = E[:-1] - E[1:]
    worst = float(np.max(drops)) if drops.size else 0.0
    if worst <= tol:
        return Check("pass", worst)
    k = int(np.argmax(drops))
    return Check("fail", worst, float(v.tgrid.times[k]))
