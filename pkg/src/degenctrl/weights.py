"""Carleman weight families (degenerate divergence / non-divergence,
non-degenerate smooth and non-smooth), the constraints on their constants,
and numerical evaluation of the Carleman, Hardy-Poincare and Caccioppoli
inequalities on discrete adjoint solutions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .coeff import (KIND_SD, Check, CoefficientProfile, NonDegeneratePair,
                    estimate_singularity_exponent)
from .errors import ConfigError, ConstraintError, GeometryError
from .mesh import (FORM_DIV, FORM_NONDIV, SpaceGrid, TimeGrid,
                   _centered_gradient, half_point_values)
from .pde import Field, normalize_omega, omega_mask

VARIANT_DEG_DIV = "DegDiv"
VARIANT_DEG_NONDIV = "DegNonDiv"
VARIANT_NONDEG_A1 = "NonDegA1"
VARIANT_NONDEG_A2 = "NonDegA2"

THETA_EXPONENT = 4
EXP_CLAMP = -700.0


def eval_theta(t, T):
    """The time weight Theta(t) = 1/[t(T-t)]^4 on (0,T)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t >= T):
        raise ValueError("t must lie strictly inside (0, %g)" % T)
    out = (t * (T - t)) ** (-THETA_EXPONENT)
    return float(out) if out.ndim == 0 else out


def clamped_theta_weight(t, T, s, psi_value):
    """Theta(t) * e^{2 s phi} with phi = Theta psi, computed in log space;
    returns 0 when the exponent underflows past the clamp."""
    th = eval_theta(t, T)
    expo = np.log(th) + 2.0 * s * th * np.asarray(psi_value, dtype=float)
    out = np.where(expo < EXP_CLAMP, 0.0, np.exp(np.maximum(expo, EXP_CLAMP)))
    return float(out) if out.ndim == 0 else out


def default_s_grid(lo=0.05, hi=2.0, n=16):
    """16 logarithmically spaced Carleman parameters (ratios vary smoothly
    in s, so a coarse log grid resolves the curve)."""
    if not (0 < lo < hi):
        raise ConstraintError("need 0 < lo < hi for the s-grid")
    return np.geomspace(lo, hi, n)


@dataclass(frozen=True)
class CarlemanWeight:
    """One weight family phi(t,x) = Theta(t) psi(x).

    `psi_fn` evaluates psi at arbitrary abscissas in `interval`; `dpsi_fn`
    its derivative where defined.  `constants` holds the variant's
    constants ((c1,c2) / (d1,d2,R) / (r,frakc,g,h,h0) / (r,frakd,frakc));
    `aux` variant-specific callables (G for NonDegA1, zeta for NonDegA2)."""

    variant: str
    profile: CoefficientProfile
    interval: tuple
    constants: dict
    s_grid: np.ndarray
    psi_fn: Callable = field(repr=False, default=None)
    dpsi_fn: Optional[Callable] = field(repr=False, default=None)
    aux: dict = field(repr=False, default_factory=dict)
    theta_exponent: int = THETA_EXPONENT

    def psi(self, x):
        return np.asarray(self.psi_fn(np.asarray(x, dtype=float)), dtype=float)

    def phi(self, t, x, T):
        return eval_theta(t, T) * self.psi(x)


def _cumulative_from(integrand, x0, targets, n_sub=24, grade=3):
    """Cumulative integral I(x) = int_{x0}^x integrand(y) dy at sorted
    `targets` (one of which equals x0), by composite midpoint quadrature
    with a power-graded substitution on the two segments touching x0 (the
    integrand may have an integrable singularity there)."""
    targets = np.asarray(targets, dtype=float)
    vals = np.zeros(targets.size)
    i0 = int(np.argmin(np.abs(targets - x0)))
    if targets[i0] != x0:
        raise ConstraintError("x0 must be one of the quadrature targets")

    def seg(a, b):
        # integral over [a, b] (a < b allowed in either order handled out)
        if a == b:
            return 0.0
        if a == x0 or b == x0:
            # substitution y = endpoint +- w^grade, clustered at x0
            w_hi = abs(b - a) ** (1.0 / grade)
            w = (np.arange(n_sub) + 0.5) / n_sub * w_hi
            dy = grade * w ** (grade - 1) * (w_hi / n_sub)
            if a == x0:
                y = a + w ** grade
            else:
                y = b - w ** grade
            return float(np.sum(integrand(y) * dy))
        y = a + (np.arange(n_sub) + 0.5) / n_sub * (b - a)
        return float(np.sum(integrand(y)) * (b - a) / n_sub)

    acc = 0.0
    for i in range(i0 + 1, targets.size):
        acc += seg(targets[i - 1], targets[i])
        vals[i] = acc
    acc = 0.0
    for i in range(i0 - 1, -1, -1):
        acc -= seg(targets[i], targets[i + 1])
        vals[i] = acc
    return vals


def build_degenerate_weight(p: CoefficientProfile, form, c1_or_d1, margin,
                            R=1.0, s_grid=None):
    """DegDiv / DegNonDiv weight psi = c1 [ int_{x0}^x (y-x0)/a dy - c2 ]
    (the integrand gains a factor e^{R(y-x0)^2} in non-divergence form);
    c2 (resp. d2) is set to (1+margin) times the smallest admissible value
    and the invariants -c1 c2 <= psi < 0 are verified on the samples."""
    if not p.degenerate:
        raise ConstraintError("degenerate weight needs a degenerate profile")
    if c1_or_d1 <= 0:
        raise ConstraintError("c1 (resp. d1) must be positive")
    if margin <= 0:
        raise ConstraintError(
            "margin must be strictly positive: c2 at the required maximum "
            "does not guarantee psi < 0"
        )
    if p.K >= 2.0:
        raise ConstraintError("weight requires K < 2")
    x0 = p.x0
    a0 = float(p(0.0))
    a1 = float(p(1.0))
    if a0 <= 0 or a1 <= 0:
        raise ConstraintError("a must be positive at the boundary")
    if form == FORM_DIV:
        variant = VARIANT_DEG_DIV
        req = max((1.0 - x0) ** 2 / (a1 * (2.0 - p.K)),
                  x0 ** 2 / (a0 * (2.0 - p.K)))

        def integrand(y):
            return (y - x0) / p(y)
    elif form == FORM_NONDIV:
        variant = VARIANT_DEG_NONDIV
        req = max((1.0 - x0) ** 2 * math.exp(R * (1.0 - x0) ** 2)
                  / (a1 * (2.0 - p.K)),
                  x0 ** 2 * math.exp(R * x0 ** 2) / (a0 * (2.0 - p.K)))

        def integrand(y):
            return (y - x0) / p(y) * np.exp(R * (y - x0) ** 2)
    else:
        raise ConfigError("unknown form %r" % form)
    c2 = (1.0 + margin) * req
    c1 = float(c1_or_d1)

    nodes = np.unique(np.concatenate([np.linspace(0.0, 1.0, 801), [x0]]))
    ivals = _cumulative_from(integrand, x0, nodes)

    def psi_fn(x):
        return c1 * (np.interp(x, nodes, ivals) - c2)

    def dpsi_fn(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return c1 * integrand(x)

    psi_samples = psi_fn(nodes)
    if np.any(psi_samples >= 0):
        raise ConstraintError(
            "psi >= 0 at x=%g; increase margin/c2" % nodes[np.argmax(psi_samples)]
        )
    if np.any(psi_samples < -c1 * c2 * (1.0 + 1e-12)):
        raise ConstraintError("psi dips below -c1*c2")
    key = ("c1", "c2") if variant == VARIANT_DEG_DIV else ("d1", "d2")
    constants = {key[0]: c1, key[1]: c2, "required_" + key[1]: req}
    if variant == VARIANT_DEG_NONDIV:
        constants["R"] = R
    return CarlemanWeight(
        variant, p, (0.0, 1.0), constants,
        default_s_grid() if s_grid is None else np.asarray(s_grid, float),
        psi_fn, dpsi_fn,
    )


def build_nondegenerate_weight(p: CoefficientProfile, pair, variant, r,
                               interval, frakc=1.0, s_grid=None, n_fine=2001):
    """Non-degenerate weight on `interval` = (A,B) where a >= a0 > 0:
    NonDegA1 uses the pair (g, h, h0) through a double integral; NonDegA2
    uses zeta(x) = frakd int_x^B 1/a with frakd = ||a'||_inf and
    frakc = 1 + max e^{r zeta} so that max psi < 0."""
    if r <= 0:
        raise ConstraintError("Carleman weight parameter r must be positive")
    A, B = float(interval[0]), float(interval[1])
    if not A < B:
        raise GeometryError("empty interval (%g,%g)" % (A, B))
    z = np.linspace(A, B, n_fine)
    av = p(z)
    if np.any(av <= 0):
        raise GeometryError(
            "a degenerates inside (%g,%g): non-degenerate weight undefined"
            % (A, B)
        )
    hq = (B - A) / (n_fine - 1)
    mids = 0.5 * (z[:-1] + z[1:])
    amid = p(mids)

    if variant == VARIANT_NONDEG_A1:
        if pair is None:
            raise ConfigError("NonDegA1 needs a NonDegeneratePair")
        if frakc <= 0:
            raise ConstraintError("frakc must be positive")
        gm = np.asarray(pair.g(mids), dtype=float)
        # G(x) = int_x^B g + h0 at the fine nodes, right-to-left cumsum
        G = np.concatenate(([0.0], np.cumsum((gm * hq)[::-1])))[::-1] + pair.h0
        integ = G / np.sqrt(av)
        inner = np.concatenate(
            ([0.0], np.cumsum(0.5 * (integ[:-1] + integ[1:]) * hq))
        )
        psi_vals = -r * inner - frakc

        def psi_fn(x):
            return np.interp(x, z, psi_vals)

        def dpsi_fn(x):
            return -r * np.interp(x, z, integ)

        def G_fn(x):
            return np.interp(x, z, G)

        constants = {"r": r, "frakc": frakc, "g0": pair.g0, "h0": pair.h0}
        aux = {"G": G_fn, "pair": pair}
    elif variant == VARIANT_NONDEG_A2:
        if p.dfunc is not None:
            frakd = float(np.max(np.abs(p.derivative(z))))
        else:
            sx, sa = p.samples_x, p.samples_a
            keep = (sx >= A) & (sx <= B)
            dq = np.abs(np.diff(sa[keep]) / np.diff(sx[keep]))
            frakd = float(np.max(dq)) if dq.size else 0.0
        invmid = 1.0 / amid
        tail = np.concatenate(([0.0], np.cumsum((invmid * hq)[::-1])))[::-1]
        zeta_vals = frakd * tail
        frakc_eff = 1.0 + float(np.max(np.exp(r * zeta_vals)))
        psi_vals = np.exp(r * zeta_vals) - frakc_eff

        def psi_fn(x):
            return np.exp(r * np.interp(x, z, zeta_vals)) - frakc_eff

        def dpsi_fn(x):
            x = np.asarray(x, dtype=float)
            zt = np.interp(x, z, zeta_vals)
            return np.exp(r * zt) * r * (-frakd / p(x))

        def zeta_fn(x):
            return np.interp(x, z, zeta_vals)

        constants = {"r": r, "frakd": frakd, "frakc": frakc_eff}
        aux = {"zeta": zeta_fn}
    else:
        raise ConfigError("unknown non-degenerate variant %r" % variant)

    if np.max(psi_vals) >= 0:
        raise ConstraintError("non-degenerate psi is not negative")
    return CarlemanWeight(
        variant, p, (A, B), constants,
        default_s_grid() if s_grid is None else np.asarray(s_grid, float),
        psi_fn, dpsi_fn, aux,
    )


@dataclass
class InequalityReport:
    """Both sides of one weighted inequality over the s-grid, their ratio,
    the stabilization point s0 and the sup ratio for s >= s0."""

    variant: str
    s_grid: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    s0: float
    sup_ratio: float
    verdict: str
    boundary: dict = field(default_factory=dict)

    @property
    def ratio(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.rhs > 0, self.lhs / np.where(self.rhs > 0,
                                                           self.rhs, 1.0),
                         np.where(self.lhs > 0, np.inf, 0.0))
        return r

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["s", "lhs", "rhs", "ratio"])
            for s, l, r, q in zip(self.s_grid, self.lhs, self.rhs, self.ratio):
                w.writerow([repr(float(s)), repr(float(l)), repr(float(r)),
                            repr(float(q))])

    def summary(self):
        return {"variant": self.variant, "s0": float(self.s0),
                "sup_ratio": float(self.sup_ratio), "verdict": self.verdict}

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def _stabilization(s_grid, ratios, rel=0.05):
    """Smallest s where the ratio curve varies < `rel` between consecutive
    s-grid points; falls back to the last grid point."""
    for i in range(1, len(s_grid)):
        base = max(abs(ratios[i - 1]), 1e-300)
        if np.isfinite(ratios[i]) and abs(ratios[i] - ratios[i - 1]) < rel * base:
            return float(s_grid[i])
    return float(s_grid[-1])


def _finalize_report(variant, s_grid, lhs, rhs, boundary=None):
    lhs = np.asarray(lhs)
    rhs = np.asarray(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0),
                          np.where(lhs > 0, np.inf, 0.0))
    s0 = _stabilization(s_grid, ratios)
    tail = ratios[s_grid >= s0]
    sup_ratio = float(np.max(tail)) if tail.size else 0.0
    verdict = "bounded" if np.isfinite(sup_ratio) else "unbounded"
    return InequalityReport(variant, np.asarray(s_grid, float), lhs, rhs,
                            s0, sup_ratio, verdict, boundary or {})


def _exp_weight(s, theta, psi, shift):
    """e^{2 s Theta psi - shift} over the (time, space) grid, clamped."""
    expo = 2.0 * s * np.outer(theta, psi) - shift
    return np.where(expo < EXP_CLAMP, 0.0, np.exp(np.maximum(expo, EXP_CLAMP)))


def carleman_ratio(v: Field, w: CarlemanWeight, p: CoefficientProfile,
                   grid: SpaceGrid, tgrid: TimeGrid) -> InequalityReport:
    """Evaluate LHS and boundary RHS of the Carleman inequality matching
    the weight variant, for each s on the weight's grid, on a homogeneous
    adjoint solution v (so the source term of the RHS vanishes).

    Quadrature excludes the first and last time levels, where Theta is
    singular but the full weight vanishes below clamp level; exponentials
    are evaluated in shifted log space so the ratio survives underflow."""
    if v.grid is not grid and not np.array_equal(v.grid.nodes, grid.nodes):
        raise ConfigError("field and grid disagree")
    deg = w.variant in (VARIANT_DEG_DIV, VARIANT_DEG_NONDIV)
    if deg:
        want = FORM_DIV if w.variant == VARIANT_DEG_DIV else FORM_NONDIV
        if v.form != want:
            raise ConfigError(
                "weight variant %s needs a %s-form field" % (w.variant, want)
            )
    A, B = w.interval
    x = grid.nodes
    inside = (x >= A - 1e-12) & (x <= B + 1e-12)
    if not np.any(inside):
        raise ConfigError("weight interval does not meet the grid")
    xs = x[inside]
    sub = SpaceGrid(xs, None)
    hbar = sub.hbar
    T = tgrid.T
    tau = tgrid.step
    kk = np.arange(1, tgrid.M)  # interior time levels
    times = tgrid.times[kk]
    theta = eval_theta(times, T)
    psi = w.psi(xs)

    vals = v.values[:, inside][kk]
    grads = np.apply_along_axis(_centered_gradient, 1, v.values[kk], x)[:, inside]

    av = p(xs)
    x0 = p.x0 if p.degenerate else None

    reports_lhs, reports_rhs = [], []
    bdry = {"left": [], "right": []}
    for s in w.s_grid:
        shift = float(np.max(2.0 * s * np.outer(theta, psi)))
        ew = _exp_weight(s, theta, psi, shift)
        th1 = theta[:, None]
        th3 = (theta ** 3)[:, None]
        if w.variant == VARIANT_DEG_DIV:
            with np.errstate(divide="ignore", invalid="ignore"):
                sing = np.where(av > 0, (xs - x0) ** 2 / np.where(av > 0, av, 1.0), 0.0)
            dens = s * th1 * av[None, :] * grads ** 2 \
                + s ** 3 * th3 * sing[None, :] * vals ** 2
            lhs = float(np.sum((dens * ew) @ hbar) * tau)
            bl = s * w.constants["c1"] * tau * float(
                np.sum(theta * ew[:, 0] * av[0] * (xs[0] - x0) * grads[:, 0] ** 2))
            br = s * w.constants["c1"] * tau * float(
                np.sum(theta * ew[:, -1] * av[-1] * (xs[-1] - x0) * grads[:, -1] ** 2))
            rhs = br - bl
        elif w.variant == VARIANT_DEG_NONDIV:
            with np.errstate(divide="ignore", invalid="ignore"):
                sing = np.where(av > 0, ((xs - x0) / np.where(av > 0, av, 1.0)) ** 2, 0.0)
            hb = hbar.copy()
            if p.kind == KIND_SD:
                hb[np.argmin(np.abs(xs - x0))] = 0.0
            dens = s * th1 * grads ** 2 + s ** 3 * th3 * sing[None, :] * vals ** 2
            lhs = float(np.sum((dens * ew) @ hb) * tau)
            bl = s * w.constants["d1"] * tau * float(
                np.sum(theta * ew[:, 0] * (xs[0] - x0) * grads[:, 0] ** 2))
            br = s * w.constants["d1"] * tau * float(
                np.sum(theta * ew[:, -1] * (xs[-1] - x0) * grads[:, -1] ** 2))
            rhs = br - bl
        elif w.variant == VARIANT_NONDEG_A1:
            dens = s * th1 * grads ** 2 + s ** 3 * th3 * vals ** 2
            lhs = float(np.sum((dens * ew) @ hbar) * tau)
            G = w.aux["G"]
            r = w.constants["r"]
            bl = s * r * tau * float(np.sum(
                theta * ew[:, 0] * av[0] ** 1.5 * G(xs[0]) * grads[:, 0] ** 2))
            br = s * r * tau * float(np.sum(
                theta * ew[:, -1] * av[-1] ** 1.5 * G(xs[-1]) * grads[:, -1] ** 2))
            rhs = -(br - bl)
        elif w.variant == VARIANT_NONDEG_A2:
            zeta = w.aux["zeta"](xs)
            r = w.constants["r"]
            dens = s * th1 * np.exp(r * zeta)[None, :] * grads ** 2 \
                + s ** 3 * th3 * np.exp(3 * r * zeta)[None, :] * vals ** 2
            lhs = float(np.sum((dens * ew) @ hbar) * tau)
            bl = s * r * tau * float(np.sum(
                theta * ew[:, 0] * av[0] * math.exp(r * zeta[0]) * grads[:, 0] ** 2))
            br = s * r * tau * float(np.sum(
                theta * ew[:, -1] * av[-1] * math.exp(r * zeta[-1]) * grads[:, -1] ** 2))
            rhs = -(br - bl)
        else:
            raise ConfigError("unknown weight variant %r" % w.variant)
        reports_lhs.append(lhs)
        reports_rhs.append(rhs)
        bdry["left"].append(bl)
        bdry["right"].append(br)

    rep = _finalize_report(w.variant, w.s_grid, reports_lhs, reports_rhs,
                           {k: np.asarray(vv) for k, vv in bdry.items()})
    if deg and (np.any(rep.lhs < 0) or np.any(rep.rhs < -1e-300)):
        raise ConfigError("degenerate-weight report lost positivity")
    return rep


def _segment_quadrature(f, a, b, x0, n_sub=32, grade=3):
    """Integral of f over [a,b] by midpoint quadrature; if one endpoint is
    x0 a power-graded substitution absorbs the integrable singularity."""
    if a == b:
        return 0.0
    if x0 is not None and (a == x0 or b == x0):
        w_hi = (b - a) ** (1.0 / grade)
        wpts = (np.arange(n_sub) + 0.5) / n_sub * w_hi
        dy = grade * wpts ** (grade - 1) * (w_hi / n_sub)
        y = a + wpts ** grade if a == x0 else b - wpts ** grade
        return float(np.sum(f(y) * dy))
    y = a + (np.arange(n_sub) + 0.5) / n_sub * (b - a)
    return float(np.sum(f(y)) * (b - a) / n_sub)


def _dual_cell_mass(f, grid: SpaceGrid, x0, n_sub=32):
    """Per-node integrals of f over the dual cells of the interior nodes,
    with graded quadrature on the segments touching x0."""
    x = grid.nodes
    m = np.zeros(grid.n_nodes)
    for i in range(1, grid.n_nodes - 1):
        lo = 0.5 * (x[i - 1] + x[i])
        hi = 0.5 * (x[i] + x[i + 1])
        for a_, b_ in ((lo, x[i]), (x[i], hi)):
            m[i] += _segment_quadrature(f, a_, b_, x0, n_sub)
    return m


def hardy_weight_certificate(p_weight, grid: SpaceGrid) -> Check:
    """Hypothesis check for a Hardy-Poincare weight: p >= 0, p(x0) = 0,
    and the quotient p/|x-x0|^kappa monotone on each side of x0 for the
    measured exponent kappa."""
    p_weight = np.asarray(p_weight, dtype=float)
    if grid.x0_index is None:
        return Check("not-applicable")
    x = grid.nodes
    i0 = grid.x0_index
    x0 = x[i0]
    if np.any(p_weight < 0):
        j = int(np.argmin(p_weight))
        return Check("fail", float(p_weight[j]), float(x[j]))
    if p_weight[i0] > 1e-12 * (1.0 + np.max(p_weight)):
        return Check("fail", float(p_weight[i0]), x0)
    kappa = estimate_singularity_exponent(
        lambda z: np.interp(z, x, p_weight), x0, 4.0 * float(np.min(np.diff(x)))
    )
    y = np.abs(np.delete(x, i0) - x0)
    q = np.delete(p_weight, i0) / y ** kappa
    left = np.delete(x, i0) < x0
    tol = 1e-6 * max(float(np.max(q)), 1e-300)
    bad = 0.0
    where = None
    dl = np.diff(q[left])
    if dl.size and np.max(dl) > tol:
        bad = float(np.max(dl))
        where = float(np.delete(x, i0)[left][np.argmax(dl)])
    dr = np.diff(q[~left])
    if dr.size and -np.min(dr) > max(bad, tol):
        bad = float(-np.min(dr))
        where = float(np.delete(x, i0)[~left][np.argmin(dr)])
    if bad > tol:
        return Check("fail", bad, where)
    return Check("pass", bad)


def hardy_forms(p_weight, grid: SpaceGrid, n_sub=32):
    """Discrete quadratic forms of the Hardy-Poincare inequality: returns
    (M, S) over the interior nodes with w^T M w = int p/(x-x0)^2 w^2 and
    w^T S w = int p (w')^2.  The singular mass uses graded dual-cell
    quadrature near x0."""
    p_weight = np.asarray(p_weight, dtype=float)
    if grid.x0_index is None:
        raise ConfigError("Hardy-Poincare forms need a grid with x0")
    x = grid.nodes
    x0 = x[grid.x0_index]
    pfun = lambda z: np.interp(z, x, p_weight)
    mass = _dual_cell_mass(lambda z: pfun(z) / (z - x0) ** 2, grid, x0, n_sub)
    p_half = pfun(grid.half_points)
    c = p_half / grid.h
    S = np.diag(c[:-1] + c[1:])
    S += np.diag(-c[1:-1], 1) + np.diag(-c[1:-1], -1)
    return np.diag(mass[1:-1]), S


def hardy_poincare_constant(p_weight, grid: SpaceGrid, n_sub=32) -> float:
    """Smallest constant in int p/(x-x0)^2 w^2 <= C_HP int p (w')^2 over
    node functions vanishing at 0 and 1: the largest eigenvalue of the
    generalized problem (singular mass, p-weighted stiffness)."""
    M, S = hardy_forms(p_weight, grid, n_sub)
    if np.min(np.linalg.eigvalsh(S)) <= 0:
        raise ConfigError("degenerate stiffness: p vanishes on a cell run")
    vals = scipy.linalg.eigh(M, S, eigvals_only=True)
    return float(vals[-1])


def inverse_coefficient_constant(p: CoefficientProfile, grid: SpaceGrid,
                                 n_sub=32) -> float:
    """Smallest constant in int v^2 / a <= C int (v')^2 (weakly degenerate
    coefficients only, where 1/a is integrable)."""
    if p.kind == KIND_SD:
        raise ConstraintError("1/a is not integrable for an SD profile")
    x0 = p.x0 if p.degenerate else None
    mass = _dual_cell_mass(lambda z: 1.0 / p(z), grid, x0, n_sub)
    c = 1.0 / grid.h
    S = np.diag(c[:-1] + c[1:])
    S += np.diag(-c[1:-1], 1) + np.diag(-c[1:-1], -1)
    vals = scipy.linalg.eigh(np.diag(mass[1:-1]), S, eigvals_only=True)
    return float(vals[-1])


def caccioppoli_check(v: Field, w: CarlemanWeight, omega_inner,
                      omega) -> InequalityReport:
    """Both sides of the Caccioppoli inequality
    int int_{omega'} (v_x)^2 e^{2s phi} <= C int int_{omega} v^2
    for each s on the weight's grid.  Requires closure(omega') inside
    omega and x0 outside closure(omega')."""
    omega_inner = normalize_omega(omega_inner)
    omega = normalize_omega(omega)
    for lo, hi in omega_inner:
        if not any(ol < lo and hi < oh for ol, oh in omega):
            raise ConfigError(
                "closure of omega'=(%g,%g) not contained in omega" % (lo, hi)
            )
        if w.profile.degenerate and lo <= w.profile.x0 <= hi:
            raise ConfigError("x0 lies in the closure of omega'")
    g = v.grid
    x = g.nodes
    T = v.tgrid.T
    tau = v.tgrid.step
    kk = np.arange(1, v.tgrid.M)
    theta = eval_theta(v.tgrid.times[kk], T)
    psi = w.psi(np.clip(x, w.interval[0], w.interval[1]))
    inner_mask = omega_mask(g, omega_inner)
    outer_mask = omega_mask(g, omega)
    grads = np.apply_along_axis(_centered_gradient, 1, v.values[kk], x)
    vals_sq = v.values[kk] ** 2
    hbar = g.hbar
    rhs_val = float(np.sum((vals_sq * hbar[None, :])[:, outer_mask]) * tau)

    lhs_list, rhs_list = [], []
    for s in w.s_grid:
        expo = 2.0 * s * np.outer(theta, psi)
        ew = np.where(expo < EXP_CLAMP, 0.0, np.exp(np.maximum(expo, EXP_CLAMP)))
        integ = (grads ** 2 * ew * hbar[None, :])[:, inner_mask]
        lhs_list.append(float(np.sum(integ) * tau))
        rhs_list.append(rhs_val)
    return _finalize_report("Caccioppoli:" + w.variant, w.s_grid,
                            lhs_list, rhs_list)
