"""Coefficient profiles a(x) and mechanical checks of the structural
hypotheses they must satisfy (degeneracy class, quotient bound, monotone
quotients, derivative growth, integrability of 1/a and 1/sqrt(a))."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConstraintError, GeometryError, ProfileError

KIND_WD = "weakly-degenerate"
KIND_SD = "strongly-degenerate"
KIND_ND = "non-degenerate"


@dataclass(frozen=True)
class CoefficientProfile:
    """A diffusion coefficient a(x) >= 0 on [0,1], possibly vanishing at an
    interior point x0.

    `samples_x` / `samples_a` always hold a tabulation; `func` (and
    optionally `dfunc`) give the closed form when one exists and are
    preferred for evaluation.
    """

    samples_x: np.ndarray
    samples_a: np.ndarray
    x0: Optional[float]
    K: float
    kind: str
    theta: Optional[float] = None
    sigma: Optional[float] = None
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dfunc: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = "custom"

    def __post_init__(self):
        x = np.asarray(self.samples_x, dtype=float)
        a = np.asarray(self.samples_a, dtype=float)
        if x.ndim != 1 or x.shape != a.shape or x.size < 3:
            raise ProfileError("need >= 3 (x, a) samples of matching shape")
        if np.any(np.diff(x) <= 0):
            raise ProfileError("sample abscissas must be strictly increasing")
        if np.any(a < 0):
            raise ProfileError("a(x) < 0 at x=%g" % x[np.argmin(a)])
        object.__setattr__(self, "samples_x", x)
        object.__setattr__(self, "samples_a", a)
        if self.x0 is not None:
            # x0 must sit exactly on a sample so a(x0)=0 is representable
            i = int(np.argmin(np.abs(x - self.x0)))
            if x[i] != self.x0:
                raise ProfileError("x0=%g is not a sample abscissa" % self.x0)
            object.__setattr__(self, "_x0_index", i)
        else:
            object.__setattr__(self, "_x0_index", None)

    @property
    def x0_index(self) -> Optional[int]:
        return self._x0_index

    @property
    def degenerate(self) -> bool:
        return self.kind != KIND_ND

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        if self.func is not None:
            return self.func(pts)
        return np.interp(pts, self.samples_x, self.samples_a)

    def derivative(self, pts):
        """a'(pts) from the closed form when available, otherwise by
        central difference quotients of the tabulation (never at x0)."""
        pts = np.asarray(pts, dtype=float)
        if self.dfunc is not None:
            return self.dfunc(pts)
        d = np.gradient(self.samples_a, self.samples_x)
        return np.interp(pts, self.samples_x, d)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "a"])
            for xi, ai in zip(self.samples_x, self.samples_a):
                w.writerow([repr(float(xi)), repr(float(ai))])

    @staticmethod
    def from_csv(path, x0=None, K=None, kind=None, theta=None, sigma=None):
        xs, avals = [], []
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if [h.strip() for h in header] != ["x", "a"]:
                raise ProfileError("profile CSV must start with header 'x,a'")
            for row in r:
                xs.append(float(row[0]))
                avals.append(float(row[1]))
        x = np.array(xs)
        a = np.array(avals)
        if kind is None:
            kind = _classify(x, a, x0, K)
        if K is None:
            K = estimate_singularity_exponent(
                lambda p: np.interp(p, x, a), x0, max(x0, 1 - x0) / 4
            ) if x0 is not None else 0.0
        return CoefficientProfile(x, a, x0, K, kind, theta=theta, sigma=sigma)


def _classify(x, a, x0, K):
    if x0 is None:
        return KIND_ND
    if K is None:
        raise ProfileError("degenerate profile needs an exponent bound K")
    return KIND_WD if K < 1.0 else KIND_SD


def make_prototype_profile(alpha, x0, n, allow_exponent_override=False):
    """Prototype coefficient a(x) = |x - x0|^alpha on [0,1].

    alpha in (0,1) is weakly degenerate, [1,2) strongly degenerate.  alpha
    outside (0,2) is rejected unless `allow_exponent_override` is set (used
    only to probe the loss of null controllability at K >= 2).
    """
    if not (0.0 < alpha < 2.0) and not allow_exponent_override:
        raise ConstraintError(
            "degeneracy exponent alpha=%g outside the admissible range (0,2)" % alpha
        )
    if alpha <= 0.0:
        raise ConstraintError("alpha must be positive")
    if not (0.0 < x0 < 1.0):
        raise ConstraintError("x0=%g must lie in (0,1)" % x0)
    if n < 3:
        raise ConstraintError("need at least 3 samples")

    xs = np.linspace(0.0, 1.0, n)
    xs[int(np.argmin(np.abs(xs - x0)))] = x0

    def func(p):
        return np.abs(np.asarray(p, dtype=float) - x0) ** alpha

    def dfunc(p):
        p = np.asarray(p, dtype=float)
        y = p - x0
        with np.errstate(divide="ignore", invalid="ignore"):
            d = alpha * np.sign(y) * np.abs(y) ** (alpha - 1.0)
        return np.where(y == 0.0, 0.0 if alpha > 1 else np.nan, d)

    kind = KIND_WD if alpha < 1.0 else KIND_SD
    sigma = None
    if alpha > 1.5:
        # |a'| = alpha |y|^(alpha-1) <= Sigma |y|^(2 theta - 3) with theta=alpha
        sigma = alpha * max(x0, 1.0 - x0) ** (2.0 - alpha)
    return CoefficientProfile(
        xs, func(xs), x0, alpha, kind, theta=alpha, sigma=sigma,
        func=func, dfunc=dfunc, label="prototype(alpha=%g, x0=%g)" % (alpha, x0),
    )


def estimate_singularity_exponent(afun, x0, d):
    """Empirical exponent kappa with a(x) ~ |x-x0|^kappa near x0, by a
    two-point log-ratio fit on each side; returns the larger side."""
    kappas = []
    for sgn in (-1.0, 1.0):
        a1 = float(afun(x0 + sgn * d / 2))
        a2 = float(afun(x0 + sgn * d))
        if a1 <= 0 or a2 <= 0:
            continue
        kappas.append(math.log(a2 / a1) / math.log(2.0))
    if not kappas:
        raise ProfileError("cannot estimate exponent: a vanishes near x0")
    return max(kappas)


def empirical_exponent(p: CoefficientProfile) -> float:
    """Measured degeneracy exponent of a profile, for comparison with K."""
    if not p.degenerate:
        return 0.0
    h = np.min(np.diff(p.samples_x))
    return estimate_singularity_exponent(p, p.x0, 4.0 * h)


@dataclass(frozen=True)
class NonDegeneratePair:
    """Auxiliary pair (g, h) with floors g0, h0 entering the non-smooth
    non-degenerate hypothesis on an interval (A,B) with a >= a0 > 0."""

    g: Callable
    h: Callable
    g0: float
    h0: float
    form: str  # "divergence" | "nondivergence"
    interval: tuple

    def __post_init__(self):
        if self.form not in ("divergence", "nondivergence"):
            raise ConstraintError("form must be divergence|nondivergence")
        if self.g0 <= 0 or self.h0 <= 0:
            raise ConstraintError("g0 and h0 must be strictly positive")
        A, B = self.interval
        if not (A < B):
            raise GeometryError("empty interval (%g,%g)" % (A, B))


@dataclass
class Check:
    verdict: str  # "pass" | "fail" | "not-applicable" | "integrable" | "divergent"
    worst: float = 0.0
    where: Optional[float] = None

    def __post_init__(self):
        if self.verdict == "fail" and self.where is None:
            raise ValueError("a fail verdict must carry a witness abscissa")


@dataclass
class HypothesisReport:
    checks: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.verdict != "fail" for c in self.checks.values())

    def __getitem__(self, name) -> Check:
        return self.checks[name]

    def summary_lines(self):
        out = []
        for name in sorted(self.checks):
            c = self.checks[name]
            loc = "" if c.where is None else " at x=%.6g" % c.where
            out.append("%-28s %-14s worst=%.6g%s" % (name, c.verdict, c.worst, loc))
        return out


def default_tolerance(p: CoefficientProfile) -> float:
    return 1e-8 * (1.0 + float(np.max(p.samples_a)))


def _midpoint_integral(f, n_cells, exclude=None):
    edges = np.linspace(0.0, 1.0, n_cells + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    if exclude is not None:
        mids = mids[mids != exclude]
    return float(np.sum(f(mids)) * (1.0 / n_cells))


def check_degeneracy_hypotheses(p: CoefficientProfile, tol=None, quotient_tol=0.05):
    """Verify the structural hypotheses on a degenerate coefficient.

    Checks: sign/zero structure, the quotient bound (x-x0)a' <= K a (by
    difference quotients over interior cells, never at x0), monotonicity of
    a/|x-x0|^theta when K > 4/3, the derivative-growth bound when K > 3/2,
    and grid-integrability of 1/a and 1/sqrt(a).

    `tol` is the absolute tolerance for exact identities (default
    1e-8*(1+max a)); `quotient_tol` is the relative slack for the
    difference-quotient bound, which carries an O(1) power-law
    discretization defect near x0.
    """
    if tol is None:
        tol = default_tolerance(p)
    rep = HypothesisReport(tolerances={"tol": tol, "quotient_tol": quotient_tol})
    x, a = p.samples_x, p.samples_a

    if np.any(a < 0):  # defensive; the constructor already rejects this
        raise ProfileError("invalid profile: a < 0")

    if not p.degenerate:
        rep.checks["sign-structure"] = Check(
            "pass" if np.all(a > 0) else "fail",
            float(np.min(a)), float(x[np.argmin(a)]) if np.any(a <= 0) else None,
        )
        for name in ("quotient-bound", "theta-monotonicity", "sigma-bound"):
            rep.checks[name] = Check("not-applicable")
        rep.checks["inv-a-integrable"] = Check("integrable", 0.0)
        rep.checks["inv-sqrt-a-integrable"] = Check("integrable", 0.0)
        return rep

    i0 = p.x0_index
    # (i) a(x0) = 0, a > 0 elsewhere
    off = np.delete(a, i0)
    offx = np.delete(x, i0)
    ok = a[i0] <= tol and np.all(off > 0)
    worst = float(a[i0]) if a[i0] > tol else float(np.min(off))
    where = None if ok else (p.x0 if a[i0] > tol else float(offx[np.argmin(off)]))
    rep.checks["sign-structure"] = Check("pass" if ok else "fail", worst, where)

    # (ii) (x-x0) a' <= K a over interior cells excluding those touching x0
    worst_r, worst_x = -np.inf, None
    for i in range(len(x) - 1):
        if i0 in (i, i + 1):
            continue
        xm = 0.5 * (x[i] + x[i + 1])
        q = (a[i + 1] - a[i]) / (x[i + 1] - x[i])
        cap = max(a[i], a[i + 1])
        r = ((xm - p.x0) * q - p.K * cap) / max(cap, tol)
        if r > worst_r:
            worst_r, worst_x = r, xm
    rep.checks["quotient-bound"] = Check(
        "pass" if worst_r <= quotient_tol else "fail", worst_r, worst_x
    )

    # (iii) monotone quotient a/|x-x0|^theta, required only for K > 4/3
    if p.K > 4.0 / 3.0:
        if p.theta is None:
            rep.checks["theta-monotonicity"] = Check("fail", np.inf, p.x0)
        else:
            y = np.abs(offx - p.x0)
            quot = off / y ** p.theta
            left = offx < p.x0
            bad, where_m = 0.0, None
            dl = np.diff(quot[left])  # must be <= 0 going right toward x0
            if dl.size and np.max(dl) > tol:
                bad = float(np.max(dl))
                where_m = float(offx[left][np.argmax(dl)])
            dr = np.diff(quot[~left])  # must be >= 0 going right from x0
            if dr.size and -np.min(dr) > max(bad, tol):
                bad = float(-np.min(dr))
                where_m = float(offx[~left][np.argmin(dr)])
            rep.checks["theta-monotonicity"] = Check(
                "pass" if bad <= tol else "fail", bad, where_m
            )
    else:
        rep.checks["theta-monotonicity"] = Check("not-applicable")

    # (iv) |a'| <= Sigma |x-x0|^(2 theta - 3), required only for K > 3/2
    if p.K > 1.5:
        if p.theta is None:
            rep.checks["sigma-bound"] = Check("fail", np.inf, p.x0)
        else:
            xm = 0.5 * (x[:-1] + x[1:])
            q = np.abs(np.diff(a) / np.diff(x))
            keep = np.array([i0 not in (i, i + 1) for i in range(len(xm))])
            bound = np.abs(xm - p.x0) ** (2.0 * p.theta - 3.0)
            est = float(np.max(q[keep] / bound[keep]))
            if p.sigma is None:
                rep.checks["sigma-bound"] = Check("pass", est)
            else:
                j = int(np.argmax(q[keep] / bound[keep]))
                ok = est <= p.sigma * (1.0 + quotient_tol)
                rep.checks["sigma-bound"] = Check(
                    "pass" if ok else "fail", est,
                    None if ok else float(xm[keep][j]),
                )
    else:
        rep.checks["sigma-bound"] = Check("not-applicable")

    # (v) grid-integrability of 1/a and 1/sqrt(a): verdict from the measured
    # singularity exponent; the midpoint-refinement ratio is reported as the
    # boundedness surrogate.
    d = max(4.0 * float(np.min(np.diff(x))), 1e-4)
    kappa = estimate_singularity_exponent(p, p.x0, d)
    with np.errstate(divide="ignore"):
        vals = [
            _midpoint_integral(lambda z: 1.0 / p(z), n, exclude=p.x0)
            for n in (256, 512, 1024)
        ]
    ratio = max(vals[1] / vals[0], vals[2] / vals[1])
    rep.checks["inv-a-integrable"] = Check(
        "integrable" if kappa < 1.0 else "divergent", ratio
    )
    rep.checks["inv-sqrt-a-integrable"] = Check(
        "integrable" if kappa < 2.0 else "divergent", math.sqrt(ratio)
    )
    rep.tolerances["kappa"] = kappa
    return rep


def check_nondegenerate_pair(p: CoefficientProfile, pair: NonDegeneratePair,
                             tol, n_quad=2000):
    """Quadrature-verify the identity linking a', g, h on pair.interval:

        -+ a'/(2 sqrt(a)) * (int_x^B g + h0) + sqrt(a) g = h

    with - for divergence form and + for non-divergence form.  The global
    variant requires a non-degenerate coefficient on the interval.
    """
    A, B = pair.interval
    if p.degenerate and A < p.x0 < B:
        raise GeometryError(
            "interval (%g,%g) contains the degeneracy point x0=%g" % (A, B, p.x0)
        )
    rep = HypothesisReport(tolerances={"tol": tol})

    hq = (B - A) / n_quad
    mids = A + hq * (np.arange(n_quad) + 0.5)
    gvals = np.asarray(pair.g(mids), dtype=float)

    ok_floor = np.all(gvals >= pair.g0 - tol)
    j = int(np.argmin(gvals))
    rep.checks["g-floor"] = Check(
        "pass" if ok_floor else "fail", float(np.min(gvals)),
        None if ok_floor else float(mids[j]),
    )

    # G(x) = int_x^B g, midpoint cumulative from the right
    Gright = np.concatenate(([0.0], np.cumsum(gvals[::-1] * hq)))[::-1]
    # identity residual at the interior cell edges
    edges = A + hq * np.arange(1, n_quad)
    avals = p(edges)
    if np.any(avals <= 0):
        raise GeometryError("a degenerates inside (%g,%g)" % (A, B))
    aprime = p.derivative(edges)
    sgn = -1.0 if pair.form == "divergence" else 1.0
    Gedge = Gright[1:n_quad]
    res = (sgn * aprime / (2.0 * np.sqrt(avals)) * (Gedge + pair.h0)
           + np.sqrt(avals) * gvals[:-1] * 0.5 + np.sqrt(avals) * gvals[1:] * 0.5
           - np.asarray(pair.h(edges), dtype=float))
    worst = float(np.max(np.abs(res)))
    jw = int(np.argmax(np.abs(res)))
    rep.checks["pair-identity"] = Check(
        "pass" if worst <= tol else "fail", worst,
        None if worst <= tol else float(edges[jw]),
    )
    return rep
