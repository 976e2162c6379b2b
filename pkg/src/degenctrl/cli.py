"""Scenario-driven command line front end: parse a TOML config, dispatch
to the numerical modules, and emit reproducible artifacts (a JSON run
manifest, CSV data files, and a human-readable summary).

Exit codes: 0 when every verdict passes, 2 when the run completed but a
verdict failed, 1 on configuration or numerical error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, coeff, control, mesh, pde, weights
from .errors import ConfigError, DegenCtrlError

TASKS = ("solve", "observe", "control", "carleman", "hardy",
         "caccioppoli", "regional", "semilinear")

FORMS = {"divergence": mesh.FORM_DIV, "non-divergence": mesh.FORM_NONDIV}

# allowed keys, per section; unknown keys are a hard error so that a
# misspelled option can never fall back to a silent default
_SCHEMA = {
    None: {"name", "task", "seed", "form", "omega", "output_dir",
           "profile", "grid", "time", "initial", "control", "weights",
           "hardy", "caccioppoli", "regional", "semilinear"},
    "profile": {"alpha", "x0", "n_samples", "constant", "csv",
                "allow_exponent_override"},
    "grid": {"n", "grading"},
    "time": {"T", "M"},
    "initial": {"kind", "k", "amplitude"},
    "control": {"epsilon", "cg_tol", "cg_max_iters", "residual_tol",
                "method", "max_iters", "rtol"},
    "weights": {"variant", "c1", "d1", "margin", "R", "s_lo", "s_hi",
                "s_count", "n_samples", "bound"},
    "hardy": {"p", "exponent", "n_sub"},
    "caccioppoli": {"omega_inner", "c1", "margin", "s_lo", "s_hi",
                    "s_count"},
    "regional": {"r_inner", "r_outer", "residual_tol"},
    "semilinear": {"amplitude", "fq_bound", "tol", "max_iters",
                   "residual_tol"},
}


def _check_keys(cfg, section, allowed):
    extra = sorted(set(cfg) - allowed)
    if extra:
        where = "section [%s]" % section if section else "top level"
        raise ConfigError("unknown key(s) %s at %s" % (", ".join(extra),
                                                       where))


def load_scenario(path):
    """Parse and validate one scenario file; returns the config dict."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            cfg = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError("config file not found: %s" % path)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("malformed TOML in %s: %s" % (path, exc))
    _check_keys(cfg, None, _SCHEMA[None])
    for section, allowed in _SCHEMA.items():
        if section and section in cfg:
            if not isinstance(cfg[section], dict):
                raise ConfigError("[%s] must be a table" % section)
            _check_keys(cfg[section], section, allowed)
    for key in ("name", "task", "seed"):
        if key not in cfg:
            raise ConfigError("missing required key %r" % key)
    if cfg["task"] not in TASKS:
        raise ConfigError("unknown task %r (expected one of %s)"
                          % (cfg["task"], ", ".join(TASKS)))
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if cfg.get("form", "divergence") not in FORMS:
        raise ConfigError("form must be 'divergence' or 'non-divergence'")
    return cfg


def _build_profile(cfg):
    pc = cfg.get("profile", {})
    if "csv" in pc:
        return coeff.CoefficientProfile.from_csv(pc["csv"],
                                                 x0=pc.get("x0"))
    if "constant" in pc:
        value = float(pc["constant"])
        if value <= 0:
            raise ConfigError("constant coefficient must be positive")
        xs = np.linspace(0.0, 1.0, int(pc.get("n_samples", 401)))
        return coeff.CoefficientProfile(
            xs, np.full_like(xs, value), None, 0.0, coeff.KIND_ND,
            func=lambda x, v=value: np.full_like(
                np.asarray(x, dtype=float), v),
        )
    if "alpha" not in pc:
        raise ConfigError("[profile] needs alpha, constant, or csv")
    return coeff.make_prototype_profile(
        float(pc["alpha"]), float(pc.get("x0", 0.5)),
        int(pc.get("n_samples", 401)),
        allow_exponent_override=bool(pc.get("allow_exponent_override",
                                            False)),
    )


def _build_grids(cfg, profile):
    gc = cfg.get("grid", {})
    tc = cfg.get("time", {})
    n = int(gc.get("n", 101))
    grading = gc.get("grading")
    grid = mesh.build_grid(n, profile if profile.degenerate else None,
                           grading=grading)
    tgrid = mesh.TimeGrid(float(tc.get("T", 0.5)), int(tc.get("M", 160)))
    return grid, tgrid


def _build_u0(cfg, grid):
    ic = cfg.get("initial", {})
    kind = ic.get("kind", "sine")
    amp = float(ic.get("amplitude", 1.0))
    x = grid.nodes
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "sine":
        k = int(ic.get("k", 1))
        return amp * np.sin(k * np.pi * x)
    if kind == "mixed":
        return amp * (np.sin(np.pi * x) + 0.5 * np.sin(2.0 * np.pi * x))
    if kind == "hat":
        return amp * np.maximum(0.0, 1.0 - np.abs(x - 0.5) / 0.25)
    raise ConfigError("unknown initial kind %r" % kind)


def _spec(cfg, profile, grid, with_u0=True):
    form = FORMS[cfg.get("form", "divergence")]
    omega = [tuple(piece) for piece in cfg.get("omega", [])] or None
    u0 = _build_u0(cfg, grid) if with_u0 else None
    return pde.ProblemSpec(profile, form, omega=omega, u0=u0)


def _s_grid(section):
    return weights.default_s_grid(float(section.get("s_lo", 0.05)),
                                  float(section.get("s_hi", 2.0)),
                                  int(section.get("s_count", 16)))


def _random_vT(grid, rng):
    vT = rng.standard_normal(grid.n_nodes)
    vT[0] = vT[-1] = 0.0
    return vT


# ---------------------------------------------------------------------------
# task handlers: each returns (passed: bool, summary: dict); artifacts are
# written into `out`


def _task_solve(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    spec = _spec(cfg, profile, grid)
    u = pde.solve_forward(spec, grid, tgrid)
    u.to_csv(out / "solution.csv")
    rep = pde.energy_estimate_check(u, spec)
    final = float(np.sqrt(np.sum(grid.hbar * u.values[-1] ** 2)))
    summary = {"final_l2_norm": final,
               "energy_constant": float(rep.constant),
               "sup_norm_sq": float(rep.sup_norm_sq)}
    passed = np.isfinite(final)
    return passed, summary


def _task_observe(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    spec = _spec(cfg, profile, grid, with_u0=False)
    cc = cfg.get("control", {})
    report = control.estimate_observability_constant(
        spec, grid, tgrid, method=cc.get("method", "power"),
        seed=cfg["seed"], max_iters=int(cc.get("max_iters", 100)),
        rtol=float(cc.get("rtol", 1e-3)),
    )
    report.to_json(out / "observe.json")
    return report.c_T >= 0.0, report.summary()


def _task_control(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    spec = _spec(cfg, profile, grid)
    cc = cfg.get("control", {})
    kwargs = dict(epsilon=cc.get("epsilon"),
                  cg_tol=float(cc.get("cg_tol", 1e-8)),
                  cg_max_iters=int(cc.get("cg_max_iters", 500)))
    if spec.omega and len(spec.omega) == 2:
        result = control.two_piece_control(spec, grid, tgrid, **kwargs)
    else:
        result = control.hum_null_control(spec, grid, tgrid, **kwargs)
    result.to_json(out / "control.json")
    result.h.to_csv(out / "h.csv")
    u0_norm = np.sqrt(result.trace.get("u0_wnorm_sq", 0.0))
    tol = float(cc.get("residual_tol", 1e-2))
    passed = bool(result.converged
                  and result.final_residual <= tol * max(u0_norm, 1e-300))
    if u0_norm == 0.0:
        passed = result.cost == 0.0
    return passed, result.summary()


def _task_carleman(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    spec = _spec(cfg, profile, grid, with_u0=False)
    wc = cfg.get("weights", {})
    variant = wc.get("variant", "DegDiv")
    if variant not in (weights.VARIANT_DEG_DIV, weights.VARIANT_DEG_NONDIV):
        raise ConfigError(
            "the CLI builds the degenerate weight families only; use the "
            "library API for the non-degenerate variants"
        )
    form = (mesh.FORM_DIV if variant == weights.VARIANT_DEG_DIV
            else mesh.FORM_NONDIV)
    w = weights.build_degenerate_weight(
        profile, form, float(wc.get("c1", wc.get("d1", 1.0))),
        float(wc.get("margin", 0.2)), R=float(wc.get("R", 1.0)),
        s_grid=_s_grid(wc),
    )
    worst = None
    for _ in range(int(wc.get("n_samples", 1))):
        vspec = pde.ProblemSpec(profile, form, vT=_random_vT(grid, rng))
        v = pde.solve_adjoint(vspec, grid, tgrid)
        report = weights.carleman_ratio(v, w, profile, grid, tgrid)
        if worst is None or report.sup_ratio > worst.sup_ratio:
            worst = report
    worst.to_csv(out / "ratio.csv")
    worst.to_json(out / "carleman.json")
    passed = np.isfinite(worst.sup_ratio)
    if "bound" in wc:
        passed = passed and worst.sup_ratio <= float(wc["bound"])
    return passed, worst.summary()


def _task_hardy(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, _ = _build_grids(cfg, profile)
    hc = cfg.get("hardy", {})
    x0 = profile.x0 if profile.degenerate else 0.5
    kind = hc.get("p", "square")
    if kind == "square":
        beta = 2.0
    elif kind == "pow43":
        beta = 4.0 / 3.0
    elif kind == "exponent":
        beta = float(hc.get("exponent", 2.0))
    else:
        raise ConfigError("hardy p must be square, pow43, or exponent")
    p_weight = np.abs(grid.nodes - x0) ** beta
    cert = weights.hardy_weight_certificate(p_weight, grid)
    c_hp = weights.hardy_poincare_constant(p_weight, grid,
                                           n_sub=int(hc.get("n_sub", 32)))
    summary = {"c_hp": float(c_hp), "exponent": beta,
               "certificate": cert.verdict}
    with open(out / "hardy.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return cert.verdict == "pass" and np.isfinite(c_hp), summary


def _task_caccioppoli(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    form = FORMS[cfg.get("form", "divergence")]
    cc = cfg.get("caccioppoli", {})
    if "omega_inner" not in cc:
        raise ConfigError("[caccioppoli] needs omega_inner")
    if "omega" not in cfg:
        raise ConfigError("caccioppoli task needs a top-level omega")
    w = weights.build_degenerate_weight(
        profile, form, float(cc.get("c1", 1.0)),
        float(cc.get("margin", 0.2)), s_grid=_s_grid(cc),
    )
    vspec = pde.ProblemSpec(profile, form, vT=_random_vT(grid, rng))
    v = pde.solve_adjoint(vspec, grid, tgrid)
    report = weights.caccioppoli_check(v, w, [tuple(cc["omega_inner"])],
                                       [tuple(p) for p in cfg["omega"]])
    report.to_csv(out / "caccioppoli.csv")
    report.to_json(out / "caccioppoli.json")
    return np.isfinite(report.sup_ratio), report.summary()


def _task_regional(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    spec = _spec(cfg, profile, grid)
    rc = cfg.get("regional", {})
    result = control.regional_control_cutoff(
        spec, grid, tgrid, float(rc.get("r_inner", 0.05)),
        float(rc.get("r_outer", 0.12)),
    )
    result.to_json(out / "regional.json")
    result.h.to_csv(out / "h.csv")
    tol = float(rc.get("residual_tol", 1e-10))
    return result.final_residual <= tol, result.summary()


def _task_semilinear(cfg, out, rng):
    profile = _build_profile(cfg)
    grid, tgrid = _build_grids(cfg, profile)
    spec = _spec(cfg, profile, grid)
    sc = cfg.get("semilinear", {})
    amp = float(sc.get("amplitude", 1e-2))

    def f(t, x, u):
        return amp * np.sin(u)

    def fq(t, x, u):
        return amp * np.cos(u)

    result = control.semilinear_null_control(
        spec, grid, tgrid, f, fq, fq_bound=float(sc.get("fq_bound", amp)),
        tol=float(sc.get("tol", 1e-6)),
        max_iters=int(sc.get("max_iters", 12)),
    )
    result.to_json(out / "semilinear.json")
    result.h.to_csv(out / "h.csv")
    u0_norm = np.sqrt(result.trace["u0_wnorm_sq"])
    tol = float(sc.get("residual_tol", 1e-2))
    passed = bool(result.converged
                  and result.final_residual <= tol * max(u0_norm, 1e-300))
    return passed, result.summary()


_HANDLERS = {"solve": _task_solve, "observe": _task_observe,
             "control": _task_control, "carleman": _task_carleman,
             "hardy": _task_hardy, "caccioppoli": _task_caccioppoli,
             "regional": _task_regional, "semilinear": _task_semilinear}


# ---------------------------------------------------------------------------
# reporting


def _fmt(value):
    if isinstance(value, float):
        return "%.6g" % value
    return str(value)


def emit_report(results):
    """Render a list of (name, verdict, summary) sections, in order, as
    (text, machine-readable dict).  Floats use 6 significant digits."""
    lines = []
    payload = []
    for name, verdict, summary in results:
        lines.append("[%s] %s" % (name, verdict))
        for key in sorted(summary):
            value = summary[key]
            if isinstance(value, dict):
                value = json.dumps(value, sort_keys=True)
            lines.append("  %-24s %s" % (key, _fmt(value)))
        payload.append({"name": name, "verdict": verdict,
                        "summary": summary})
    return "\n".join(lines) + "\n", {"report": payload,
                                     "version": __version__}


def run_scenario(path):
    """Run one scenario file; returns (exit_code, name, verdict, summary)
    and leaves the artifacts in the scenario's output directory."""
    path = Path(path)
    try:
        cfg = load_scenario(path)
    except (DegenCtrlError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1, str(path), "error", {"message": str(exc)}
    out = Path(cfg.get("output_dir", path.parent / (cfg["name"] + "_out")))
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    try:
        passed, summary = _HANDLERS[cfg["task"]](cfg, out, rng)
    except (DegenCtrlError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1, cfg["name"], "error", {"message": str(exc)}
    verdict = "pass" if passed else "fail"
    manifest = {"name": cfg["name"], "task": cfg["task"],
                "seed": cfg["seed"], "config": cfg,
                "verdict": verdict, "version": __version__}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    text, _ = emit_report([(cfg["name"], verdict, summary)])
    with open(out / "summary.txt", "w") as f:
        f.write(text)
    return (0 if passed else 2), cfg["name"], verdict, summary


def run_suite(directory):
    """Run every *.toml scenario in `directory` (sorted order) and write
    an aggregate report; scenario artifacts land in their own output
    directories.  DEGENCTRL_THREADS caps the parallelism."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.toml"))
    if not paths:
        print("error: no scenario files in %s" % directory,
              file=sys.stderr)
        return 1
    workers = max(1, int(os.environ.get("DEGENCTRL_THREADS", "1")))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run_scenario, paths))
    else:
        outcomes = [run_scenario(p) for p in paths]
    results = [(name, verdict, summary)
               for _, name, verdict, summary in outcomes]
    text, payload = emit_report(results)
    sys.stdout.write(text)
    with open(directory / "suite_report.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    codes = [code for code, _, _, _ in outcomes]
    if 1 in codes:
        return 1
    return 2 if 2 in codes else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="degenctrl",
        description="scenario runner for the degenerate-parabolic toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one scenario file")
    p_run.add_argument("config")
    p_suite = sub.add_parser("suite", help="run a directory of scenarios")
    p_suite.add_argument("directory")
    p_val = sub.add_parser("validate", help="validate a config, run nothing")
    p_val.add_argument("config")
    args = parser.parse_args(argv)

    if args.command == "run":
        code, name, verdict, summary = run_scenario(args.config)
        if verdict != "error":
            text, _ = emit_report([(name, verdict, summary)])
            sys.stdout.write(text)
        return code
    if args.command == "suite":
        return run_suite(args.directory)
    if args.command == "validate":
        try:
            load_scenario(args.config)
        except (DegenCtrlError, ValueError) as exc:
            print("error: %s" % exc, file=sys.stderr)
            return 1
        print("ok")
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
