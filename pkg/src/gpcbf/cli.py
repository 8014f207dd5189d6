"""Config-driven runner: single runs, parameter sweeps and GP bound validation.

Exit codes: 0 success, 2 config error, 3 simulation abort, 4 bound violation.
"""
from __future__ import annotations

import argparse
import configparser
import copy
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .barrier import EpsilonFn, obstacle_chain
from .gp import (
    Dataset,
    InvalidBoundError,
    KernelSpec,
    error_bound_global,
    fit,
    latin_hypercube,
    synth_rkhs_function,
)
from .safety_filter import FilterMode, InputBox
from .sim import (
    CircleReference,
    SimConfig,
    SimulationAbort,
    TrainingConfig,
    UnsafeInitialState,
    WaypointReference,
    collect_training_data,
    run_experiment,
)
from .systems import PointMass, SingularInertiaError, SphereObstacle, TwoLinkArm

logger = logging.getLogger("gpcbf")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_BOUND = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# section -> key -> (kind, default); "vec" is a comma-separated float list
SCHEMA = {
    "plant": {
        "kind": ("str", "two_link"),
        "m1": ("float", 1.0),
        "m2": ("float", 1.0),
        "l1": ("float", 0.5),
        "l2": ("float", 0.5),
        "gravity": ("float", 9.81),
        "disturbance_scale": ("float", 0.2),
        "mass": ("float", 1.0),
        "drag": ("float", 0.5),
        "wind": ("vec", [0.3, -0.2]),
    },
    "obstacle": {
        "center": ("vec", [0.552, -0.294]),
        "radius": ("float", 0.1),
    },
    "barrier": {
        "gains": ("vec", [5.0, 10.0]),
        "eps0": ("float", 1.0),
        "lambda": ("float", 0.0),
        "eps_floor": ("float", 0.0),
        "eta_bar_sq_source": ("str", "manual"),
        "eta_bar_sq": ("float", 12.68),
        "shrink_from": ("int", 0),
    },
    "gp": {
        "lengthscale": ("float", 1.0),
        "M": ("int", 400),
        "sigma_v": ("float", 0.02),
        "B": ("vec", [10.0]),
        "box_margin_q": ("float", 0.4),
        "box_qd": ("float", 1.5),
        "lower": ("vec", []),
        "upper": ("vec", []),
        "grid_points": ("int", 2000),
    },
    "sim": {
        "dt": ("float", 0.001),
        "T": ("float", 10.0),
        "seed": ("int", 0),
        "mode": ("str", "gp_phocbf"),
        "integrator": ("str", "rk4"),
        "Kp": ("float", 30.0),
        "Kd": ("float", 15.0),
        "pd_sign": ("str", "stabilizing"),
        "gravity_feedforward": ("bool", False),
    },
    "reference": {
        "kind": ("str", "circle"),
        "center": ("vec", [0.55, 0.1]),
        "radius": ("float", 0.2),
        "period": ("float", 8.0),
        "phase": ("float", math.pi / 2),
        "elbow": ("int", 1),
        "times": ("vec", []),
        "points": ("vec", []),
    },
    "input": {
        "lower": ("vec", [-50.0, -50.0]),
        "upper": ("vec", [50.0, 50.0]),
    },
    "output": {
        "dir": ("str", "out"),
    },
    "bound": {
        "dim": ("int", 2),
        "n_out": ("int", 2),
        "centers": ("int", 8),
        "coeff_scale": ("float", 1.0),
        "M": ("int", 200),
        "sigma_v": ("float", 0.02),
        "lengthscale": ("float", 1.0),
        "B_scale": ("float", 1.0),
        "grid_points": ("int", 1000),
        "lower": ("vec", [-2.0, -2.0]),
        "upper": ("vec", [2.0, 2.0]),
    },
}

SWEEP_PARAMS = {
    "lambda": ("barrier", "lambda"),
    "eps0": ("barrier", "eps0"),
    "eta_bar_sq": ("barrier", "eta_bar_sq"),
    "shrink_from": ("barrier", "shrink_from"),
    "mode": ("sim", "mode"),
    "M": ("gp", "M"),
}


def _coerce(kind, raw, where):
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            val = float(raw)
            if val != int(val):
                raise ValueError
            return int(val)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "vec":
            if isinstance(raw, (list, tuple)):
                return [float(v) for v in raw]
            s = str(raw).strip()
            return [float(v) for v in s.split(",")] if s else []
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None


def resolve(raw: dict) -> dict:
    """Fill defaults, coerce types, reject unknown sections and keys."""
    cfg = {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, items in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            cfg[sec][key] = _coerce(SCHEMA[sec][key][0], val, f"[{sec}] {key}")
    return cfg


def load_config(path) -> dict:
    """Read an INI-style config, or the ``config`` block of an emitted summary.json."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return resolve(doc.get("config", doc))
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return resolve({sec: dict(parser[sec]) for sec in parser.sections()})


# --- scenario assembly -----------------------------------------------------


def build_system(cfg):
    p = cfg["plant"]
    if p["kind"] == "two_link":
        return TwoLinkArm(p["m1"], p["m2"], p["l1"], p["l2"], p["gravity"], p["disturbance_scale"])
    if p["kind"] == "point_mass":
        if len(p["wind"]) != 2:
            raise ConfigError("[plant] wind needs two components")
        drag, wind = p["drag"], np.asarray(p["wind"])
        return PointMass(lambda x: wind - drag * x[2:], mass=p["mass"])
    raise ConfigError(f"unknown plant kind {p['kind']!r}")


def build_reference(cfg):
    r = cfg["reference"]
    if r["kind"] == "circle":
        if len(r["center"]) != 2:
            raise ConfigError("[reference] center needs two components")
        return CircleReference(tuple(r["center"]), r["radius"], r["period"], r["phase"], r["elbow"])
    if r["kind"] == "waypoints":
        times = r["times"]
        if len(times) < 2 or len(r["points"]) != 2 * len(times):
            raise ConfigError("[reference] waypoints need >= 2 times and 2 coordinates per time")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("[reference] times must increase")
        pts = tuple(tuple(r["points"][2 * k : 2 * k + 2]) for k in range(len(times)))
        return WaypointReference(tuple(times), pts)
    raise ConfigError(f"unknown reference kind {r['kind']!r}")


def training_box(system, ref, cfg):
    g = cfg["gp"]
    if g["lower"] or g["upper"]:
        if len(g["lower"]) != system.n or len(g["upper"]) != system.n:
            raise ConfigError(f"[gp] lower/upper need {system.n} entries")
        return np.asarray(g["lower"]), np.asarray(g["upper"])
    horizon = ref.period if isinstance(ref, CircleReference) else ref.times[-1]
    qs = np.array([ref(system, t)[0] for t in np.linspace(0.0, horizon, 400)])
    k = system.dof
    lo = np.r_[qs.min(axis=0) - g["box_margin_q"], np.full(k, -g["box_qd"])]
    hi = np.r_[qs.max(axis=0) + g["box_margin_q"], np.full(k, g["box_qd"])]
    return lo, hi


def build_scenario(cfg):
    """Everything ``run_experiment`` needs, plus the eta_bar^2 that was used."""
    system = build_system(cfg)
    ref = build_reference(cfg)
    seed = cfg["sim"]["seed"]
    lo, hi = training_box(system, ref, cfg)
    g = cfg["gp"]
    data = collect_training_data(system, TrainingConfig(g["M"], tuple(lo), tuple(hi), g["sigma_v"], seed))
    B = g["B"]
    if len(B) not in (1, system.n):
        raise ConfigError(f"[gp] B needs 1 or {system.n} entries")
    gp = fit(data, KernelSpec(g["lengthscale"]), B if len(B) > 1 else B[0])

    b = cfg["barrier"]
    source = b["eta_bar_sq_source"]
    if source == "manual":
        eta_sq = b["eta_bar_sq"]
    elif source in ("eta_bar_D", "eta_bar"):
        grid = latin_hypercube(lo, hi, g["grid_points"], np.random.default_rng(seed + 1))
        try:
            eb = error_bound_global(gp, grid)
        except InvalidBoundError as exc:
            raise ConfigError(str(exc)) from None
        eta_sq = (eb.eta_bar_D if source == "eta_bar_D" else eb.eta_bar) ** 2
    else:
        raise ConfigError(f"unknown eta_bar_sq_source {source!r}")

    o = cfg["obstacle"]
    if len(o["center"]) != 2:
        raise ConfigError("[obstacle] center needs two components")
    obstacle = SphereObstacle(tuple(o["center"]), o["radius"])
    eps = EpsilonFn(b["eps0"], b["lambda"], b["eps_floor"])
    chain = obstacle_chain(system, obstacle, b["gains"], eps, eta_sq, b["shrink_from"])

    s = cfg["sim"]
    sim_cfg = SimConfig(
        dt=s["dt"],
        T=s["T"],
        integrator=s["integrator"],
        seed=seed,
        mode=s["mode"],
        reference=ref,
        Kp=s["Kp"],
        Kd=s["Kd"],
        pd_sign=s["pd_sign"],
        gravity_feedforward=s["gravity_feedforward"],
    )
    box = InputBox(cfg["input"]["lower"], cfg["input"]["upper"])
    if box.lower.size != system.s:
        raise ConfigError(f"[input] bounds need {system.s} entries")
    return system, chain, gp, sim_cfg, box, eta_sq


def _assemble(cfg):
    try:
        return build_scenario(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def execute(cfg, out_dir: Path) -> dict:
    """One run: writes trajectory.csv and summary.json, returns the summary."""
    system, chain, gp, sim_cfg, box, eta_sq = _assemble(cfg)
    t0 = time.perf_counter()
    traj = run_experiment(system, chain, gp, sim_cfg, box)
    wall = time.perf_counter() - t0
    out_dir.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out_dir / "trajectory.csv")
    summary = traj.summary()
    summary.update(
        mode=sim_cfg.mode.value,
        eta_bar_used=math.sqrt(eta_sq),
        eta_bar_sq_used=eta_sq,
        wall_time=wall,
        config=cfg,
    )
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


# --- bound validation ------------------------------------------------------


def bound_check(section: dict, seed: int = 0) -> dict:
    """Synthetic RKHS disturbance, noisy samples, then |mu - d| <= eta on a test grid."""
    dim, n_out = section["dim"], section["n_out"]
    lo, hi = np.asarray(section["lower"], dtype=float), np.asarray(section["upper"], dtype=float)
    if lo.size != dim or hi.size != dim:
        raise ConfigError(f"[bound] lower/upper need {dim} entries")
    if section["centers"] < 1 or n_out < 1 or section["grid_points"] < 1:
        raise ConfigError("[bound] centers, n_out and grid_points must be positive")
    rng = np.random.default_rng(seed)
    spec = KernelSpec(section["lengthscale"])
    centers = latin_hypercube(lo, hi, section["centers"], rng)
    funcs, norms = [], []
    for _ in range(n_out):
        d, norm = synth_rkhs_function(spec, centers, section["coeff_scale"] * rng.standard_normal(section["centers"]))
        funcs.append(d)
        norms.append(norm)
    norms = np.array(norms)
    truth = lambda X: np.column_stack([d(X) for d in funcs])

    M = section["M"]
    X = latin_hypercube(lo, hi, M, rng)
    Y = truth(X) if M else np.zeros((0, n_out))
    Y = Y + rng.uniform(-section["sigma_v"], section["sigma_v"], size=Y.shape)
    B = np.maximum(section["B_scale"] * norms, 1e-12)
    model = fit(Dataset(X.reshape(M, dim), Y, section["sigma_v"]), spec, B)

    grid = latin_hypercube(lo, hi, section["grid_points"], np.random.default_rng(seed + 1))
    report = {
        "M": M,
        "grid_points": int(grid.shape[0]),
        "rkhs_norms": norms.tolist(),
        "B": B.tolist(),
        "beta": model.beta.tolist(),
    }
    if np.any(model.beta <= 0):
        report.update(invalid_bound=True, violations=int(grid.shape[0]), max_ratio=math.inf,
                      eta_bar_D=math.nan, eta_bar=math.nan, median_eta=math.nan)
        return report
    eb = error_bound_global(model, grid)
    mu, var = model.predict(grid)
    eta = np.sqrt(var * model.beta.sum())
    err = np.abs(mu - truth(grid))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(eta[:, None] > 0, err / eta[:, None], np.where(err > 0, np.inf, 0.0))
    report.update(
        invalid_bound=False,
        violations=int(np.sum(np.any(err > eta[:, None], axis=1))),
        max_ratio=float(np.max(ratio)),
        eta_bar_D=eb.eta_bar_D,
        eta_bar=eb.eta_bar,
        median_eta=float(np.median(eta)),
    )
    return report


# --- commands --------------------------------------------------------------


def _out_dir(cfg, override):
    return Path(override) if override else Path(cfg["output"]["dir"])


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["sim"]["seed"] = int(args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _prepare(args)
    out = _out_dir(cfg, args.out)
    summary = execute(cfg, out)
    logger.info(
        "min_h=%.6g tracking=%.6g infeasible=%d -> %s",
        summary["min_h"], summary["tracking_error_integral"], summary["infeasible_steps"], out,
    )
    return EXIT_OK


def _parse_values(param, text):
    items = [v.strip() for v in (text or "").split(",") if v.strip()]
    if not items:
        raise ConfigError("empty value list")
    sec, key = SWEEP_PARAMS[param]
    kind = SCHEMA[sec][key][0]
    vals = [_coerce(kind, v, f"--values {param}") for v in items]
    if param == "mode":
        for v in vals:
            try:
                FilterMode(v)
            except ValueError:
                raise ConfigError(f"unknown mode {v!r}") from None
    return items, vals


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {args.param!r}; choose from {sorted(SWEEP_PARAMS)}")
    cfg = _prepare(args)
    labels, vals = _parse_values(args.param, args.values)
    out = _out_dir(cfg, args.out)
    sec, key = SWEEP_PARAMS[args.param]
    rows, code = [], EXIT_OK
    for label, val in zip(labels, vals):
        run_cfg = copy.deepcopy(cfg)
        run_cfg[sec][key] = val
        if args.param == "eta_bar_sq":
            run_cfg["barrier"]["eta_bar_sq_source"] = "manual"
        try:
            s = execute(run_cfg, out / f"{args.param}_{label}")
            rows.append([label, s["min_h"], s["tracking_error_integral"], s["infeasible_steps"], s["saturated_steps"], "ok"])
        except (SimulationAbort, UnsafeInitialState, SingularInertiaError) as exc:
            logger.error("%s=%s aborted: %s", args.param, label, exc)
            rows.append([label, math.nan, math.nan, -1, -1, "abort"])
            code = EXIT_ABORT
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "min_h", "tracking_error_integral", "infeasible_steps", "saturated_steps", "status"])
        w.writerows(rows)
    return code


def cmd_validate_bound(args) -> int:
    cfg = _prepare(args)
    report = bound_check(cfg["bound"], cfg["sim"]["seed"])
    out = _out_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bound_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    if report["invalid_bound"]:
        logger.error("beta <= 0: B is too small for the data")
        return EXIT_BOUND
    logger.info("violations=%d max_ratio=%.4g", report["violations"], report["max_ratio"])
    return EXIT_OK if report["violations"] == 0 else EXIT_BOUND


def make_parser():
    ap = argparse.ArgumentParser(prog="gpcbf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, default=None, help="overrides [sim] seed")

    common(sub.add_parser("run", help="single closed-loop run"))
    sw = sub.add_parser("sweep", help="one run per parameter value, shared seed")
    common(sw)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, help="comma-separated list")
    common(sub.add_parser("validate-bound", help="check the GP error bound on a synthetic disturbance"))
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handler = {"run": cmd_run, "sweep": cmd_sweep, "validate-bound": cmd_validate_bound}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationAbort, UnsafeInitialState, SingularInertiaError) as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
