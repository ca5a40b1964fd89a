"""Command-line front end: ``gst-adjust {are,gen,estimate,design,simulate,power}``.

JSON documents go to stdout, bulk data to files.  Values in a ``--config``
JSON file fill in any flag not given on the command line.  Stochastic
commands take ``--seed`` or fall back to the ``GST_SEED`` environment
variable.  Exit status is 0 on success, 1 on a runtime failure and 2 on a
usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dgm, estimators, gsd, precision, schemas, trial
from .glm import GLMError

DAYS_PER_YEAR = trial.DAYS_PER_YEAR
ESTIMATOR_KINDS = tuple(estimators.ESTIMATORS)

FIG_ARE_W_LEVELS = (0.1, 0.25)
FIG_ARE_L_LEVELS = (0.25, 0.1)
FIG_GRID_STEP = 0.01


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# -- option handling -------------------------------------------------------------

DEFAULTS = {
    "are": {"arm": None, "pa": 0.5, "ratio_r": False},
    "gen": {"enroll_rate": 140.0, "reset_effect_prob": None, "reset_noise_prob": None},
    "estimate": {"time": None, "estimator": "tmle", "d_l_days": 30.0, "d_y_days": 180.0, "no_summary": False},
    "design": {
        "k": 5, "alpha": 0.025, "beta": 0.2, "delta_alt": dgm.EFFECT_SIZE, "n_draws": gsd.DEFAULT_DRAWS,
        "m_trials": 2000, "workers": 1, "information": "empirical", "estimator": "tmle",
        "d_l_days": 30.0, "d_y_days": 180.0, "enroll_rate": 140.0,
    },
    "simulate": {
        "k": 5, "alpha": 0.025, "beta": 0.2, "delta_alt": dgm.EFFECT_SIZE, "n_draws": gsd.DEFAULT_DRAWS,
        "n_trials": 5000, "m_trials": 2000, "workers": 1, "information": "empirical", "estimator": "tmle",
        "d_l_days": 30.0, "d_y_days": 180.0, "enroll_rate": 140.0, "setting": "progn_W",
    },
    "power": {
        "k": 5, "alpha": 0.025, "beta": 0.2, "delta_alt": dgm.EFFECT_SIZE, "target_power": 0.8,
        "n_trials": 2000, "m_trials": 1000, "workers": 1, "estimator": "tmle", "bracket": [100, 1000],
        "step": 10, "d_l_days": 30.0, "d_y_days": 180.0, "enroll_rate": 140.0, "setting": "progn_W",
    },
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_seed(p):
    p.add_argument("--seed", type=int, help="top-level seed (falls back to $GST_SEED)")


def _add_delay(p, with_rate=True):
    p.add_argument("--d-l-days", type=float, help="delay until L is observed, in days (default 30)")
    p.add_argument("--d-y-days", type=float, help="delay until Y is observed, in days (default 180)")
    if with_rate:
        p.add_argument("--enroll-rate", type=float, help="participants per year (default 140)")


def _add_spending(p):
    p.add_argument("--k", type=int, help="number of stages (default 5)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--delta-alt", type=float)


def _add_dgm(p):
    p.add_argument("--setting", choices=dgm.SETTINGS)
    p.add_argument("--estimator", choices=ESTIMATOR_KINDS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gst-adjust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", type=Path, help="JSON file of option values")
        return p

    p = add("are", "relative efficiency and sample-size reduction from R-squared summaries")
    p.add_argument("--r2w", type=float)
    p.add_argument("--r2lw", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--py", type=float)
    p.add_argument("--pl", type=float)
    p.add_argument("--arm", type=int, choices=(0, 1), help="treatment-specific mean of this arm")
    p.add_argument("--pa", type=float, help="randomization probability of --arm (default 0.5)")
    p.add_argument("--ratio-r", action="store_true", default=None, help="only print r(p_y, p_l)")

    p = add("gen", "write one simulated trial as CSV")
    _add_dgm(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--enroll-rate", type=float)
    p.add_argument("--reset-effect-prob", type=float)
    p.add_argument("--reset-noise-prob", type=float)
    _add_seed(p)

    p = add("estimate", "estimate the treatment effect from a trial CSV")
    p.add_argument("--data", type=Path)
    p.add_argument("--time", type=float, help="analysis time in years (default: all outcomes observed)")
    p.add_argument("--estimator", choices=ESTIMATOR_KINDS)
    p.add_argument("--no-summary", action="store_true", default=None, help="skip the plug-in R-squared summary")
    _add_delay(p, with_rate=False)

    p = add("design", "solve efficacy, futility and decision boundaries")
    _add_spending(p)
    p.add_argument("--interim-info", type=_floats, help="interim information levels (canonical model)")
    p.add_argument("--decision-info", type=_floats, help="decision information levels (canonical model)")
    p.add_argument("--model", type=Path, help="joint statistic model JSON")
    _add_dgm(p)
    p.add_argument("--n-max", type=int)
    p.add_argument("--m-trials", type=int)
    p.add_argument("--information", choices=("empirical", "estimated"))
    p.add_argument("--n-draws", type=int)
    p.add_argument("--workers", type=int)
    _add_delay(p)
    _add_seed(p)

    p = add("simulate", "operating characteristics of a design by simulation")
    _add_spending(p)
    _add_dgm(p)
    p.add_argument("--n-max", type=int)
    p.add_argument("--n-trials", type=int)
    p.add_argument("--m-trials", type=int)
    p.add_argument("--information", choices=("empirical", "estimated"))
    p.add_argument("--n-draws", type=int)
    p.add_argument("--design", type=Path, help="reuse the joint model from a design JSON")
    p.add_argument("--out", type=Path, help="per-trial results plus a summary row (CSV)")
    p.add_argument("--emit-figure-data", type=Path, metavar="DIR", help="write relative-efficiency grids as CSV")
    p.add_argument("--workers", type=int)
    _add_delay(p)
    _add_seed(p)

    p = add("power", "smallest n_max reaching the target power")
    _add_spending(p)
    _add_dgm(p)
    p.add_argument("--target-power", type=float)
    p.add_argument("--n-trials", type=int, help="trials per probe")
    p.add_argument("--m-trials", type=int)
    p.add_argument("--bracket", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--step", type=int)
    p.add_argument("--probes-out", type=Path, help="CSV of every probed n_max and its power")
    p.add_argument("--workers", type=int)
    _add_delay(p)
    _add_seed(p)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS.get(args.command, {}))
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise RuntimeFailure(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        known = set(vars(args)) - {"command", "config"}
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            opts[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        opts[key] = value
    opts["command"] = args.command
    return opts


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _seed(opts) -> int:
    seed = opts.get("seed")
    if seed is None:
        env = os.environ.get("GST_SEED")
        if env is None:
            raise UsageError("a seed is required: pass --seed or set GST_SEED")
        try:
            seed = int(env)
        except ValueError as exc:
            raise UsageError(f"GST_SEED is not an integer: {env!r}") from exc
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    return seed


def _delay(opts) -> trial.DelayConfig:
    try:
        return trial.DelayConfig(
            d_l=float(opts["d_l_days"]) / DAYS_PER_YEAR,
            d_y=float(opts["d_y_days"]) / DAYS_PER_YEAR,
            enroll_rate=float(opts.get("enroll_rate", 140.0)),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _spending(opts) -> gsd.ErrorSpendingSpec:
    try:
        return gsd.ErrorSpendingSpec(
            k_stages=int(opts["k"]), alpha=float(opts["alpha"]), beta=float(opts["beta"]),
            delta_alt=float(opts["delta_alt"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _dgm_config(opts, delta: float) -> dgm.DgmConfig:
    try:
        cfg = dgm.DgmConfig(opts["setting"], float(delta))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _workers(opts) -> int:
    w = int(opts.get("workers") or 1)
    if w < 1:
        raise UsageError("--workers must be at least 1")
    return w


def _check_sizes(opts) -> None:
    if opts.get("m_trials") is not None and int(opts["m_trials"]) < 1000:
        raise UsageError("--m-trials must be at least 1000")
    for key in ("n_max", "n_trials", "n_draws"):
        if opts.get(key) is not None and int(opts[key]) < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be positive")


def _emit(doc: dict, schema: str) -> None:
    schemas.validate(doc, schema)
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------


def cmd_are(opts) -> int:
    _require(opts, "py", "pl")
    py, pl = float(opts["py"]), float(opts["pl"])
    if not (0 < py <= 1 and 0 < pl <= 1):
        raise UsageError("--py and --pl must lie in (0, 1]")
    if py > pl:
        raise UsageError("--py cannot exceed --pl (Y is only observed where L is)")
    if opts["ratio_r"]:
        try:
            r = precision.ratio_r(py, pl)
        except precision.PrecisionError as exc:
            raise UsageError(str(exc)) from exc
        _emit({"ratio_r": r, "inputs": {"py": py, "pl": pl}}, "are")
        return 0

    _require(opts, "r2w", "r2lw")
    r2w, r2lw = float(opts["r2w"]), float(opts["r2lw"])
    if not (0 <= r2w <= 1 and 0 <= r2lw <= 1):
        raise UsageError("R-squared values must lie in [0, 1]")
    inputs = {"r2w": r2w, "r2lw": r2lw, "py": py, "pl": pl}
    arm = opts.get("arm")
    try:
        if arm is None:
            _require(opts, "gamma")
            gamma = float(opts["gamma"])
            if gamma < 0:
                raise UsageError("--gamma must be non-negative")
            inputs["gamma"] = gamma
            are = precision.are_ate(precision.PrecisionSummary(r2w, r2lw, gamma), py, pl)
            ratio = None
        else:
            pa = float(opts["pa"])
            if r2w + r2lw > 1:
                raise UsageError("per-arm R-squared values must sum to at most 1")
            inputs["pa"] = pa
            arm_p = precision.ArmPrecision(r2w, r2lw, 1.0 - r2w - r2lw)
            summary = precision.PrecisionSummary(0.0, 0.0, 0.0, {int(arm): arm_p})
            are = precision.are_arm(summary, int(arm), pa, py, pl)
            ratio = precision.ratio_r(py, pl) if py < pl else None
    except precision.PrecisionError as exc:
        raise UsageError(str(exc)) from exc
    doc = {"are": are, "aerss": precision.aerss(are), "arm": arm, "inputs": inputs}
    if arm is not None:
        doc["ratio_r"] = ratio
    _emit(doc, "are")
    return 0


def cmd_gen(opts) -> int:
    _require(opts, "setting", "delta", "n", "out")
    seed = _seed(opts)
    n = int(opts["n"])
    if n < 1:
        raise UsageError("--n must be positive")
    cfg = _dgm_config(opts, opts["delta"])
    overrides = {k: float(opts[k]) for k in ("reset_effect_prob", "reset_noise_prob") if opts.get(k) is not None}
    if overrides:
        try:
            cfg = dgm.DgmConfig.from_dict({**json.loads(cfg.to_json()), **overrides})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    schemas.validate(json.loads(cfg.to_json()), "dgm_config")
    data = dgm.sample_trial(dgm.default_population(), n, cfg, seed, float(opts["enroll_rate"]))
    try:
        trial.write_csv(data, opts["out"])
    except OSError as exc:
        raise RuntimeFailure(f"cannot write {opts['out']}: {exc}") from exc
    return 0


def cmd_estimate(opts) -> int:
    _require(opts, "data")
    try:
        data = trial.read_csv(opts["data"])
    except OSError as exc:
        raise RuntimeFailure(f"cannot read {opts['data']}: {exc}") from exc
    except ValueError as exc:
        raise RuntimeFailure(f"malformed trial CSV: {exc}") from exc
    if opts["time"] is None:
        snap = trial.complete_snapshot(data)
    else:
        t = float(opts["time"])
        enrolled = data.subset(data.enroll_time <= t)
        if len(enrolled) == 0:
            raise RuntimeFailure("nobody is enrolled by the analysis time")
        snap = trial.snapshot_at(enrolled, t, _delay({**opts, "enroll_rate": 140.0}))
    result = estimators.estimate(snap, opts["estimator"])
    est = result.to_dict()
    est["wald"] = estimators.wald_statistic(result)
    summary, are = None, None
    if not opts["no_summary"]:
        try:
            ps = precision.plug_in_summary(snap)
            summary = ps.to_dict()
            are = precision.are_ate(ps, snap.p_y, snap.p_l)
        except (precision.PrecisionError, GLMError, estimators.EstimationError):
            pass
    doc = {
        "estimate": est,
        "snapshot": {"analysis_time": snap.analysis_time, "n": snap.n, "p_y": snap.p_y, "p_l": snap.p_l},
        "precision": summary,
        "are": are,
    }
    _emit(doc, "estimate")
    return 0


def _model_from_file(path) -> gsd.JointStatisticModel:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise RuntimeFailure(f"cannot read {path}: {exc}") from exc
    obj = obj.get("model", obj)
    try:
        return gsd.JointStatisticModel.from_dict(obj)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid model in {path}: {exc}") from exc


def cmd_design(opts) -> int:
    canonical = opts.get("interim_info") is not None or opts.get("decision_info") is not None
    modes = sum([canonical, opts.get("model") is not None, opts.get("n_max") is not None])
    if modes != 1:
        raise UsageError("give exactly one of --interim-info/--decision-info, --model, or --setting/--n-max")
    dgm_doc, n_max, kind = None, None, None
    seed = 0
    if canonical:
        _require(opts, "interim_info", "decision_info")
        interim, decision = opts["interim_info"], opts["decision_info"]
        if len(decision) != len(interim) + 1:
            raise UsageError("need one more decision level than interim levels")
        try:
            model = gsd.canonical_model(interim, decision)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        opts = {**opts, "k": len(decision)}
        seed = opts["seed"] if opts.get("seed") is not None else 0
    elif opts.get("model") is not None:
        model = _model_from_file(opts["model"])
        opts = {**opts, "k": model.k_stages}
        seed = opts["seed"] if opts.get("seed") is not None else 0
    else:
        _require(opts, "setting", "n_max")
        seed = _seed(opts)
        kind, n_max = opts["estimator"], int(opts["n_max"])
        cfg = _dgm_config(opts, 0.0)
        dgm_doc = json.loads(cfg.to_json())
        _check_sizes(opts)
        model = gsd.estimate_joint_covariance(
            cfg, n_max, _spending(opts), kind, int(opts["m_trials"]), seed, _workers(opts),
            delay=_delay(opts), information=opts["information"],
        )
    spec = _spending(opts)
    boundaries = gsd.solve_boundaries(model, spec, n_draws=int(opts["n_draws"]), seed=int(seed))
    doc = {
        "spec": spec.to_dict(),
        "model": model.to_dict(),
        "boundaries": boundaries.to_dict(),
        "dgm": dgm_doc,
        "estimator": kind,
        "n_max": n_max,
    }
    _emit(doc, "design")
    return 0


TRIAL_COLUMNS = ("row", "scenario", "trial", "stop_stage", "reject", "n_enrolled", "reason", "failed")
SUMMARY_COLUMNS = ("estimator", "setting", "n_max", "type_i", "power", "ess_null", "ess_alt")


def write_simulation_csv(path, run: gsd.DesignRun) -> None:
    """Per-trial rows followed by one summary row in the operating-characteristics layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_COLUMNS + SUMMARY_COLUMNS)
        blank = [""] * len(SUMMARY_COLUMNS)
        for scenario, outcomes in (("null", run.outcomes_null), ("alt", run.outcomes_alt)):
            for i, o in enumerate(outcomes):
                writer.writerow(
                    ["trial", scenario, i, o.stop_stage, int(o.reject), o.n_enrolled, o.reason, int(o.failed)] + blank
                )
        oc = run.oc
        writer.writerow(
            ["summary"] + [""] * (len(TRIAL_COLUMNS) - 1)
            + [oc.estimator_kind, oc.setting, oc.n_max, repr(oc.type_i), repr(oc.power),
               repr(oc.ess_null), repr(oc.ess_alt)]
        )


def _unit_grid(step: float = FIG_GRID_STEP) -> np.ndarray:
    n = int(round(1 / step))
    return np.arange(1, n + 1) / n


def write_figure_data(directory) -> list[Path]:
    """Relative-efficiency grids: ARE against p_y, ARE against p_y/p_l, and r over (p_l, p_y)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid = _unit_grid()
    paths = []

    path = directory / "are_vs_py.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["r2_w", "gamma", "p_y", "are"])
        for r2w in FIG_ARE_W_LEVELS:
            for gamma in (0.0, r2w, 2 * r2w):
                s = precision.PrecisionSummary(r2w, 0.0, gamma)
                for py in grid:
                    writer.writerow([r2w, gamma, repr(float(py)), repr(precision.are_ate(s, float(py), 1.0))])
    paths.append(path)

    path = directory / "are_vs_py_over_pl.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["r2_l_given_w", "py_over_pl", "are"])
        for r2lw in FIG_ARE_L_LEVELS:
            s = precision.PrecisionSummary(0.0, r2lw, 0.0)
            for ratio in grid:
                writer.writerow([r2lw, repr(float(ratio)), repr(precision.are_ate(s, float(ratio), 1.0))])
    paths.append(path)

    path = directory / "ratio_r.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p_l", "p_y", "r"])
        for pl in grid:
            for py in grid[grid < pl - 1e-12]:
                writer.writerow([repr(float(pl)), repr(float(py)), repr(precision.ratio_r(float(py), float(pl)))])
    paths.append(path)
    return paths


def cmd_simulate(opts) -> int:
    run_sim = opts.get("out") is not None or opts.get("n_max") is not None
    if opts.get("emit_figure_data") is not None:
        try:
            write_figure_data(opts["emit_figure_data"])
        except OSError as exc:
            raise RuntimeFailure(f"cannot write figure data: {exc}") from exc
        if not run_sim:
            return 0
    _require(opts, "setting", "n_max", "out")
    seed = _seed(opts)
    model = _model_from_file(opts["design"]) if opts.get("design") is not None else None
    spec = _spending(opts)
    if model is not None and model.k_stages != spec.k_stages:
        raise UsageError("design file has a different number of stages")
    _check_sizes(opts)
    run = gsd.run_design(
        _dgm_config(opts, 0.0), spec, opts["estimator"], int(opts["n_max"]),
        n_trials=int(opts["n_trials"]), seed=seed, workers=_workers(opts), m_trials=int(opts["m_trials"]),
        delay=_delay(opts), model=model, n_draws=int(opts["n_draws"]), information=opts["information"],
    )
    try:
        write_simulation_csv(opts["out"], run)
    except OSError as exc:
        raise RuntimeFailure(f"cannot write {opts['out']}: {exc}") from exc
    doc = run.oc.to_dict()
    _emit(doc, "operating_characteristics")
    return 0


def cmd_power(opts) -> int:
    _require(opts, "setting")
    seed = _seed(opts)
    lo, hi = (int(v) for v in opts["bracket"])
    if not 0 < lo < hi or int(opts["step"]) < 1:
        raise UsageError("invalid --bracket/--step")
    if not 0 < float(opts["target_power"]) < 1:
        raise UsageError("--target-power must lie in (0, 1)")
    n_max, probes = gsd.search_n_max(
        _dgm_config(opts, 0.0), _spending(opts), opts["estimator"], float(opts["target_power"]),
        n_trials_per_probe=int(opts["n_trials"]), seed=seed, workers=_workers(opts),
        m_trials=int(opts["m_trials"]), bracket=(lo, hi), step=int(opts["step"]), delay=_delay(opts),
    )
    if opts.get("probes_out") is not None:
        try:
            with open(opts["probes_out"], "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["n_max", "power"])
                for n, pw in probes:
                    writer.writerow([n, repr(float(pw))])
        except OSError as exc:
            raise RuntimeFailure(f"cannot write {opts['probes_out']}: {exc}") from exc
    sys.stdout.write(f"{n_max}\n")
    return 0


COMMANDS = {
    "are": cmd_are,
    "gen": cmd_gen,
    "estimate": cmd_estimate,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "power": cmd_power,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"gst-adjust {args.command}: {exc}", file=sys.stderr)
        return 2
    except (
        RuntimeFailure,
        trial.SnapshotError,
        estimators.EstimationError,
        GLMError,
        gsd.DesignError,
        gsd.NotPositiveDefiniteError,
        precision.PrecisionError,
        OSError,
    ) as exc:
        print(f"gst-adjust {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
