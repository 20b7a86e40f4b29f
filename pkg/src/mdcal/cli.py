"""Command-line pipeline: generate, train, calibrate, evaluate, select, verify, landscape.

Every command resolves its parameters as defaults < ``--config`` JSON <
explicit flags, hashes the resolved parameters, and writes a JSON report
under ``--out``. Reports are byte-identical across reruns with the same
config and seed except for the ``timestamp`` field.

Exit codes: 0 success, 2 input validation, 64 usage, 70 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import metrics, models, selection, theory_lab
from .env_data import (BundleParseError, SpecError, TwoBitEnvSpec, generate_setting_a, generate_setting_b,
                       load_bundle, load_spec, save_bundle, two_bit_bundle, GaussianEnvSpecA, GaussianEnvSpecB)

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 64, 70
SCHEMA_VERSION = 1

log = logging.getLogger("mdcal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# config and report plumbing

DEFAULTS = {
    "generate": {"setting": "two-bit", "alpha": [0.1], "beta": [0.05], "n": 1000, "spec": None,
                 "format": "csv", "name": "data"},
    "train": {"data": None, "family": "linear", "penalty": "none", "lam": 0.0, "base_loss": "cross_entropy",
              "lr": 0.1, "steps": 500, "batch_size": 512, "optimizer": "sgd", "init_scale": 1.0,
              "flag_smoothing": 0.0, "anneal_steps": 0, "drop_diagonal": False, "name": "model"},
    "calibrate": {"model": None, "data": None, "mode": "naive", "name": "calibration"},
    "evaluate": {"model": None, "data": None, "calibration": None, "bins": 10, "grid": 101,
                 "name": "evaluation"},
    "select": {"models": None, "data": None, "mode": "worst_case", "acc_threshold": 0.0, "bins": 10,
               "test": None, "name": "selection"},
    "verify": {"theorem": 1, "spec": None, "mode": "constraint_search", "starts": 50, "name": "verify"},
    "landscape": {"train_envs": ["0.1,0.05", "0.2,0.05"], "test_env": "0.9,0.05", "grid": 401,
                  "name": "landscape"},
}


def resolve(command: str, args: argparse.Namespace) -> dict:
    params = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise SpecError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise SpecError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise SpecError("config must be a JSON object")
        unknown = set(loaded) - set(params) - {"seed", "schema_version"}
        if unknown:
            raise SpecError(f"unknown config keys for {command}: {sorted(unknown)}")
        if loaded.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise SpecError(f"unsupported schema_version {loaded['schema_version']}")
        params.update({k: v for k, v in loaded.items() if k in params})
        if args.seed is None and "seed" in loaded:
            args.seed = int(loaded["seed"])
    for key in params:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    return params


def config_hash(command: str, params: dict, seed: int) -> str:
    blob = json.dumps({"command": command, "params": params, "seed": seed, "schema_version": SCHEMA_VERSION},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(out: Path, name: str, command: str, params: dict, seed: int, body: dict) -> Path:
    report = {"command": command, "config": params, "config_hash": config_hash(command, params, seed),
              "seed": seed, "schema_version": SCHEMA_VERSION,
              "timestamp": datetime.now(timezone.utc).isoformat(), "result": body}
    path = out / f"{name}.json"
    path.write_text(json.dumps(_clean(report), sort_keys=True, indent=2) + "\n")
    return path


def _write(out: Path, filename: str, text: str) -> Path:
    path = out / filename
    path.write_text(text)
    return path


def _load_model(path) -> models.TrainedModel:
    if path is None:
        raise SpecError("--model is required")
    try:
        return models.TrainedModel.from_json(Path(path).read_text())
    except FileNotFoundError as exc:
        raise SpecError(f"model file not found: {path}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise SpecError(f"model file {path} does not match the model schema: {exc}") from exc


def _load_data(path):
    if path is None:
        raise SpecError("--data is required")
    return load_bundle(path)


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise SpecError(f"expected 'alpha,beta', got {text!r}") from exc
    return a, b


_TWO_BIT_ID = re.compile(r"^a([0-9.eE+-]+)_b([0-9.eE+-]+)$")


def _two_bit_specs(env_ids) -> list[TwoBitEnvSpec] | None:
    out = []
    for eid in env_ids:
        m = _TWO_BIT_ID.match(eid)
        if m is None:
            return None
        out.append(TwoBitEnvSpec(float(m.group(1)), float(m.group(2))))
    return out


# --------------------------------------------------------------------------
# commands

def cmd_generate(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    setting = p["setting"]
    if setting == "two-bit":
        alphas, betas = list(np.atleast_1d(p["alpha"])), list(np.atleast_1d(p["beta"]))
        if len(alphas) != len(betas):
            raise SpecError("--alpha and --beta need the same number of values")
        bundle = two_bit_bundle([TwoBitEnvSpec(float(a), float(b)) for a, b in zip(alphas, betas)], int(p["n"]), seed)
    elif setting in ("a", "b"):
        if p["spec"] is None:
            raise SpecError(f"--setting {setting} needs --spec <json file>")
        spec = load_spec(p["spec"])
        want = GaussianEnvSpecA if setting == "a" else GaussianEnvSpecB
        if not isinstance(spec, want):
            raise SpecError(f"spec file does not describe setting {setting}")
        gen = generate_setting_a if setting == "a" else generate_setting_b
        bundle = gen(spec, int(p["n"]), seed)
    else:
        raise SpecError(f"unknown setting {setting!r}")
    path = save_bundle(bundle, out / f"{p['name']}.{p['format']}", p["format"])
    _write(out, f"{p['name']}.config.json", json.dumps(_clean({"command": "generate", "config": p, "seed": seed}),
                                                       sort_keys=True, indent=2) + "\n")
    body = {"path": path.name, "env_ids": bundle.env_ids, "rows": sum(e.n for e in bundle),
            "feature_dim": bundle.feature_dim}
    return body, f"wrote {body['rows']} rows in {len(bundle)} environments to {path}"


def cmd_train(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    bundle = _load_data(p["data"])
    obj = models.ObjectiveSpec(p["base_loss"], p["penalty"], float(p["lam"]))
    cfg = models.TrainConfig(lr=float(p["lr"]), steps=int(p["steps"]), batch_size=int(p["batch_size"]), seed=seed,
                             optimizer=p["optimizer"], init_scale=float(p["init_scale"]),
                             flag_smoothing=float(p["flag_smoothing"]), anneal_steps=int(p["anneal_steps"]),
                             drop_diagonal=bool(p["drop_diagonal"]))
    tm = models.train(bundle, obj, cfg, family=p["family"])
    _write(out, f"{p['name']}.json", tm.to_json())
    _write(out, f"{p['name']}.trace.csv", tm.trace_csv())
    total, base, pen = models.objective_terms(tm.model, bundle, obj)
    body = {"model_path": f"{p['name']}.json", "objective": total, "base_loss": base, "penalty": pen,
            "per_env_accuracy": {e.env_id: models.accuracy(tm.predict(e.features), e.labels) for e in bundle}
            if tm.model.family != "two_moment" else None}
    return body, f"trained {p['family']} ({p['penalty']}, lam={p['lam']}): objective {total:.6g}"


def cmd_calibrate(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    tm = _load_model(p["model"])
    bundle = _load_data(p["data"])
    per_env = [(tm.predict(e.features), e.labels) for e in bundle]
    mode = p["mode"]
    converged = True
    extra = {}
    if mode == "naive":
        cmap = cal.calibrate_naive(per_env)
    elif mode == "robust":
        fit = cal.calibrate_robust(per_env)
        cmap, converged = fit.map, fit.converged
        extra = {"objective": fit.objective, "lower_bound": fit.lower_bound, "iterations": fit.iterations}
    elif mode == "platt":
        f = np.concatenate([f for f, _ in per_env])
        y = np.concatenate([y for _, y in per_env])
        cmap = cal.fit_platt(f, y)
    else:
        raise SpecError(f"unknown calibration mode {mode!r}")
    _write(out, f"{p['name']}.map.json", json.dumps(_clean(cmap.to_dict()), sort_keys=True) + "\n")
    env_mse = {e.env_id: cal.mse(cmap, f, y) for e, (f, y) in zip(bundle, per_env)}
    body = {"mode": mode, "map_path": f"{p['name']}.map.json", "converged": converged,
            "per_env_mse": env_mse, "worst_env_mse": max(env_mse.values()), **extra}
    msg = f"{mode} calibration: worst-env MSE {body['worst_env_mse']:.6g}"
    if not converged:
        msg += " (WARNING: unconverged)"
    return body, msg


def cmd_evaluate(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    tm = _load_model(p["model"])
    bundle = _load_data(p["data"])
    cmap = None
    if p["calibration"] is not None:
        cmap = cal.map_from_dict(json.loads(Path(p["calibration"]).read_text()))
    preds = {}
    for e in bundle:
        f = tm.predict(e.features)
        preds[e.env_id] = (f if cmap is None else cal.apply(cmap, f), e.labels)
    bins = int(p["bins"])
    body = metrics.metric_report(preds, bins)
    body["accuracy"] = {k: models.accuracy(f, y) for k, (f, y) in preds.items()}
    f_all = np.concatenate([f for f, _ in preds.values()])
    y_all = np.concatenate([y for _, y in preds.values()])
    _write(out, f"{p['name']}.reliability.csv", metrics.reliability_bins(f_all, y_all, bins).to_csv())
    body["reliability_path"] = f"{p['name']}.reliability.csv"
    specs = _two_bit_specs(bundle.env_ids)
    if specs is not None and len(specs) == 2:
        land = models.two_bit_population_penalties(specs, models.landscape_grid(int(p["grid"])))
        _write(out, f"{p['name']}.landscape.csv", models.landscape_csv(land))
        body["landscape_path"] = f"{p['name']}.landscape.csv"
    return body, f"mean ECE {body['mean_ece']:.4g}, max ECE {body['max_ece']:.4g}, CLOvE {body['clove']:.4g}"


def cmd_select(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    paths = p["models"]
    if not paths:
        raise SpecError("--models needs at least one model file")
    pool = [_load_model(m) for m in paths]
    ids = [Path(m).stem for m in paths]
    val = _load_data(p["data"])
    if p["mode"] == "worst_case":
        rep = selection.select_worst_case_ece(pool, val, int(p["bins"]), ids)
    elif p["mode"] == "threshold":
        rep = selection.select_threshold_avg_ece(pool, val, float(p["acc_threshold"]), int(p["bins"]), ids)
    else:
        raise SpecError(f"unknown selection mode {p['mode']!r}")
    _write(out, f"{p['name']}.csv", rep.to_csv())
    body = rep.to_dict()
    if p["test"] is not None and rep.chosen_index is not None:
        test = load_bundle(p["test"])
        body["ood"] = selection.evaluate_ood(pool[rep.chosen_index], test, rep.maps[rep.chosen_index], int(p["bins"]))
    msg = f"selected {rep.chosen}" if rep.chosen is not None else f"no selection: {rep.diagnostic}"
    return body, msg


def cmd_verify(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    theorem = int(p["theorem"])
    spec = load_spec(p["spec"]) if p["spec"] is not None else None
    if theorem == 1:
        spec = spec if spec is not None else theory_lab.random_spec_a(seed=seed)
        if not isinstance(spec, GaussianEnvSpecA):
            raise SpecError("theorem 1 needs a setting-a spec")
        rep = theory_lab.verify_theorem1(spec, p["mode"], seed, num_starts=int(p["starts"]))
    elif theorem == 2:
        spec = spec if spec is not None else theory_lab.random_spec_b(seed=seed)
        if not isinstance(spec, GaussianEnvSpecB):
            raise SpecError("theorem 2 needs a setting-b spec")
        rep = theory_lab.verify_theorem2(spec, int(p["starts"]), seed)
    else:
        raise SpecError("--theorem must be 1 or 2")
    body = rep.to_dict()
    return body, f"theorem {theorem}: passes={rep.passes}"


def cmd_landscape(p: dict, seed: int, out: Path) -> tuple[dict, str]:
    train_envs = [TwoBitEnvSpec(*_pair(t)) for t in p["train_envs"]]
    test_env = TwoBitEnvSpec(*_pair(p["test_env"]))
    n = int(p["grid"])
    body = models.two_bit_landscape_analysis(train_envs, test_env, n_grid=n)
    if len(train_envs) == 2:
        land = models.two_bit_population_penalties(train_envs, models.landscape_grid(n))
        _write(out, f"{p['name']}.csv", models.landscape_csv(land))
        body["grid_path"] = f"{p['name']}.csv"
    return body, (f"MMCE zeros explained: {body['mmce_zeros_explained']}; "
                  f"OPT_IRMv1 {body['opt_irmv1']}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate,
            "select": cmd_select, "verify": cmd_verify, "landscape": cmd_landscape}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so a subcommand does not reset a value given before it
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with command parameters")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")

    parser = _Parser(prog="mdcal", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="sample environment data")
    g.add_argument("--setting", choices=["two-bit", "a", "b"])
    g.add_argument("--alpha", type=float, nargs="+")
    g.add_argument("--beta", type=float, nargs="+")
    g.add_argument("--n", type=int)
    g.add_argument("--spec")
    g.add_argument("--format", choices=["csv", "json"])
    g.add_argument("--name")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data")
    t.add_argument("--family", choices=sorted(models.FAMILIES))
    t.add_argument("--penalty", choices=["none", "clove", "irmv1"])
    t.add_argument("--lam", type=float)
    t.add_argument("--base-loss", dest="base_loss", choices=["cross_entropy", "squared"])
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--optimizer", choices=["sgd", "adagrad", "adam"])
    t.add_argument("--init-scale", dest="init_scale", type=float)
    t.add_argument("--flag-smoothing", dest="flag_smoothing", type=float)
    t.add_argument("--anneal-steps", dest="anneal_steps", type=int)
    t.add_argument("--drop-diagonal", dest="drop_diagonal", action="store_const", const=True)
    t.add_argument("--name")

    c = sub.add_parser("calibrate", parents=[common], help="fit a post-hoc calibration map")
    c.add_argument("--model")
    c.add_argument("--data")
    c.add_argument("--mode", choices=["naive", "robust", "platt"])
    c.add_argument("--name")

    e = sub.add_parser("evaluate", parents=[common], help="score a model per environment")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--calibration")
    e.add_argument("--bins", type=int)
    e.add_argument("--grid", type=int, help="landscape grid size for two-bit data")
    e.add_argument("--name")

    s = sub.add_parser("select", parents=[common], help="select among trained models")
    s.add_argument("--models", nargs="+")
    s.add_argument("--data")
    s.add_argument("--mode", choices=["worst_case", "threshold"])
    s.add_argument("--acc-threshold", dest="acc_threshold", type=float)
    s.add_argument("--bins", type=int)
    s.add_argument("--test")
    s.add_argument("--name")

    v = sub.add_parser("verify", parents=[common], help="numerically check a theorem on a spec")
    v.add_argument("--theorem", type=int, choices=[1, 2])
    v.add_argument("--spec")
    v.add_argument("--mode", choices=["constraint_search", "train_clove"])
    v.add_argument("--starts", type=int)
    v.add_argument("--name")

    la = sub.add_parser("landscape", parents=[common], help="two-bit penalty landscape")
    la.add_argument("--train-envs", dest="train_envs", nargs="+", metavar="ALPHA,BETA")
    la.add_argument("--test-env", dest="test_env", metavar="ALPHA,BETA")
    la.add_argument("--grid", type=int)
    la.add_argument("--name")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for key in ("seed", "config", "out"):
            setattr(args, key, getattr(args, key, None))
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        params = resolve(args.command, args)
        seed = 0 if args.seed is None else args.seed
        out = Path(args.out if args.out is not None else ".")
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="ignore", under="ignore"):
            body, summary = COMMANDS[args.command](params, seed, out)
        path = write_report(out, params["name"] + ("_report" if args.command in ("train", "generate") else ""),
                            args.command, params, seed, body)
    # LinAlgError subclasses ValueError, so numeric failures go first
    except (models.TrainingError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, BundleParseError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(summary)
    print(f"report: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
