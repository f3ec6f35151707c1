"""Command-line harness: gen-data, pretrain, adapt, continual, report.

Each command merges its defaults, an optional ``--config`` file (JSON or YAML)
and ``--key value`` overrides into one resolved configuration, writes it to
``<out>/resolved_config.json`` before doing any work, and can be re-run from
that file alone. Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .adapt import AdaptationConfig, AdaptationState, run_continual, run_stream
from .baselines import BASELINE_KINDS, BaselineSpec, make_baseline
from .data import SyntheticTask, generate_benchmark, load_manifest, perturb
from .metrics import aggregate, read_records, write_records, write_table
from .segmodel import ConfigurationError, ModelConfig, load_checkpoint, save_checkpoint, state_hash
from .training import pretrain_source

logger = logging.getLogger("a3tta")

OUTPUT_ROOT_ENV = "A3TTA_OUTPUT_ROOT"
METHODS = ("a3tta",) + BASELINE_KINDS
NOISE_KINDS = ("none", "rician", "motion_blur")

_COMMON = {"seed": 0, "out": None, "log_level": "INFO"}
_ADAPT = {
    "checkpoint": None, "data": None, "domains": None,
    "method": "a3tta", "filter": "ccd", "ema": "adaptive",
    "noise": "none", "noise_sigma": 0.05, "noise_k": 12,
    "bank_capacity": 40, "beta": 5.0, "gamma": 1.0, "sem_weight": 1.0,
    "learning_rate": 1e-4, "batch_size": 10, "epsilon": 1e-5, "ema_alpha": 0.99,
    "refresh_bank_features": False, "student_bn_mode": "batch", "teacher_bn_mode": "running",
    "mc_passes": 10, "tent_lr": 1e-4, "trainable": "bn_affine",
}
DEFAULTS = {
    "gen-data": {"n_per_domain": 200, "n_train": 300, "n_val": 60, "image_size": 64,
                 "num_classes": 4},
    "pretrain": {"data": None, "epochs": 50, "lr": 1e-3, "batch_size": 10, "base_width": 16,
                 "bottleneck_channels": 32, "dropout": 0.1},
    "adapt": dict(_ADAPT),
    "continual": dict(_ADAPT, rounds=2, reset_bank_between_domains=False),
    "report": {"runs": []},
}
_PATH_KEYS = ("out", "data", "checkpoint")
# keys that must agree between runs merged by `report`
_COMPARABLE_KEYS = ("command", "data", "domains", "noise", "noise_sigma", "noise_k", "seed",
                    "batch_size", "rounds")


class UsageError(Exception):
    """Bad command line or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"--{key} expects a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"--{key} expects a {type(default).__name__}, got {raw!r}") from None
    if isinstance(default, list) or key == "domains":
        return [s for s in raw.split(",") if s]
    if default is None and raw.lower() in ("none", "null"):
        return None
    return raw


def _parse_overrides(tokens: list[str]) -> dict:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            value = tokens[i + 1]
            i += 2
        else:
            value = "true"
            i += 1
        out[key.replace("-", "_")] = value
    return out


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid JSON/YAML: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a key-value mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _output_root() -> Path | None:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else None


def resolve_config(command: str, file_cfg: dict, overrides: dict) -> dict:
    """defaults <- config file <- command line, with paths made absolute."""
    defaults = dict(_COMMON, **DEFAULTS[command])
    cfg = dict(defaults)
    file_cmd = file_cfg.pop("command", command)
    if file_cmd != command:
        raise UsageError(f"config file is for command {file_cmd!r}, not {command!r}")
    for source in (file_cfg, overrides):
        for key, value in source.items():
            if key not in defaults:
                raise UsageError(f"unknown key {key!r} for command {command!r}")
            cfg[key] = _coerce(key, value, defaults[key])
    if cfg["out"] is None:
        cfg["out"] = f"runs/{command}"
    out = Path(cfg["out"])
    root = _output_root()
    if root is not None and not out.is_absolute():
        out = root / out
    cfg["out"] = str(out.resolve())
    for key in _PATH_KEYS[1:]:
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    if command == "report":
        cfg["runs"] = [str(Path(r).resolve()) for r in cfg["runs"]]
    return {"command": command, **cfg}


def _adaptation_config(cfg: dict) -> AdaptationConfig:
    return AdaptationConfig(
        bank_capacity=cfg["bank_capacity"], beta=cfg["beta"], gamma=cfg["gamma"],
        sem_weight=cfg["sem_weight"], learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"], epsilon=cfg["epsilon"], filter_mode=cfg["filter"],
        ema_mode=cfg["ema"], ema_alpha=cfg["ema_alpha"],
        refresh_bank_features=cfg["refresh_bank_features"],
        student_bn_mode=cfg["student_bn_mode"], teacher_bn_mode=cfg["teacher_bn_mode"],
        mc_passes=cfg["mc_passes"],
        reset_bank_between_domains=cfg.get("reset_bank_between_domains", False),
        seed=cfg["seed"])


def _validate(cfg: dict):
    """Build every config object once so bad values fail before any compute."""
    cmd = cfg["command"]
    try:
        if cmd in ("adapt", "continual"):
            if cfg["method"] not in METHODS:
                raise UsageError(f"method must be one of {METHODS}")
            if cfg["noise"] not in NOISE_KINDS:
                raise UsageError(f"noise must be one of {NOISE_KINDS}")
            for key in ("checkpoint", "data"):
                if not cfg[key]:
                    raise UsageError(f"--{key} is required for {cmd}")
            _adaptation_config(cfg)
            if cfg["method"] != "a3tta":
                _baseline_spec(cfg)
            if cmd == "continual" and cfg["rounds"] < 1:
                raise UsageError("rounds must be >= 1")
        elif cmd == "pretrain":
            if not cfg["data"]:
                raise UsageError("--data is required for pretrain")
            if cfg["epochs"] < 1:
                raise UsageError("epochs must be >= 1")
        elif cmd == "gen-data":
            SyntheticTask(image_size=cfg["image_size"], num_classes=cfg["num_classes"])
        elif cmd == "report" and not cfg["runs"]:
            raise UsageError("report needs at least one run directory")
    except (ValueError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None


def _baseline_spec(cfg: dict) -> BaselineSpec:
    lr = cfg["tent_lr"] if cfg["method"] == "tent_like" else cfg["learning_rate"]
    return BaselineSpec(kind=cfg["method"], alpha=cfg["ema_alpha"], learning_rate=lr,
                        trainable=cfg["trainable"], batch_size=cfg["batch_size"], seed=cfg["seed"])


def build_adapter(cfg: dict, model):
    engine = _adaptation_config(cfg)
    if cfg["method"] == "a3tta":
        return AdaptationState(model, engine)
    return make_baseline(_baseline_spec(cfg), model, engine)


# ---------------------------------------------------------------- commands

def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg: dict) -> dict:
    task = SyntheticTask(image_size=cfg["image_size"], num_classes=cfg["num_classes"])
    generate_benchmark(cfg["out"], task, cfg["n_per_domain"], cfg["n_train"], cfg["n_val"],
                       cfg["seed"])
    return {"data": cfg["out"]}


def _load_split(data_dir: str, name: str):
    path = Path(data_dir) / f"{name}.jsonl"
    sets = load_manifest(path)
    if name not in sets:
        raise FileNotFoundError(f"manifest {path} has no domain {name!r}")
    return sets[name]


def cmd_pretrain(cfg: dict) -> dict:
    train = _load_split(cfg["data"], "source_train")
    val = _load_split(cfg["data"], "source_val")
    num_classes = int(max(train.masks.max(), val.masks.max())) + 1
    header = json.loads(Path(cfg["data"], "source_train.jsonl").read_text().splitlines()[0])
    num_classes = max(num_classes, int(header.get("num_classes", num_classes)))
    mcfg = ModelConfig(in_channels=train.images.shape[1], num_classes=num_classes,
                       base_width=cfg["base_width"], bottleneck_channels=cfg["bottleneck_channels"],
                       image_size=train.images.shape[-1], dropout=cfg["dropout"])
    model, history = pretrain_source(train, val, mcfg, cfg["epochs"], cfg["lr"],
                                     cfg["batch_size"], cfg["seed"])
    best = max(h["val_dice"] for h in history)
    out = Path(cfg["out"])
    save_checkpoint(out / "source.ckpt", model, extra={"best_val_dice": best})
    _write_json(out / "history.json", [{k: v for k, v in h.items() if k != "seconds"}
                                        for h in history])
    return {"checkpoint": str(out / "source.ckpt"), "best_val_dice": best,
            "first_val_dice": history[0]["val_dice"]}


def _target_streams(cfg: dict) -> list:
    sets = load_manifest(Path(cfg["data"]) / "manifest.jsonl")
    names = cfg["domains"] or sorted(d for d in sets if not d.startswith("source"))
    missing = [d for d in names if d not in sets]
    if missing:
        raise UsageError(f"unknown domains {missing}; manifest has {sorted(sets)}")
    streams = []
    for k, name in enumerate(names):
        ds = sets[name]
        if cfg["noise"] != "none":
            ds = perturb(ds, cfg["noise"], seed=cfg["seed"] + 1000 + k,
                         sigma=cfg["noise_sigma"], k=cfg["noise_k"])
        streams.append(ds)
    return streams


def _fresh_log(out: Path) -> Path:
    log = out / "run_log.jsonl"
    log.unlink(missing_ok=True)
    return log


def cmd_adapt(cfg: dict) -> dict:
    out = Path(cfg["out"])
    model, _ = load_checkpoint(cfg["checkpoint"])
    hash_before = state_hash(model)
    streams = _target_streams(cfg)
    log = _fresh_log(out)
    records, summary = [], {"method": cfg["method"], "domains": {}, "complete": True}
    for ds in streams:
        adapter = build_adapter(cfg, model)
        rep = run_stream(adapter, ds, log)
        records += rep.records
        summary["domains"][ds.domain] = rep.mean_dice
        summary["complete"] &= rep.complete
        bank = getattr(adapter, "bank", None)
        if bank is not None and len(bank):
            bank.export_snapshot(out / f"bank_{ds.domain}", {"domain": ds.domain})
    write_records(records, out / "records.jsonl")
    write_table(aggregate(records, ("domain",)), out / "metrics.csv")
    summary["mean_dice"] = float(np.mean(list(summary["domains"].values())))
    summary["checkpoint_hash_before"] = hash_before
    summary["checkpoint_hash_after"] = state_hash(model)
    return summary


def cmd_continual(cfg: dict) -> dict:
    out = Path(cfg["out"])
    model, _ = load_checkpoint(cfg["checkpoint"])
    streams = _target_streams(cfg)
    log = _fresh_log(out)
    adapter = build_adapter(cfg, model)
    rep = run_continual(adapter, streams, cfg["rounds"], log)
    records = [r for sub in rep.reports for r in sub.records]
    write_records(records, out / "records.jsonl")
    write_table(rep.table, out / "metrics.csv")
    return {"method": cfg["method"],
            "rounds": {str(r + 1): rep.round_mean_dice(r + 1) for r in range(cfg["rounds"])},
            "complete": all(s.complete for s in rep.reports)}


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_report(cfg: dict) -> dict:
    runs = []
    for run_dir in cfg["runs"]:
        d = Path(run_dir)
        rc_path = d / "resolved_config.json"
        if not rc_path.exists():
            raise FileNotFoundError(f"{d} has no resolved_config.json")
        rc = json.loads(rc_path.read_text())
        runs.append({"dir": d, "config": rc, "records": read_records(d / "records.jsonl"),
                     "log": _read_jsonl(d / "run_log.jsonl")})
    ref = runs[0]
    for other in runs[1:]:
        for key in _COMPARABLE_KEYS:
            a, b = ref["config"].get(key), other["config"].get(key)
            if a != b:
                raise UsageError(f"runs {ref['dir']} and {other['dir']} differ in {key!r}: "
                                 f"{a!r} vs {b!r}")
    domain_sets = [{(r.round, r.domain) for r in run["records"]} for run in runs]
    for run, doms in zip(runs[1:], domain_sets[1:]):
        if doms != domain_sets[0]:
            raise UsageError(f"run {run['dir']} covers different domains than {ref['dir']}: "
                             f"{sorted(doms)} vs {sorted(domain_sets[0])}")
    labels, seen = [], {}
    for run in runs:
        label = run["config"].get("method", run["dir"].name)
        seen[label] = seen.get(label, 0) + 1
        labels.append(label if seen[label] == 1 else f"{label}#{seen[label]}")

    keys = sorted(domain_sets[0])
    table, numbers = [], {}
    for rnd, dom in keys + [(None, "average")]:
        row = {"round": rnd, "domain": dom} if ref["config"]["command"] == "continual" else {"domain": dom}
        for label, run in zip(labels, runs):
            recs = [r for r in run["records"]
                    if dom == "average" or (r.domain == dom and r.round == rnd)]
            vals = np.asarray([r.mean_dice for r in recs])
            row[label] = f"{vals.mean():.4f}±{vals.std():.4f}"
            numbers.setdefault(label, {})[f"{rnd}/{dom}"] = {"mean": float(vals.mean()),
                                                             "std": float(vals.std())}
        table.append(row)
    out = Path(cfg["out"])
    write_table(table, out / "comparison.csv")
    _write_json(out / "comparison.json", numbers)

    with open(out / "bri_series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "batch_index", "step", "round", "domain", "bri"])
        for label, run in zip(labels, runs):
            for i, rec in enumerate(run["log"]):
                w.writerow([label, i, rec["step"], rec.get("round"), rec.get("domain"),
                            "" if rec.get("bri") is None else repr(rec["bri"])])
    with open(out / "insertion_events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "batch_index", "step", "round", "domain", "image_id", "kind",
                    "evicted_index"])
        for label, run in zip(labels, runs):
            for i, rec in enumerate(run["log"]):
                for ident, dec in zip(rec.get("image_ids", []), rec.get("decisions", [])):
                    if dec["kind"] != "rejected":
                        w.writerow([label, i, rec["step"], rec.get("round"), rec.get("domain"),
                                    ident, dec["kind"], dec["evicted_index"]])
    return {"runs": labels, "rows": len(table)}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "continual": cmd_continual, "report": cmd_report}


def _build_parser() -> _Parser:
    parser = _Parser(prog="a3tta", description=__doc__.splitlines()[0],
                     epilog="Any configuration key can be overridden with --key value.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--config", help="JSON or YAML file of configuration keys")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to compare")
    return parser


def parse_config(argv: list[str]) -> dict:
    args, rest = _build_parser().parse_known_args(argv)
    file_cfg = _load_config_file(args.config) if args.config else {}
    overrides = _parse_overrides(rest)
    if args.command == "report" and args.runs:
        overrides["runs"] = args.runs
    cfg = resolve_config(args.command, file_cfg, overrides)
    _validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"a3tta: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", cfg)
        summary = COMMANDS[cfg["command"]](cfg)
        _write_json(out / "summary.json", summary)
    except UsageError as exc:
        print(f"a3tta: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        logger.exception("command %s failed", cfg["command"])
        print(f"a3tta: runtime failure: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
