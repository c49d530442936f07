"""``brainmt`` command line: generate, train, eval, attribute, bench.

Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from brainmt.errors import BrainMTError, ConfigurationError, DataError

log = logging.getLogger("brainmt")

GENERATE_REQUIRED = ("n_subjects", "dims", "frames")
GENERATE_OPTIONAL = {"seed": 0, "signal_amp": 2.0, "sex_amp": 1.0, "noise_sigma": 1.5, "folds": 3}


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file with ``#`` comments, no section headers."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str  # keys such as C are case-sensitive
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc.message.splitlines()[0]}") from None
    return dict(cp["config"])


def _dims(value: str) -> tuple[int, int, int]:
    parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ConfigurationError(f"dims must be one or three integers, got {value!r}")
    return tuple(int(p) for p in parts)


def _coerce(key: str, value: str, default):
    try:
        if key in ("dims",):
            return _dims(value)
        if key == "betas":
            return tuple(float(v) for v in value.split(","))
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {value!r}") from None
    return value


def generate_settings(raw: dict[str, str]) -> dict:
    missing = [k for k in GENERATE_REQUIRED if k not in raw]
    if missing:
        raise ConfigurationError(f"generate config is missing required key(s): {', '.join(missing)}")
    unknown = set(raw) - set(GENERATE_REQUIRED) - set(GENERATE_OPTIONAL)
    if unknown:
        raise ConfigurationError(f"unknown generate config key(s): {', '.join(sorted(unknown))}")
    out = {"n_subjects": _coerce("n_subjects", raw["n_subjects"], 0), "dims": _dims(raw["dims"])}
    out["frames"] = _coerce("frames", raw["frames"], 0)
    for k, default in GENERATE_OPTIONAL.items():
        out[k] = _coerce(k, raw[k], default) if k in raw else default
    return out


def model_config(args):
    from brainmt.model import ModelConfig, preset

    overrides = {}
    if args.config:
        defaults = ModelConfig().to_dict()
        for k, v in read_config(args.config).items():
            if k not in defaults:
                raise ConfigurationError(f"unknown model config key {k!r}")
            overrides[k] = _coerce(k, v, defaults[k])
    for flag, key in (("seed", "seed"), ("scan_order", "scan_order"), ("frames", "T"),
                      ("frame_sampling", "frame_sampling"), ("task", "task"), ("epochs", "epochs"),
                      ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return preset(args.preset, **overrides)


# ---------------------------------------------------------------------------
# subcommands


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    from brainmt.volume import generate_synthetic_dataset, write_dataset

    if not args.config:
        raise UsageError("generate requires --config")
    s = generate_settings(read_config(args.config))
    if args.seed is not None:
        s["seed"] = args.seed
    if args.frames is not None:
        s["frames"] = args.frames
    subjects = generate_synthetic_dataset(
        s["n_subjects"], s["dims"], s["frames"], s["seed"], s["signal_amp"], s["sex_amp"], s["noise_sigma"]
    )
    folds = args.folds if args.folds is not None else s["folds"]
    manifest = write_dataset(subjects, _out_dir(args), seed=s["seed"], folds=folds)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]
    dims = "x".join(map(str, s["dims"]))
    print(f"generated {len(subjects)} subjects ({s['frames']} frames, {dims}) -> {manifest} sha256:{digest}")
    return 0


def _load_data(args):
    from brainmt.volume import read_dataset

    if not args.data:
        raise UsageError(f"{args.command} requires --data")
    return read_dataset(args.data)


def cmd_train(args) -> int:
    from brainmt.train import evaluate, run_cv, save_checkpoint, train, write_history_csv

    cfg = model_config(args)
    ds = _load_data(args)
    out = _out_dir(args)
    if args.folds:
        res = run_cv(ds.subjects, cfg, folds=args.folds, repeats=args.repeats or 1, csv_path=out / "cv.csv")
        key = "pearson_r" if cfg.task == "regression" else "bacc"
        s = res["summary"][key]
        print(f"cv {key} {s['mean']:.4f} (std folds {s['std_folds']:.4f}, std repeats {s['std_repeats']:.4f})")
        return 0
    split = ds.split()
    model, state = train(ds.subjects, cfg, split, max_steps=args.steps)
    save_checkpoint(out / "model.ckpt", model, state)
    write_history_csv(out / "history.csv", state.history, cfg.task)
    by_id = ds.by_id()
    ev_ids = split.test or split.train
    metrics = evaluate(model, [by_id[i] for i in ev_ids])
    _write_metrics(out / "metrics.csv", "test" if split.test else "train", metrics)
    print(f"trained {state.step} steps; " + _fmt(metrics))
    return 0


def cmd_eval(args) -> int:
    from brainmt.train import evaluate, load_checkpoint

    if not args.checkpoint:
        raise UsageError("eval requires --checkpoint")
    ds = _load_data(args)
    model, _ = load_checkpoint(args.checkpoint)
    split = ds.split()
    ids = {"train": split.train, "val": split.val, "test": split.test, "all": [s.id for s in ds.subjects]}[args.split]
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    by_id = ds.by_id()
    metrics = evaluate(model, [by_id[i] for i in ids])
    _write_metrics(_out_dir(args) / "metrics.csv", args.split, metrics)
    print(f"{args.split}: " + _fmt(metrics))
    return 0


def cmd_attribute(args) -> int:
    from brainmt.interpret import integrated_gradients
    from brainmt.train import Inputs, load_checkpoint

    if not args.checkpoint:
        raise UsageError("attribute requires --checkpoint")
    ds = _load_data(args)
    model, _ = load_checkpoint(args.checkpoint)
    by_id = ds.by_id()
    sid = args.subject or ds.subjects[0].id
    if sid not in by_id:
        raise DataError(f"unknown subject {sid!r}")
    x = Inputs([by_id[sid]], model.cfg).batch([0])[0]
    try:
        baseline = None if args.baseline == "min" else float(args.baseline)
    except ValueError:
        raise UsageError(f"--baseline must be 'min' or a number, got {args.baseline!r}") from None
    amap = integrated_gradients(model, x, baseline, m=args.ig_steps)
    vol, table = amap.save(_out_dir(args), stem=f"attribution_{sid}", k=args.top_k)
    print(
        f"attribution {sid}: F(x)={amap.f_x:.6g} F(baseline)={amap.f_baseline:.6g} "
        f"residual={amap.completeness_residual:.3g} -> {vol}, {table}"
    )
    return 0


def cmd_bench(args) -> int:
    from brainmt.bench import run_bench

    try:
        t_list = [int(t) for t in args.t_list.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--t-list must be comma-separated integers, got {args.t_list!r}") from None
    if len(t_list) < 2:
        raise UsageError("bench needs at least two values in --t-list")
    cfg = model_config(args)
    report = run_bench(cfg, t_list, repeats=args.repeats or 5)
    path = _out_dir(args) / "bench.csv"
    report.write_csv(path)
    for r in report.rows:
        print(f"T={r.T} L={r.L} activations={r.activation_elements} wall={r.wall_time_s:.3f}s")
    return 0


def _fmt(metrics: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.items())


def _write_metrics(path: Path, split: str, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split"] + list(metrics))
        w.writerow([split] + [metrics[k] for k in metrics])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--preset", default="desk", help="desk | paper | large | small")
    common.add_argument("--seed", type=int)
    common.add_argument("--scan-order", dest="scan_order", choices=("temporal_first", "spatial_first"))
    common.add_argument("--frames", type=int, help="frames per sample (T)")
    common.add_argument("--frame-sampling", dest="frame_sampling", choices=("window", "subset"))
    common.add_argument("--task", choices=("regression", "classification"))
    common.add_argument("--out-dir", dest="out_dir", default=".")
    common.add_argument("--folds", type=int)
    common.add_argument("--repeats", type=int)
    common.add_argument("--data", help="dataset directory containing manifest.csv")
    common.add_argument("--checkpoint")

    p = _Parser(prog="brainmt", description="Hybrid Mamba-transformer models for 4-D volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train (or cross-validate with --folds)")
    t.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    a = sub.add_parser("attribute", parents=[common], help="integrated-gradients map for one subject")
    a.add_argument("--subject")
    a.add_argument("--ig-steps", dest="ig_steps", type=int, default=256)
    a.add_argument("--baseline", default="min", help="'min' or a constant value")
    a.add_argument("--top-k", dest="top_k", type=int, default=10)
    b = sub.add_parser("bench", parents=[common], help="activation/time scaling over T")
    b.add_argument("--t-list", dest="t_list", default="16,32")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "attribute": cmd_attribute,
    "bench": cmd_bench,
}


def _thread_limit():
    cap = os.environ.get("BRAINMT_THREADS")
    if not cap:
        return nullcontext()
    try:
        n = int(cap)
    except ValueError:
        raise UsageError(f"BRAINMT_THREADS must be an integer, got {cap!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with _thread_limit():
            return COMMANDS[args.command](args)
    except BrainMTError as exc:
        print(f"brainmt: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"brainmt: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
