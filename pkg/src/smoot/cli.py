"""Command-line entry point: ``smoot train|eval|diagnose|export-saliency|generate-planted``.

Exit codes: 0 success, 2 configuration/parameter error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import CheckpointFormatError, read_checkpoint, read_mask_state, write_checkpoint, write_mask_state
from .data import ConsistencyError, IDXFormatError, PlantedSpec, generate_planted, load_split, save_split
from .evaluation import DEFAULT_FRACTIONS, accuracy_drop_curve, class2_percent, diagnose_dataset
from .models import MnistCNN
from .saliency import saliency_map_export, saliency_pass, write_pgm
from .tensor import NumericError
from .training import METRIC_COLUMNS, ConfigError, TrainConfig, train

log = logging.getLogger("smoot")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.smot"
MASK_STATE_NAME = "mask_state.csv"
METRICS_NAME = "metrics.csv"
RESOLVED_NAME = "config.json"

# MNIST hyperparameter defaults
METHOD_DEFAULTS = {
    "tau": 1.0,
    "lambda": 1.0,
    "alpha": 0.95,
    "mu": 10.0,
    "n": 5,
    "k_init": None,
    "k_min_frac": 0.2,
    "k_max_frac": 0.8,
    "optimizer": "adadelta",
}
OPTIONAL_DEFAULTS = {
    "rank_by": "value",
    "saliency_target": "predicted",
    "train_subset": None,
    "test_subset": None,
    "model": {"conv1": 32, "conv2": 64, "hidden": 128, "pool": 1},
}
REQUIRED = ("method", "epochs", "batch_size", "seed", "data", "output_dir")
MODEL_KEYS = ("conv1", "conv2", "hidden", "pool")


class UsageError(ValueError):
    pass


def resolve_config(raw: Dict) -> Dict:
    """Validate a run config dict and fill in the documented defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = set(REQUIRED) | set(METHOD_DEFAULTS) | set(OPTIONAL_DEFAULTS)
    errors = [f"{k}: unknown field" for k in sorted(set(raw) - known)]
    errors += [f"{k}: required field missing" for k in REQUIRED if k not in raw]
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = {**METHOD_DEFAULTS, **OPTIONAL_DEFAULTS, **raw}
    model = cfg["model"]
    if not isinstance(model, dict) or set(model) - set(MODEL_KEYS):
        raise ConfigError(f"model: must be an object with keys from {MODEL_KEYS}")
    cfg["model"] = {**OPTIONAL_DEFAULTS["model"], **model}
    for k, v in cfg["model"].items():
        if not (isinstance(v, int) and v >= 1):
            raise ConfigError(f"model.{k}: must be a positive integer, got {v!r}")
    for k in ("train_subset", "test_subset"):
        v = cfg[k]
        if v is not None and not (isinstance(v, int) and v >= 1):
            raise ConfigError(f"{k}: must be null or a positive integer, got {v!r}")
    for k in ("data", "output_dir"):
        if not isinstance(cfg[k], str) or not cfg[k]:
            raise ConfigError(f"{k}: must be a non-empty path string")
    env_seed = os.environ.get("SMOOT_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"SMOOT_SEED: not an integer: {env_seed!r}") from None
    train_config(cfg).validate()
    return cfg


def train_config(cfg: Dict) -> TrainConfig:
    return TrainConfig(method=cfg["method"], tau=cfg["tau"], lam=cfg["lambda"], alpha=cfg["alpha"], mu=cfg["mu"],
                       n=cfg["n"], k_init=cfg["k_init"], k_min_frac=cfg["k_min_frac"],
                       k_max_frac=cfg["k_max_frac"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       optimizer=cfg["optimizer"], seed=cfg["seed"], rank_by=cfg["rank_by"],
                       saliency_target=cfg["saliency_target"])


def _write_csv(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_train(config_path) -> Path:
    try:
        raw = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    cfg = resolve_config(raw)
    tcfg = train_config(cfg)
    data_dir = Path(cfg["data"])
    train_ds = load_split(data_dir, "train").head(cfg["train_subset"])
    try:
        test_ds = load_split(data_dir, "test").head(cfg["test_subset"])
    except FileNotFoundError:
        test_ds = None
    tcfg.validate(train_ds.n_features, train_ds.n_classes)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    model = MnistCNN(in_channels=train_ds.images.shape[1], image_size=train_ds.images.shape[2],
                     n_classes=train_ds.n_classes, seed=tcfg.seed, **cfg["model"])
    result = train(train_ds, tcfg, test=test_ds, model=model)
    write_checkpoint(out / CHECKPOINT_NAME, result.model.state_dict())
    write_mask_state(out / MASK_STATE_NAME, result.mask_state.items())
    _write_csv(out / METRICS_NAME, METRIC_COLUMNS, [m.row() for m in result.history])
    return out


def _run_context(checkpoint: Path) -> Dict:
    """Resolved config stored next to a checkpoint, if any."""
    p = checkpoint.parent / RESOLVED_NAME
    return json.loads(p.read_text()) if p.exists() else {}


def _load_model(checkpoint: Path, ds) -> MnistCNN:
    return MnistCNN.from_state(read_checkpoint(checkpoint), image_size=ds.images.shape[2])


def _seed(ctx: Dict) -> int:
    env_seed = os.environ.get("SMOOT_SEED")
    return int(env_seed) if env_seed is not None else int(ctx.get("seed", 0))


def _parse_floats(text: Optional[str]) -> List[float]:
    if text is None:
        return list(DEFAULT_FRACTIONS)
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--fractions: expected comma-separated numbers, got {text!r}") from None


def cmd_eval(checkpoint, data, fractions=None, out_dir=None, split: str = "test") -> Dict:
    checkpoint = Path(checkpoint)
    ds = load_split(data, split)
    model = _load_model(checkpoint, ds)
    ctx = _run_context(checkpoint)
    curve = accuracy_drop_curve(model, ds, fractions if fractions is not None else DEFAULT_FRACTIONS,
                                seed=_seed(ctx), rank_by=ctx.get("rank_by", "value"),
                                target=ctx.get("saliency_target", "predicted"))
    summary = {"method": ctx.get("method", "unknown"), "accuracy": curve.accuracy[0], "auc": curve.auc,
               "k_min": None, "k_median": None, "k_max": None}
    sidecar = checkpoint.parent / MASK_STATE_NAME
    if sidecar.exists():
        import statistics

        ks = sorted(read_mask_state(sidecar).values())
        if ks:
            summary.update(k_min=ks[0], k_median=statistics.median_low(ks), k_max=ks[-1])
    out = Path(out_dir) if out_dir else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve.to_csv())
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_diagnose(checkpoint, data, step: float, out_dir=None, split: str = "test") -> float:
    checkpoint = Path(checkpoint)
    ds = load_split(data, split)
    model = _load_model(checkpoint, ds)
    ctx = _run_context(checkpoint)
    profiles = diagnose_dataset(model, ds, step, seed=_seed(ctx), rank_by=ctx.get("rank_by", "value"),
                                target=ctx.get("saliency_target", "predicted"))
    out = Path(out_dir) if out_dir else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "profiles.csv", ["sample_id", "peak_fraction", "class"],
               [[p.sample_id, repr(p.peak_fraction), p.image_class] for p in profiles])
    percent = class2_percent(profiles)
    (out / "diagnose.json").write_text(json.dumps({"images": len(profiles), "class2_percent": percent}, indent=2) + "\n")
    return percent


def cmd_export_saliency(checkpoint, data, ids, out_dir=None, split: str = "test") -> List[Path]:
    checkpoint = Path(checkpoint)
    ds = load_split(data, split)
    model = _load_model(checkpoint, ds)
    ctx = _run_context(checkpoint)
    wanted = [int(i) for i in ids]
    bad = [i for i in wanted if i < 0 or i >= len(ds)]
    if bad:
        raise UsageError(f"--ids: sample ids {bad} outside [0, {len(ds)})")
    method = ctx.get("method", "model")
    out = Path(out_dir) if out_dir else checkpoint.parent / "saliency"
    out.mkdir(parents=True, exist_ok=True)
    idx = np.array(wanted, dtype=np.int64)
    grads, _ = saliency_pass(model, ds.images[idx], ctx.get("saliency_target", "predicted"), ds.labels[idx])
    c, h, w = ds.images.shape[1:]
    paths = []
    for sid, g in zip(wanted, grads):
        path = out / f"{sid}_{method}.pgm"
        # channels are stacked vertically
        write_pgm(path, saliency_map_export(g, (c * h, w)))
        paths.append(path)
    return paths


def cmd_generate_planted(out_dir, n_train: int, n_test: int, seed: int = 0, image_size: int = 16,
                         patch_size: int = 4, n_classes: int = 4, noise: float = 0.5) -> Path:
    spec = PlantedSpec(image_size=image_size, patch_size=patch_size, n_classes=n_classes, noise=noise, seed=seed)
    out = Path(out_dir)
    save_split(out, generate_planted(spec, n_train, seed=seed), "train")
    save_split(out, generate_planted(spec, n_test, seed=seed + 1), "test")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smoot", description="Saliency-guided training with adaptive masking.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="accuracy-drop curve, AUC and mask-count summary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default=None, help="comma-separated, ascending from 0, at most 0.8")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)

    p = sub.add_parser("diagnose", help="class I / class II masking profiles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)

    p = sub.add_parser("export-saliency", help="write 16-bit PGM saliency maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)

    p = sub.add_parser("generate-planted", help="write a planted-feature dataset as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.5)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            out = cmd_train(args.config)
            print(out)
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, args.data, _parse_floats(args.fractions), args.out, args.split)))
        elif args.command == "diagnose":
            print(f"class II: {cmd_diagnose(args.checkpoint, args.data, args.step, args.out, args.split):.2f}%")
        elif args.command == "export-saliency":
            try:
                ids = [int(t) for t in args.ids.split(",") if t.strip()]
            except ValueError:
                raise UsageError(f"--ids: expected comma-separated integers, got {args.ids!r}") from None
            for p in cmd_export_saliency(args.checkpoint, args.data, ids, args.out, args.split):
                print(p)
        elif args.command == "generate-planted":
            print(cmd_generate_planted(args.out, args.n_train, args.n_test, args.seed, args.image_size,
                                       args.patch_size, args.classes, args.noise))
    except (IDXFormatError, CheckpointFormatError, ConsistencyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
