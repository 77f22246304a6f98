"""Command-line entry point.

Exit codes: 0 success, 2 invalid config or arguments, 3 numeric failure
(non-finite loss or gradient), 4 checkpoint, data-file or other I/O failure.
Machine-readable results go to stdout as JSON; logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .checkpoint import CheckpointError, atomic_write_text, load_checkpoint
from .data import (
    DEFAULT_CONTRAST,
    DEFAULT_NOISE,
    Dataset,
    FormatError,
    batches,
    gen_synthetic,
    load_idx,
    write_idx,
)
from .distill import DataError, UncertaintyPolicy, cosine_similarities
from .nn import Network, NetworkSpec, SpecError, reference_cnn
from .supernet import ConfigError, SharedParameterStore
from .train import (
    NumericError,
    TrainConfig,
    evaluate,
    measure_gradients,
    train,
    train_baseline,
    train_standard_kd,
)

logger = logging.getLogger("tinydistill")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
LOGITS_FORMAT = "tinydistill-logits/1"
WORKERS_ENV = "TINYDISTILL_WORKERS"


# config file ---------------------------------------------------------------------


class SyntheticSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["synthetic"] = "synthetic"
    classes: int = Field(10, ge=2)
    per_class: int = Field(500, ge=1)
    eval_per_class: int = Field(100, ge=0)
    image_size: int = Field(8, ge=1)
    channels: int = Field(3, ge=1)
    noise: float = Field(DEFAULT_NOISE, ge=0)
    contrast: float = Field(DEFAULT_CONTRAST, gt=0)
    seed: int = 0


class IdxSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["idx"] = "idx"
    train_images: str
    train_labels: str
    eval_images: Optional[str] = None
    eval_labels: Optional[str] = None
    class_count: Optional[int] = Field(None, ge=2)


class RunConfigFile(BaseModel):
    """One training run. Relative paths resolve against the config file's directory."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    train: TrainConfig = TrainConfig()
    network: Optional[NetworkSpec] = None
    dataset: Union[SyntheticSource, IdxSource] = Field(default_factory=SyntheticSource,
                                                       discriminator="kind")
    output_dir: str = "run"
    trainer: Literal["insitu", "baseline", "standard_kd"] = "insitu"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def load_run_config(path: Union[str, Path]) -> Tuple[RunConfigFile, Path]:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from exc
    try:
        return RunConfigFile.model_validate_json(raw), path.resolve().parent
    except ValidationError as exc:
        raise CliError(f"invalid config {path}:\n{exc}", EXIT_CONFIG) from exc


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_datasets(source, base: Path) -> Tuple[Dataset, Dataset]:
    """Train and eval splits; without an eval split the train set doubles as eval."""
    if isinstance(source, SyntheticSource):
        train_set = gen_synthetic(source.classes, source.per_class, source.image_size, source.seed,
                                  source.noise, source.channels, source.contrast,
                                  template_seed=source.seed)
        if source.eval_per_class == 0:
            return train_set, train_set
        eval_set = gen_synthetic(source.classes, source.eval_per_class, source.image_size,
                                 source.seed + 1_000_003, source.noise, source.channels,
                                 source.contrast, template_seed=source.seed)
        return train_set, eval_set
    train_set = load_idx(_resolve(base, source.train_images), _resolve(base, source.train_labels),
                         source.class_count)
    if source.eval_images is None or source.eval_labels is None:
        return train_set, train_set
    eval_set = load_idx(_resolve(base, source.eval_images), _resolve(base, source.eval_labels),
                        source.class_count or train_set.class_count)
    return train_set, eval_set


# logits files --------------------------------------------------------------------


def save_logits(path: Union[str, Path], logits: np.ndarray, dataset: Dataset) -> None:
    doc = {
        "format": LOGITS_FORMAT,
        "n": int(logits.shape[0]),
        "c": int(logits.shape[1]),
        "fingerprint": dataset.fingerprint,
        "logits": logits.tolist(),
    }
    atomic_write_text(path, json.dumps(doc))


def load_logits(path: Union[str, Path], dataset: Dataset) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read logits {path}: {exc}", EXIT_IO) from exc
    if not isinstance(doc, dict) or doc.get("format") != LOGITS_FORMAT:
        raise CliError(f"{path} is not a {LOGITS_FORMAT} file", EXIT_IO)
    logits = np.asarray(doc["logits"], dtype=np.float64)
    if logits.shape != (doc["n"], doc["c"]):
        raise CliError(f"{path}: logits shape {logits.shape} does not match header", EXIT_IO)
    fp = doc.get("fingerprint")
    if fp is not None and fp != dataset.fingerprint:
        raise CliError(f"{path} was computed on a different dataset", EXIT_CONFIG)
    return logits


def model_logits(model, dataset: Dataset, batch_size: int = 500) -> np.ndarray:
    from .autodiff import Tensor

    rows = [model(Tensor(dataset.images[i : i + batch_size]), train=False).data
            for i in range(0, len(dataset), batch_size)]
    return np.concatenate(rows)


# running -------------------------------------------------------------------------


def _atomic_dir(final: Path, overwrite: bool):
    if final.exists() and not overwrite:
        raise CliError(f"output directory {final} exists (use --overwrite)", EXIT_CONFIG)
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.tmp-"))


def _commit_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.rename(tmp, final)


def run_config(cfg: RunConfigFile, base: Path, out_dir: Path, overwrite: bool = False) -> dict:
    """Train per ``cfg`` into ``out_dir`` (created atomically); returns a summary."""
    train_set, eval_set = load_datasets(cfg.dataset, base)
    spec = cfg.network or reference_cnn(train_set.images.shape[1], train_set.class_count)
    tc = cfg.train
    external = None
    if tc.external_kd is not None:
        external = load_logits(_resolve(base, tc.external_kd.logits_path), train_set)
    if cfg.trainer == "standard_kd" and external is None:
        raise CliError("trainer 'standard_kd' needs train.external_kd.logits_path", EXIT_CONFIG)

    tmp = _atomic_dir(out_dir, overwrite)
    try:
        atomic_write_text(tmp / "config.json", cfg.model_dump_json(indent=2))
        if cfg.trainer == "insitu":
            _, metrics = train(tc, train_set, eval_set, spec, tmp, external_logits=external)
        elif cfg.trainer == "baseline":
            _, metrics = train_baseline(tc, train_set, eval_set, spec, tmp)
        else:
            _, metrics = train_standard_kd(tc, train_set, external, eval_set, spec, tmp,
                                           weight=tc.external_kd.weight)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit_dir(tmp, out_dir)
    last = metrics.last
    return {
        "output_dir": str(out_dir),
        "epochs": len(metrics.records),
        "acc_student_eval": None if last is None else last.acc_student_eval,
        "acc_teacher_eval": None if last is None else last.acc_teacher_eval,
        "conflict_ratio": None if last is None else last.conflict_ratio,
        "kl_fraction": None if last is None else last.kl_fraction,
    }


# sweeps --------------------------------------------------------------------------

ARMS = ("baseline", "insitu", "insitu_pcgrad", "netdistiller")


def parse_grid(text: str) -> Tuple[str, List[str]]:
    axis, sep, values = text.partition("=")
    axis = axis.strip()
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or not items:
        raise CliError(f"grid must look like axis=v1,v2,... got {text!r}", EXIT_CONFIG)
    if axis not in ("k", "T", "arm"):
        raise CliError(f"unknown grid axis {axis!r}; expected k, T or arm", EXIT_CONFIG)
    try:
        if axis == "k":
            if any(int(v) < 1 for v in items):
                raise ValueError("k must be >= 1")
        elif axis == "T":
            if any(float(v) <= 0 for v in items):
                raise ValueError("T must be > 0")
        elif any(v not in ARMS for v in items):
            raise ValueError(f"arms must be among {', '.join(ARMS)}")
    except ValueError as exc:
        raise CliError(f"bad grid values {items}: {exc}", EXIT_CONFIG) from exc
    return axis, items


def cell_config(cfg: RunConfigFile, axis: str, value: str) -> RunConfigFile:
    tc = cfg.train
    if axis == "k":
        return cfg.model_copy(update={"train": TrainConfig(**{**tc.model_dump(), "expansion_rate": int(value)})})
    if axis == "T":
        mode = tc.uncertainty.mode if tc.uncertainty is not None else "absolute"
        smoothing = tc.uncertainty.label_smoothing if tc.uncertainty is not None else tc.label_smoothing
        policy = UncertaintyPolicy(threshold=float(value), mode=mode, label_smoothing=smoothing)
        return cfg.model_copy(update={"train": TrainConfig(**{**tc.model_dump(), "uncertainty": policy,
                                                               "student_objective": "kl"})})
    if value == "baseline":
        return cfg.model_copy(update={"trainer": "baseline"})
    updates = {"surgery_enabled": value != "insitu",
               "uncertainty": UncertaintyPolicy() if value == "netdistiller" else None}
    return cfg.model_copy(update={"trainer": "insitu",
                                  "train": TrainConfig(**{**tc.model_dump(), **updates})})


def _run_cell(args) -> dict:
    cfg_json, base, out_dir = args
    cfg = RunConfigFile.model_validate_json(cfg_json)
    try:
        return {"status": "ok", **run_config(cfg, Path(base), Path(out_dir), overwrite=True)}
    except Exception as exc:  # recorded per cell; the sweep carries on
        return {"status": f"error: {type(exc).__name__}: {exc}".replace("\n", " "),
                "output_dir": str(out_dir)}


SUMMARY_FIELDS = ("axis", "value", "status", "acc_student_eval", "acc_teacher_eval",
                  "conflict_ratio", "kl_fraction", "output_dir")


def run_sweep(cfg: RunConfigFile, base: Path, axis: str, values: Sequence[str],
              workers: int = 1) -> List[dict]:
    root = _resolve(base, cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for value in values:
        cell = cell_config(cfg, axis, value)
        jobs.append((cell.model_dump_json(), str(base), str(root / f"{axis}={value}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    rows = [{"axis": axis, "value": v, **r} for v, r in zip(values, results)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(root / "summary.csv", buf.getvalue())
    return rows


# conflict analysis ---------------------------------------------------------------

HIST_EDGES = np.linspace(-1.0, 1.0, 11)


def conflict_report(per_step: Sequence[Dict[str, Optional[float]]]) -> dict:
    """Summarize per-step, per-tensor cosines into histograms and a conflict ratio."""
    if not per_step:
        raise ValueError("no measurement steps")
    names = list(per_step[0])
    layers = {}
    negative = defined = 0
    for name in names:
        values = [row[name] for row in per_step if row.get(name) is not None]
        counts, _ = np.histogram(values, bins=HIST_EDGES)
        neg = sum(1 for v in values if v < 0)
        negative += neg
        defined += len(values)
        layers[name] = {
            "cosines": [row.get(name) for row in per_step],
            "mean_cosine": float(np.mean(values)) if values else None,
            "conflict_fraction": neg / len(values) if values else None,
            "histogram": counts.tolist(),
        }
    return {
        "steps": len(per_step),
        "histogram_edges": HIST_EDGES.tolist(),
        "layers": layers,
        "conflict_ratio": negative / defined if defined else 0.0,
    }


def analyze_conflicts(store: SharedParameterStore, dataset: Dataset, steps: int,
                      config: TrainConfig) -> dict:
    """Measure gradient conflicts over ``steps`` batches with surgery off and no updates."""
    if steps < 1:
        raise CliError("--steps must be >= 1", EXIT_CONFIG)
    if len(dataset) == 0:
        raise CliError("dataset is empty", EXIT_IO)
    rows = []
    epoch = 0
    while len(rows) < steps:
        for idx in batches(dataset, config.batch_size, config.seed, epoch):
            if len(rows) == steps:
                break
            g_tea, g_stu = measure_gradients(store, dataset.images[idx], dataset.labels[idx], config)
            rows.append(cosine_similarities(g_tea, g_stu, keys=store.shared))
        epoch += 1
    return conflict_report(rows)


# commands ------------------------------------------------------------------------


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _dataset_from_args(args) -> Dataset:
    if args.data:
        return load_idx(f"{args.data}-images.idx", f"{args.data}-labels.idx")
    if args.config:
        cfg, base = load_run_config(args.config)
        train_set, eval_set = load_datasets(cfg.dataset, base)
        return train_set if args.split == "train" else eval_set
    raise CliError("give --data PREFIX or --config CONFIG", EXIT_CONFIG)


def _train_settings(args) -> TrainConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)[0].train
    return TrainConfig()


def cmd_train(args) -> int:
    cfg, base = load_run_config(args.config)
    out = Path(args.output_dir) if args.output_dir else _resolve(base, cfg.output_dir)
    _emit(run_config(cfg, base, out, overwrite=args.overwrite))
    return EXIT_OK


def cmd_eval(args) -> int:
    kind, obj = load_checkpoint(args.checkpoint)
    dataset = _dataset_from_args(args)
    if len(dataset) == 0:
        raise CliError("dataset is empty", EXIT_IO)
    if kind == "network":
        if args.view == "teacher":
            raise CliError("a standalone network checkpoint has no teacher view", EXIT_CONFIG)
        model: Network = obj
    else:
        model = obj.teacher_network() if args.view == "teacher" else obj.student_network()
    if model.spec.num_classes != dataset.class_count:
        raise CliError(f"model predicts {model.spec.num_classes} classes, dataset has "
                       f"{dataset.class_count}", EXIT_CONFIG)
    accuracy = evaluate(model, dataset)
    if args.save_logits:
        save_logits(args.save_logits, model_logits(model, dataset), dataset)
    _emit({"accuracy": accuracy, "n": len(dataset)})
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, base = load_run_config(args.config)
    axis, values = parse_grid(args.grid)
    for v in values:
        try:
            cell_config(cfg, axis, v)
        except ValidationError as exc:
            raise CliError(f"grid value {axis}={v} gives an invalid config:\n{exc}", EXIT_CONFIG) from exc
    try:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    except ValueError as exc:
        raise CliError(f"{WORKERS_ENV} must be an integer", EXIT_CONFIG) from exc
    rows = run_sweep(cfg, base, axis, values, max(1, workers))
    _emit({"summary": str(_resolve(base, cfg.output_dir) / "summary.csv"),
           "cells": [{k: r.get(k) for k in SUMMARY_FIELDS} for r in rows]})
    return EXIT_OK


def cmd_analyze(args) -> int:
    kind, obj = load_checkpoint(args.checkpoint)
    if kind != "supernet":
        raise CliError("conflict analysis needs a supernet checkpoint", EXIT_CONFIG)
    dataset = _dataset_from_args(args)
    config = _train_settings(args)
    if args.batch_size:
        config = config.model_copy(update={"batch_size": args.batch_size})
    _emit(analyze_conflicts(obj, dataset, args.steps, config))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.classes, args.per_class, args.image_size, args.seed, args.noise,
                       args.channels, args.contrast,
                       template_seed=args.seed if args.template_seed is None else args.template_seed)
    prefix = Path(args.output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_idx(ds, f"{prefix}-images.idx", f"{prefix}-labels.idx")
    _emit({"images": f"{prefix}-images.idx", "labels": f"{prefix}-labels.idx", "n": len(ds),
           "fingerprint": load_idx(f"{prefix}-images.idx", f"{prefix}-labels.idx").fingerprint})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinydistill", description="Train and inspect in-situ distilled tiny CNNs.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job from a JSON config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override the config's output_dir")
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_train)

    def data_args(q):
        q.add_argument("--data", metavar="PREFIX", help="IDX pair PREFIX-images.idx / PREFIX-labels.idx")
        q.add_argument("--config", help="take the dataset (and training settings) from a run config")
        q.add_argument("--split", choices=("train", "eval"), default="eval")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    data_args(p)
    p.add_argument("--view", choices=("student", "teacher"), default="student")
    p.add_argument("--save-logits", metavar="PATH", help="also write eval-mode logits as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one run per grid value plus summary.csv")
    p.add_argument("config")
    p.add_argument("--grid", required=True, help="k=2,3,4,5 | T=2.5,3.75,5.0 | arm=baseline,netdistiller")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-conflicts", help="teacher/student gradient cosines per tensor")
    p.add_argument("checkpoint")
    data_args(p)
    p.set_defaults(split="train")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as an IDX pair")
    p.add_argument("-o", "--output", required=True, metavar="PREFIX")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    p.add_argument("--contrast", type=float, default=DEFAULT_CONTRAST)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template-seed", type=int)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        logger.error("%s", exc)
        return exc.code
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (CheckpointError, FormatError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except (ValidationError, ConfigError, SpecError, DataError, ValueError) as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
