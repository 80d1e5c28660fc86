"""Command line entry point: ``sslx <command>``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .augment import apply
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .datasets import (
    ManifestError,
    SplitError,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_image,
    load_manifest,
    stratified_split,
)
from .explain import grad_cam, overlay
from .model import FingerprintError, bundle_from_checkpoint
from .reporting import ReportError, plot_label_efficiency, read_results_csv, render_report, write_results_csv
from .trainer import ConfigError, classifier_checkpoint, evaluate, finetune, pretrain

log = logging.getLogger("ssl_transfer")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".sslx.lock"


class ValidationError(ValueError):
    pass


class LockError(RuntimeError):
    pass


_VALIDATION_ERRORS = (ConfigError, ValidationError, ManifestError, SplitError, ReportError, FingerprintError)


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file so only one training command uses an output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output directory {out_dir} is locked ({lock}); another training command is running") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _provenance(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_fingerprint": cfg.fingerprint, "seed": cfg.seed, **extra}


def _load_target(cfg: ExperimentConfig, name: str):
    ref = cfg.target(name)
    return ref, load_manifest(ref.manifest, ref.name, ref.num_grades)


def _split_for(cfg: ExperimentConfig, ref, manifest) -> SplitSpec:
    """Reuse the stored split for a target, creating it on first use."""
    path = cfg.output_dir / "splits" / f"{ref.name}.json"
    if path.is_file():
        return SplitSpec.from_json(path.read_text())
    split = stratified_split(manifest, cfg.split_ratios, cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(split.to_json() + "\n")
    return split


def _echo_config(cfg: ExperimentConfig) -> None:
    print(json.dumps({"config_fingerprint": cfg.fingerprint, "output_dir": str(cfg.output_dir),
                      "config": cfg.raw}, indent=2, sort_keys=True))


# --- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec(args.classes, args.per_class, args.size, args.seed, args.noise, args.illumination_jitter)
    try:
        manifest = generate_synthetic_corpus(args.out, spec)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    print(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if cfg.source is None:
        raise ConfigError("source: required for pretraining")
    if args.dry_run:
        _echo_config(cfg)
        return EXIT_OK
    manifest = load_manifest(cfg.source.manifest, cfg.source.name, cfg.source.num_grades)
    out = cfg.output_dir / "pretext"
    with output_lock(cfg.output_dir):
        ckpt = pretrain(cfg.pretext, manifest, out_dir=out)
    _write_json(out / "provenance.json", _provenance(cfg, checkpoint_fingerprint=ckpt.fingerprint))
    print(f"checkpoint: {out / 'pretext_final.ckpt'}")
    print(f"final_loss: {ckpt.metrics['final_loss']:.6f}")
    return EXIT_OK


def _task_arg(ref, task: str) -> str:
    if task not in ref.tasks:
        raise ValidationError(f"--task {task!r} is not configured for target {ref.name!r} (tasks: {list(ref.tasks)})")
    return task


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    ref, manifest = _load_target(cfg, args.target)
    ft = cfg.finetune_for(ref, _task_arg(ref, args.task), args.fraction)
    ft.validate()
    if args.dry_run:
        _echo_config(cfg)
        return EXIT_OK
    ckpt = load_checkpoint(args.checkpoint)
    with output_lock(cfg.output_dir):
        split = _split_for(cfg, ref, manifest)
        model, report = finetune(ft, ckpt, split, manifest)
    stem = f"{ref.name}_{args.task}_{args.fraction:g}"
    out = cfg.output_dir / "finetune"
    save_checkpoint(classifier_checkpoint(model, ft, report, source=ckpt.fingerprint), out / f"{stem}.ckpt")
    _write_json(out / f"{stem}.json", {**report.to_dict(), **_provenance(cfg)})
    print(f"checkpoint: {out / (stem + '.ckpt')}")
    print(f"accuracy={report.accuracy:.2f} precision={report.precision:.2f} "
          f"recall={report.recall:.2f} f1={report.f1:.2f}")
    return EXIT_OK


def _classifier_from(path, cfg: ExperimentConfig):
    ckpt = load_checkpoint(path)
    if ckpt.head_kind != "classifier":
        raise ValidationError(f"{path} is a {ckpt.head_kind} checkpoint; a classifier checkpoint is required")
    ft_doc = ckpt.config["finetune"]
    model = bundle_from_checkpoint(ckpt)
    return ckpt, model, ft_doc


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ref, manifest = _load_target(cfg, args.target)
    _ckpt, model, ft_doc = _classifier_from(args.checkpoint, cfg)
    ft = cfg.finetune_for(ref, ft_doc["scheme"]["kind"], ft_doc["fraction"])
    split = _split_for(cfg, ref, manifest)
    pipeline = ft.pipeline(model.encoder_cfg.input_size)
    report = evaluate(model, split, manifest, ft.scheme, pipeline)
    print(json.dumps({**report.to_dict(), **_provenance(cfg)}, indent=2, sort_keys=True))
    return EXIT_OK


def _cell_key(dataset: str, task: str, fraction: float) -> str:
    return f"{dataset}|{task}|{fraction:g}"


def run_sweep(cfg: ExperimentConfig, checkpoint) -> tuple[list[dict], dict]:
    """Fine-tune and evaluate every (target, task, fraction) cell.

    Completed cells are recorded in ``sweep_state.json`` and skipped on rerun; failed
    cells are recorded with their error and the sweep moves on.
    """
    state_path = cfg.output_dir / "sweep_state.json"
    state = json.loads(state_path.read_text()) if state_path.is_file() else {}
    if state.get("checkpoint") not in (None, checkpoint.fingerprint):
        state = {}
    state["checkpoint"] = checkpoint.fingerprint
    cells = state.setdefault("cells", {})
    rows = []
    for ref in cfg.targets:
        manifest = None
        for task in ref.tasks:
            for fraction in cfg.fractions:
                key = _cell_key(ref.name, task, fraction)
                if cells.get(key, {}).get("status") == "done":
                    rows.append(cells[key]["row"])
                    continue
                try:
                    if manifest is None:
                        manifest = load_manifest(ref.manifest, ref.name, ref.num_grades)
                        split = _split_for(cfg, ref, manifest)
                    _model, report = finetune(cfg.finetune_for(ref, task, fraction), checkpoint, split, manifest)
                except Exception as exc:  # recorded per cell; the sweep continues
                    log.error("cell %s failed: %s", key, exc)
                    cells[key] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                else:
                    row = {"dataset": ref.name, "task": task, "fraction": fraction,
                           "accuracy": report.accuracy, "precision": report.precision,
                           "recall": report.recall, "f1": report.f1}
                    cells[key] = {"status": "done", "row": row}
                    rows.append(row)
                _write_json(state_path, state)
    return rows, state


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if not cfg.targets:
        raise ConfigError("targets: at least one target dataset is required for a sweep")
    if args.checkpoint is None and not args.pretrain:
        raise ValidationError("sweep needs --checkpoint PATH or --pretrain")
    with output_lock(cfg.output_dir):
        if args.pretrain:
            if cfg.source is None:
                raise ConfigError("source: required with --pretrain")
            source = load_manifest(cfg.source.manifest, cfg.source.name, cfg.source.num_grades)
            ckpt = pretrain(cfg.pretext, source, out_dir=cfg.output_dir / "pretext")
        else:
            ckpt = load_checkpoint(args.checkpoint)
        rows, state = run_sweep(cfg, ckpt)
    csv_path = write_results_csv(rows, cfg.output_dir / "results.csv")
    failed = {k: v["error"] for k, v in state["cells"].items() if v["status"] == "failed"}
    _write_json(cfg.output_dir / "results.meta.json",
                _provenance(cfg, checkpoint_fingerprint=ckpt.fingerprint, failed_cells=failed))
    print(f"results: {csv_path}")
    print(f"cells: {len(rows)} completed, {len(failed)} failed")
    for key, err in sorted(failed.items()):
        print(f"  failed {key}: {err}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args) -> int:
    text = render_report(read_results_csv(args.csv))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    csv_path = Path(args.csv)
    rows = read_results_csv(csv_path)
    if not rows:
        raise ValidationError(f"{csv_path} holds no results to plot")
    meta_path = csv_path.with_name("results.meta.json")
    meta = {}
    if meta_path.is_file():
        doc = json.loads(meta_path.read_text())
        meta = {k: str(doc[k]) for k in ("config_fingerprint", "seed") if k in doc}
    out_dir = Path(args.out_dir) if args.out_dir else csv_path.parent
    paths, flags = plot_label_efficiency(rows, out_dir, args.format, meta)
    for p in paths:
        print(f"chart: {p}")
    for f in flags:
        print(f"warning: {f}")
    return EXIT_OK


def cmd_cam(args) -> int:
    cfg = load_config(args.config)
    ref, manifest = _load_target(cfg, args.target)
    _ckpt, model, ft_doc = _classifier_from(args.checkpoint, cfg)
    by_id = manifest.by_id()
    unknown = [i for i in args.ids if i not in by_id]
    if unknown:
        raise ValidationError(f"unknown sample ids: {', '.join(unknown)}")
    ft = cfg.finetune_for(ref, ft_doc["scheme"]["kind"], ft_doc["fraction"])
    pipeline = ft.pipeline(model.encoder_cfg.input_size).deterministic()
    display = pipeline.with_probability(0.0)
    display = type(display)(tuple(s for s in display.stages if s.kind != "normalize"), display.output_size)
    out_dir = Path(args.out_dir) if args.out_dir else cfg.output_dir / "cam"
    written = {}
    for sid in args.ids:
        raw = load_image(by_id[sid], root=manifest.root)
        x = apply(pipeline, raw, 0)
        target = args.target_class
        if target is None:
            target = int(model(x[None]).argmax(dim=1)[0])
        heat = grad_cam(model, x, target, layer=args.layer)
        path = out_dir / f"{sid}_cam_{target}.png"
        overlay(heat, apply(display, raw, 0), args.alpha, path)
        written[sid] = path.name
        print(f"cam: {path}")
    _write_json(out_dir / "cam_provenance.json", _provenance(cfg, files=written, checkpoint=str(args.checkpoint)))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslx", description="Contrastive pretraining and label-efficient transfer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic fundus-like corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--illumination-jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pretraining on the source corpus")
    p.add_argument("config")
    p.add_argument("--dry-run", action="store_true", help="validate and echo the config without training")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one target/task/fraction cell")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--task", choices=("binary", "multiclass"), default="binary")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a classifier checkpoint on a target's test split")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="label-efficiency sweep over targets, tasks and fractions")
    p.add_argument("config")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--checkpoint")
    group.add_argument("--pretrain", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a results CSV as markdown tables")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="label-efficiency charts from a results CSV")
    p.add_argument("csv")
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=("png", "svg"), default="png")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("cam", help="Grad-CAM overlays for selected samples")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ids", nargs="+", required=True)
    p.add_argument("--class", dest="target_class", type=int)
    p.add_argument("--layer")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LockError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
