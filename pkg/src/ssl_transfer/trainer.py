"""Pretext contrastive training, downstream fine-tuning and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .augment import AugmentationPipeline, apply, build_finetune_pipeline, build_pretext_pipeline, make_view_pair
from .checkpoint import Checkpoint, save_checkpoint
from .datasets import DatasetManifest, LabelScheme, SplitSpec, apply_label_scheme, load_image, subset_by_fraction
from .metrics import MetricsReport, confusion_matrix
from .model import (
    ClassifierHeadConfig,
    EncoderConfig,
    ModelBundle,
    ProjectionHeadConfig,
    build_model,
    fingerprint,
    forward_classify,
    forward_embed,
    transfer_encoder,
)
from .objective import DEFAULT_TEMPERATURE, nt_xent_loss
from .optim import LarsHyper, OptimizerState, cosine_lr, lars_step

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "epoch", "loss", "lr", "trust_ratio_median")
FINETUNE_MODES = ("full_finetune", "linear_probe")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretextConfig:
    batch_size: int = 128
    epochs: int = 10
    temperature: float = DEFAULT_TEMPERATURE
    augment: dict = field(default_factory=dict)
    encoder: EncoderConfig = EncoderConfig()
    projection: ProjectionHeadConfig = ProjectionHeadConfig()
    optimizer: LarsHyper = LarsHyper.for_task("binary")
    seed: int = 0
    checkpoint_every: int = 0
    lr_schedule: str = "constant"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 for contrastive training, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")

    def pipeline(self) -> AugmentationPipeline:
        aug = {"output_size": self.encoder.input_size, **self.augment}
        pipe = build_pretext_pipeline(aug)
        if pipe.output_size != self.encoder.input_size:
            raise ConfigError(f"augmentation output {pipe.output_size} != encoder input {self.encoder.input_size}")
        return pipe

    def to_config(self) -> dict:
        return {
            "batch_size": self.batch_size, "epochs": self.epochs, "temperature": self.temperature,
            "augment": _jsonable(self.augment), "optimizer": self.optimizer.to_config(), "seed": self.seed,
            "checkpoint_every": self.checkpoint_every, "lr_schedule": self.lr_schedule,
        }


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 256
    epochs: int = 20
    scheme: LabelScheme = LabelScheme.binary(1)
    fraction: float = 1.0
    augment: dict = field(default_factory=dict)
    hidden_dim: int = 512
    optimizer: LarsHyper = LarsHyper.for_task("multiclass")
    seed: int = 0
    mode: str = "full_finetune"
    freeze_bn: bool = False
    lr_schedule: str = "constant"
    patience: int = 0

    def validate(self) -> None:
        if self.patience < 0:
            raise ConfigError("patience must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.scheme.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.mode not in FINETUNE_MODES:
            raise ConfigError(f"mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")

    @property
    def task(self) -> str:
        return self.scheme.kind

    def head_config(self, in_dim: int | None = None) -> ClassifierHeadConfig:
        return ClassifierHeadConfig(self.scheme.num_classes, self.hidden_dim, in_dim)

    def pipeline(self, input_size) -> AugmentationPipeline:
        return build_finetune_pipeline({"output_size": tuple(input_size), **self.augment}, self.task)

    def to_config(self) -> dict:
        return {
            "batch_size": self.batch_size, "epochs": self.epochs,
            "scheme": {"kind": self.scheme.kind, "num_classes": self.scheme.num_classes,
                       "positive_threshold": self.scheme.positive_threshold},
            "fraction": self.fraction, "augment": _jsonable(self.augment), "hidden_dim": self.hidden_dim,
            "optimizer": self.optimizer.to_config(), "seed": self.seed, "mode": self.mode,
            "freeze_bn": self.freeze_bn, "lr_schedule": self.lr_schedule, "patience": self.patience,
        }


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


# --- shared helpers -----------------------------------------------------------------


def _load_images(manifest: DatasetManifest, ids: Sequence[str]) -> list[np.ndarray]:
    """Decode images by path only; grades are never consulted here."""
    by_id = {s.id: s for s in manifest.samples}
    return [load_image(by_id[i], root=manifest.root) for i in ids]


def _lr_at(base: float, schedule: str, step: int, total: int) -> float:
    return cosine_lr(base, step, total) if schedule == "cosine" else base


def _optimizer_step(model: ModelBundle, names: Sequence[str], state: OptimizerState, hyper: LarsHyper,
                    lr: float) -> OptimizerState:
    named = dict(model.named_parameters())
    params = {n: named[n].detach() for n in names}
    grads = {n: (named[n].grad if named[n].grad is not None else torch.zeros_like(named[n])) for n in names}
    new_params, state = lars_step(params, grads, state, hyper, lr=lr)
    with torch.no_grad():
        for n in names:
            named[n].copy_(new_params[n])
    return state


class _MetricsLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                path.write_text(",".join(LOG_HEADER) + "\n")

    def append(self, step, epoch, loss, lr, trust_median):
        if self.path is None:
            return
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                (step, epoch, f"{loss:.8g}", f"{lr:.8g}", f"{trust_median:.8g}"))


def _optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state.momentum.items()}


def pretext_checkpoint(model: ModelBundle, config: PretextConfig | None, state: OptimizerState | None = None,
                       epoch: int = 0, metrics: dict | None = None, dataset: str = "") -> Checkpoint:
    doc = {
        "kind": "pretext",
        "encoder": model.encoder_cfg.to_config(),
        "encoder_fingerprint": model.encoder_fingerprint,
        "head": model.head_cfg.to_config(),
        "pretext": None if config is None else config.to_config(),
        "dataset": dataset,
    }
    state = state or OptimizerState()
    return Checkpoint(model.named_arrays(), doc, _optimizer_arrays(state), state.step, epoch, metrics or {})


def random_init_checkpoint(encoder_cfg: EncoderConfig, projection_cfg: ProjectionHeadConfig | None = None,
                           seed: int = 0) -> Checkpoint:
    """Checkpoint of an untrained bundle, the baseline for transfer comparisons."""
    model = build_model(encoder_cfg, projection_cfg or ProjectionHeadConfig(), seed)
    return pretext_checkpoint(model, None, metrics={"untrained": True})


# --- pretext ------------------------------------------------------------------------


def pretrain(config: PretextConfig, manifest: DatasetManifest, out_dir=None) -> Checkpoint:
    """Contrastive pretraining on an unlabeled manifest.

    Only ``id`` and ``image_path`` of each sample are read. With ``out_dir`` set, the
    step log goes to ``pretext_log.csv`` and checkpoints are written every
    ``checkpoint_every`` epochs plus ``pretext_final.ckpt`` at the end.
    """
    config.validate()
    samples = list(manifest.samples)
    if not samples:
        raise TrainingError("pretraining manifest is empty")
    pipeline = config.pipeline()
    out_dir = None if out_dir is None else Path(out_dir)
    metrics_log = _MetricsLog(out_dir / "pretext_log.csv" if out_dir else None)

    ids = [s.id for s in samples]
    images = _load_images(manifest, ids)
    model = build_model(config.encoder, config.projection, config.seed)
    model.train()
    names = [n for n, _ in model.named_parameters()]
    state = OptimizerState()
    rng = np.random.default_rng(config.seed)
    batches_per_epoch = sum(1 for i in range(0, len(ids), config.batch_size) if len(ids) - i >= 2)
    total_steps = batches_per_epoch * config.epochs
    epoch_losses = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(ids))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            if len(batch) < 2:
                continue  # a lone image has no negatives
            views = []
            for idx in batch:
                views.extend(make_view_pair(images[idx], pipeline, np.random.SeedSequence([config.seed, epoch, int(idx)])))
            z = forward_embed(model, np.stack(views))
            loss = nt_xent_loss(z, config.temperature).total
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {state.step}: embedding norm range "
                    f"[{float(z.norm(dim=1).min()):.3g}, {float(z.norm(dim=1).max()):.3g}]"
                )
            model.zero_grad()
            loss.backward()
            lr = _lr_at(config.optimizer.base_lr, config.lr_schedule, state.step, total_steps)
            state = _optimizer_step(model, names, state, config.optimizer, lr)
            losses.append(float(loss.detach()))
            metrics_log.append(state.step, epoch, losses[-1], lr, state.trust_ratio_summary()[1])
        epoch_losses.append(float(np.mean(losses)))
        log.info("pretext epoch %d/%d loss %.4f", epoch, config.epochs, epoch_losses[-1])
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(
                pretext_checkpoint(model, config, state, epoch, {"epoch_loss": epoch_losses}, manifest.name),
                out_dir / f"pretext_epoch{epoch:03d}.ckpt",
            )

    ckpt = pretext_checkpoint(model, config, state, config.epochs,
                              {"epoch_loss": epoch_losses, "final_loss": epoch_losses[-1]}, manifest.name)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "pretext_final.ckpt")
    return ckpt


# --- downstream ---------------------------------------------------------------------


def classifier_checkpoint(model: ModelBundle, config: FinetuneConfig, report: MetricsReport | None = None,
                          state: OptimizerState | None = None, source: str = "") -> Checkpoint:
    doc = {
        "kind": "classifier",
        "encoder": model.encoder_cfg.to_config(),
        "encoder_fingerprint": model.encoder_fingerprint,
        "head": model.head_cfg.to_config(),
        "finetune": config.to_config(),
        "source_fingerprint": source,
    }
    state = state or OptimizerState()
    metrics = {} if report is None else {k: v for k, v in report.to_dict().items() if k != "per_class"}
    return Checkpoint(model.named_arrays(), doc, _optimizer_arrays(state), state.step, config.epochs, metrics)


def _ensure_scheme(manifest: DatasetManifest, scheme: LabelScheme) -> DatasetManifest:
    if manifest.scheme == scheme:
        return manifest
    return apply_label_scheme(manifest, scheme)


def _check_split(split: SplitSpec, manifest: DatasetManifest) -> None:
    known = set(manifest.ids)
    unknown = [i for i in (*split.train_ids, *split.val_ids, *split.test_ids) if i not in known]
    if unknown:
        raise ValueError(f"split references ids missing from manifest {manifest.name!r}: {unknown[:5]}")


def _set_train_mode(model: ModelBundle, config: FinetuneConfig) -> None:
    model.train()
    if config.mode == "linear_probe" or config.freeze_bn:
        for module in model.encoder.modules():
            if isinstance(module, torch.nn.modules.batchnorm._BatchNorm):
                module.eval()
    if config.mode == "linear_probe":
        model.encoder.eval()


def finetune(config: FinetuneConfig, checkpoint: Checkpoint, split: SplitSpec, manifest: DatasetManifest,
             eval_pipeline: AugmentationPipeline | None = None) -> tuple[ModelBundle, MetricsReport]:
    """Transfer the encoder, train a classifier on the fraction subset, evaluate on test.

    In ``linear_probe`` mode the encoder (parameters and normalization statistics)
    stays frozen and only the head is optimized. With ``patience > 0`` and a nonempty
    validation split, training stops once validation accuracy has not improved for
    ``patience`` epochs and the best-scoring weights are restored.
    """
    config.validate()
    manifest = _ensure_scheme(manifest, config.scheme)
    _check_split(split, manifest)
    subset = subset_by_fraction(split, config.fraction, manifest, seed=config.seed)
    if not subset.train_ids:
        raise TrainingError("empty training split")

    encoder_dim = checkpoint.config["encoder"]["feature_dim"]
    model = transfer_encoder(checkpoint, config.head_config(in_dim=encoder_dim), init_seed=config.seed)
    pipeline = config.pipeline(model.encoder_cfg.input_size)
    labels = manifest.labels()

    probe = config.mode == "linear_probe"
    names = [n for n, _ in model.named_parameters() if not (probe and n.startswith("encoder."))]
    if probe:
        for p in model.encoder.parameters():
            p.requires_grad_(False)

    train_ids = list(subset.train_ids)
    images = _load_images(manifest, train_ids)
    targets = np.array([labels[i] for i in train_ids])
    state = OptimizerState()
    rng = np.random.default_rng(config.seed)
    total_steps = math.ceil(len(train_ids) / config.batch_size) * config.epochs
    early_stop = config.patience > 0 and bool(split.val_ids)
    best_acc, best_state, stale = -1.0, None, 0

    for epoch in range(1, config.epochs + 1):
        _set_train_mode(model, config)
        order = rng.permutation(len(train_ids))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            x = np.stack([apply(pipeline, images[i], np.random.SeedSequence([config.seed, epoch, int(i)]))
                          for i in batch])
            logits = forward_classify(model, x)
            loss = F.cross_entropy(logits, torch.as_tensor(targets[batch]))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            lr = _lr_at(config.optimizer.base_lr, config.lr_schedule, state.step, total_steps)
            state = _optimizer_step(model, names, state, config.optimizer, lr)
        log.debug("finetune epoch %d/%d loss %.4f", epoch, config.epochs, float(loss.detach()))
        if early_stop:
            val = evaluate(model, subset, manifest, config.scheme, pipeline, ids=subset.val_ids)
            if val.accuracy > best_acc:
                best_acc, stale = val.accuracy, 0
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop after epoch %d (best val accuracy %.2f)", epoch, best_acc)
                    break

    if best_state is not None:
        model.load_state_dict(best_state)

    if probe:
        for p in model.encoder.parameters():
            p.requires_grad_(True)
    model.eval()
    report = evaluate(model, subset, manifest, config.scheme, eval_pipeline or pipeline.deterministic(),
                      fraction=config.fraction)
    return model, report


def predict(model: ModelBundle, images: Sequence[np.ndarray], pipeline: AugmentationPipeline,
            batch_size: int = 256) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = np.stack([apply(pipeline, img, 0) for img in images[start : start + batch_size]])
            preds.append(forward_classify(model, x).argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelBundle, split: SplitSpec, manifest: DatasetManifest, scheme: LabelScheme,
             pipeline: AugmentationPipeline | None = None, fraction: float | None = None,
             ids: Sequence[str] | None = None) -> MetricsReport:
    """Deterministic pass over the test split (or ``ids``) with resize/normalize only."""
    if model.head_kind != "classifier" or model.head_cfg.num_classes != scheme.num_classes:
        raise ValueError("model head does not match the label scheme")
    manifest = _ensure_scheme(manifest, scheme)
    ids = list(split.test_ids if ids is None else ids)
    if not ids:
        raise ValueError("empty test split")
    if pipeline is None:
        pipeline = build_finetune_pipeline({"output_size": model.encoder_cfg.input_size}, scheme.kind)
    pipeline = pipeline.deterministic()
    labels = manifest.labels()
    truth = np.array([labels[i] for i in ids])
    pred = predict(model, _load_images(manifest, ids), pipeline)
    cm = confusion_matrix(truth, pred, scheme.num_classes)
    return MetricsReport.from_confusion(cm, scheme, dataset=manifest.name,
                                        fraction=split.fraction if fraction is None else fraction)


def config_fingerprint(*docs) -> str:
    return fingerprint(list(docs))
