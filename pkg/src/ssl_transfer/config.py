"""Experiment configuration files (TOML) with validation before any work starts."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugmentationError, build_finetune_pipeline, build_pretext_pipeline
from .datasets import LabelScheme, registered_num_grades
from .model import ClassifierHeadConfig, EncoderConfig, ModelConfigError, ProjectionHeadConfig, fingerprint
from .optim import LarsHyper
from .trainer import ConfigError, FinetuneConfig, PretextConfig

OUTPUT_ROOT_ENV = "SSLX_OUTPUT_ROOT"
DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.5, 1.0)
TASKS = ("binary", "multiclass")

_TOP_KEYS = {"seed", "output_dir", "source", "pretext", "finetune", "targets", "sweep"}
_DATASET_KEYS = {"name", "manifest", "num_grades", "tasks"}
_PRETEXT_KEYS = {"batch_size", "epochs", "temperature", "checkpoint_every", "lr_schedule",
                 "encoder", "projection", "optimizer", "augment"}
_FINETUNE_KEYS = {"batch_size", "epochs", "hidden_dim", "mode", "positive_threshold", "freeze_bn",
                  "lr_schedule", "patience", "optimizer", "augment"}
_SWEEP_KEYS = {"fractions", "split_ratios"}
_OPTIM_KEYS = {"base_lr", "weight_decay", "momentum", "trust_coefficient", "epsilon"}


@dataclass(frozen=True)
class DatasetRef:
    name: str
    manifest: Path
    num_grades: int | None = None
    tasks: tuple[str, ...] = ("binary",)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: Path
    pretext: PretextConfig
    finetune: FinetuneConfig
    source: DatasetRef | None = None
    targets: tuple[DatasetRef, ...] = ()
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def fingerprint(self) -> str:
        return fingerprint(_canonical(self.raw))

    def target(self, name: str) -> DatasetRef:
        for t in self.targets:
            if t.name == name:
                return t
        raise ConfigError(f"targets: no target dataset named {name!r}")

    def finetune_for(self, target: DatasetRef, task: str, fraction: float) -> FinetuneConfig:
        if task == "binary":
            scheme = LabelScheme.binary(self.finetune.scheme.positive_threshold)
        else:
            scheme = LabelScheme.multiclass(target.num_grades or registered_num_grades(target.name))
        return replace(self.finetune, scheme=scheme, fraction=fraction)


def _canonical(value):
    if isinstance(value, Mapping):
        return {k: _canonical(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    return value


def _check_keys(section: Mapping, allowed: set, where: str) -> None:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where}: expected a table")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _typed(section: Mapping, key: str, kind, where: str, default=None):
    if key not in section:
        return default
    value = section[key]
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kinds) or (isinstance(value, bool) and bool not in kinds):
        raise ConfigError(f"{where}.{key}: expected {'/'.join(k.__name__ for k in kinds)}, got {value!r}")
    return value


def _dataset(doc: Mapping, where: str, base: Path, check_paths: bool) -> DatasetRef:
    _check_keys(doc, _DATASET_KEYS, where)
    name = _typed(doc, "name", str, where)
    if not name:
        raise ConfigError(f"{where}.name: required")
    manifest = _typed(doc, "manifest", str, where)
    if not manifest:
        raise ConfigError(f"{where}.manifest: required")
    path = (base / manifest).resolve()
    if check_paths and not path.is_file():
        raise ConfigError(f"{where}.manifest: file not found: {path}")
    num_grades = _typed(doc, "num_grades", int, where)
    if num_grades is None and registered_num_grades(name) is None:
        raise ConfigError(f"{where}.num_grades: required for unregistered dataset {name!r}")
    tasks = tuple(doc.get("tasks", ("binary",)))
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise ConfigError(f"{where}.tasks: must be a nonempty subset of {TASKS}, got {list(tasks)}")
    return DatasetRef(name, path, num_grades, tasks)


def _optimizer(doc: Mapping, where: str, task_default: str) -> LarsHyper:
    _check_keys(doc, _OPTIM_KEYS, where)
    values = {k: _typed(doc, k, float, where) for k in _OPTIM_KEYS if k in doc}
    try:
        return LarsHyper.for_task(task_default, **values)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _pretext(doc: Mapping, seed: int) -> PretextConfig:
    where = "pretext"
    _check_keys(doc, _PRETEXT_KEYS, where)
    try:
        enc_doc = dict(doc.get("encoder", {}))
        _check_keys(enc_doc, {"architecture", "feature_dim", "input_size", "channels"}, "pretext.encoder")
        encoder = EncoderConfig(**enc_doc)
        proj_doc = dict(doc.get("projection", {}))
        _check_keys(proj_doc, {"layer_dims"}, "pretext.projection")
        projection = ProjectionHeadConfig(**proj_doc) if proj_doc else ProjectionHeadConfig()
    except (ModelConfigError, TypeError) as exc:
        raise ConfigError(f"{where}.encoder/projection: {exc}") from None
    augment = dict(doc.get("augment", {}))
    cfg = PretextConfig(
        batch_size=_typed(doc, "batch_size", int, where, 128),
        epochs=_typed(doc, "epochs", int, where, 10),
        temperature=_typed(doc, "temperature", float, where, 0.5),
        augment=augment,
        encoder=encoder,
        projection=projection,
        optimizer=_optimizer(doc.get("optimizer", {}), "pretext.optimizer", "binary"),
        seed=seed,
        checkpoint_every=_typed(doc, "checkpoint_every", int, where, 0),
        lr_schedule=_typed(doc, "lr_schedule", str, where, "constant"),
    )
    cfg.validate()
    try:
        cfg.pipeline()
    except AugmentationError as exc:
        raise ConfigError(f"pretext.augment: {exc}") from None
    return cfg


def _finetune(doc: Mapping, seed: int, input_size) -> FinetuneConfig:
    where = "finetune"
    _check_keys(doc, _FINETUNE_KEYS, where)
    cfg = FinetuneConfig(
        batch_size=_typed(doc, "batch_size", int, where, 256),
        epochs=_typed(doc, "epochs", int, where, 20),
        scheme=LabelScheme.binary(_typed(doc, "positive_threshold", int, where, 1)),
        augment=dict(doc.get("augment", {})),
        hidden_dim=_typed(doc, "hidden_dim", int, where, 512),
        optimizer=_optimizer(doc.get("optimizer", {}), "finetune.optimizer", "multiclass"),
        seed=seed,
        mode=_typed(doc, "mode", str, where, "full_finetune"),
        freeze_bn=_typed(doc, "freeze_bn", bool, where, False),
        lr_schedule=_typed(doc, "lr_schedule", str, where, "constant"),
        patience=_typed(doc, "patience", int, where, 0),
    )
    try:
        cfg.validate()
        ClassifierHeadConfig(2, cfg.hidden_dim)
        for task in TASKS:
            build_finetune_pipeline({"output_size": tuple(input_size), **cfg.augment}, task)
    except (AugmentationError, ModelConfigError) as exc:
        raise ConfigError(f"finetune: {exc}") from None
    return cfg


def output_root(config_dir: Path) -> Path:
    env = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(env) if env else config_dir


def parse_config(doc: Mapping, base_dir=".", check_paths: bool = True) -> ExperimentConfig:
    base = Path(base_dir).resolve()
    _check_keys(doc, _TOP_KEYS, "config")
    seed = _typed(doc, "seed", int, "config", 0)
    out = _typed(doc, "output_dir", str, "config", "runs/default")
    out_path = Path(out) if Path(out).is_absolute() else output_root(base) / out

    source = _dataset(doc["source"], "source", base, check_paths) if "source" in doc else None
    pretext = _pretext(doc.get("pretext", {}), seed)
    finetune = _finetune(doc.get("finetune", {}), seed, pretext.encoder.input_size)

    targets_doc = doc.get("targets", [])
    if not isinstance(targets_doc, list):
        raise ConfigError("targets: expected an array of tables")
    targets = tuple(_dataset(t, f"targets[{i}]", base, check_paths) for i, t in enumerate(targets_doc))
    names = [t.name for t in targets]
    if len(set(names)) != len(names):
        raise ConfigError(f"targets: duplicate dataset names {names}")

    sweep = doc.get("sweep", {})
    _check_keys(sweep, _SWEEP_KEYS, "sweep")
    fractions = tuple(float(f) for f in sweep.get("fractions", DEFAULT_FRACTIONS))
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError(f"sweep.fractions: values must lie in (0, 1], got {list(fractions)}")
    ratios = tuple(float(r) for r in sweep.get("split_ratios", (0.8, 0.1, 0.1)))
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"sweep.split_ratios: need three positive ratios summing to 1, got {list(ratios)}")

    return ExperimentConfig(seed, out_path, pretext, finetune, source, targets,
                            tuple(sorted(set(fractions))), ratios, _canonical(doc))


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_config(doc, path.parent, check_paths)
