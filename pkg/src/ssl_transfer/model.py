"""Encoders, projection/classifier heads and cross-task weight transfer.

Batches are channels-last (``B x H x W x 3``), matching the augmentation output; the
modules permute to channels-first internally.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

ARCHITECTURES = ("small_cnn", "reference_resnet50_style")
HEAD_KINDS = ("projection", "classifier")


class ModelConfigError(ValueError):
    pass


class FingerprintError(ValueError):
    pass


def fingerprint(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "small_cnn"
    feature_dim: int = 128
    input_size: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.architecture not in ARCHITECTURES:
            raise ModelConfigError(f"unknown architecture {self.architecture!r}")
        if self.feature_dim <= 0:
            raise ModelConfigError("feature_dim must be positive")
        if self.architecture == "reference_resnet50_style" and self.feature_dim != 2048:
            raise ModelConfigError("the ResNet-50 style encoder produces 2048 features")

    @classmethod
    def reference(cls, input_size=(224, 224)) -> "EncoderConfig":
        return cls("reference_resnet50_style", 2048, input_size, ())

    def to_config(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class ProjectionHeadConfig:
    layer_dims: tuple[int, ...] = (2048, 1024)
    in_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(v) for v in self.layer_dims))
        if not self.layer_dims or min(self.layer_dims) <= 0:
            raise ModelConfigError(f"bad projection layer dims {self.layer_dims}")

    kind = "projection"

    def dims(self, feature_dim: int) -> list[int]:
        return [feature_dim, *self.layer_dims]

    def to_config(self) -> dict:
        return {"kind": "projection", "layer_dims": list(self.layer_dims), "in_dim": self.in_dim}


@dataclass(frozen=True)
class ClassifierHeadConfig:
    """``hidden_dim=0`` gives a single linear layer (a linear probe head)."""

    num_classes: int = 2
    hidden_dim: int = 512
    in_dim: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ModelConfigError("need at least 2 classes")
        if self.hidden_dim < 0:
            raise ModelConfigError("hidden_dim must be nonnegative")

    kind = "classifier"

    def dims(self, feature_dim: int) -> list[int]:
        if self.hidden_dim:
            return [feature_dim, self.hidden_dim, self.num_classes]
        return [feature_dim, self.num_classes]

    def to_config(self) -> dict:
        return {"kind": "classifier", "num_classes": self.num_classes, "hidden_dim": self.hidden_dim,
                "in_dim": self.in_dim}


def head_config_from_dict(doc: Mapping):
    doc = dict(doc)
    kind = doc.pop("kind")
    if kind == "projection":
        return ProjectionHeadConfig(**doc)
    if kind == "classifier":
        return ClassifierHeadConfig(**doc)
    raise ModelConfigError(f"unknown head kind {kind!r}")


def encoder_config_from_dict(doc: Mapping) -> EncoderConfig:
    return EncoderConfig(**doc)


# --- encoders -----------------------------------------------------------------------


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, pool):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        return F.max_pool2d(x, 2) if self.pool else x


class SmallCNN(nn.Module):
    """Four conv blocks; the first three halve the resolution, the last keeps it."""

    last_conv = "block3"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        widths = [3, *cfg.channels, cfg.feature_dim]
        if len(widths) != 5:
            raise ModelConfigError("small_cnn takes exactly three intermediate channel widths")
        for i in range(4):
            self.add_module(f"block{i}", ConvBlock(widths[i], widths[i + 1], pool=i < 3))

    def features(self, x):
        for i in range(4):
            x = getattr(self, f"block{i}")(x)
        return x


class ResNet50Encoder(nn.Module):
    last_conv = "layer4"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        for name in ("conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"):
            self.add_module(name, getattr(net, name))

    def features(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


def _build_encoder(cfg: EncoderConfig) -> nn.Module:
    return SmallCNN(cfg) if cfg.architecture == "small_cnn" else ResNet50Encoder(cfg)


class ModelBundle(nn.Module):
    """Encoder plus exactly one head.

    Parameter names follow ``encoder.<block>.<layer>.<weight|bias>`` and
    ``head.<index>.<weight|bias>``.
    """

    def __init__(self, encoder_cfg: EncoderConfig, head_cfg):
        super().__init__()
        feature_dim = encoder_cfg.feature_dim
        if head_cfg.in_dim is not None and head_cfg.in_dim != feature_dim:
            raise ModelConfigError(
                f"head expects {head_cfg.in_dim} input features, encoder produces {feature_dim}"
            )
        self.encoder_cfg = encoder_cfg
        self.head_cfg = head_cfg
        self.head_kind = head_cfg.kind
        self.encoder = _build_encoder(encoder_cfg)
        dims = head_cfg.dims(feature_dim)
        self.head = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def config(self) -> dict:
        return {"encoder": self.encoder_cfg.to_config(), "head": self.head_cfg.to_config()}

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    @property
    def encoder_fingerprint(self) -> str:
        return fingerprint(self.encoder_cfg.to_config())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_arrays(self, prefix: str | None = None) -> dict[str, np.ndarray]:
        """All parameters and buffers as numpy copies, optionally filtered by prefix."""
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()
                if prefix is None or k.startswith(prefix)}

    def _to_nchw(self, batch) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch)
        dtype = next(self.parameters()).dtype
        x = x.to(dtype)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected a B x H x W x 3 batch, got shape {tuple(x.shape)}")
        if tuple(x.shape[1:3]) != self.encoder_cfg.input_size:
            raise ValueError(f"batch spatial size {tuple(x.shape[1:3])} != input_size {self.encoder_cfg.input_size}")
        return x.permute(0, 3, 1, 2)

    def feature_maps(self, batch) -> torch.Tensor:
        return self.encoder.features(self._to_nchw(batch))

    def pooled(self, batch) -> torch.Tensor:
        return self.feature_maps(batch).mean(dim=(2, 3))

    def run_head(self, features: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.head):
            features = layer(features)
            if i < len(self.head) - 1:
                features = F.relu(features)
        return features

    def forward(self, batch):
        return self.run_head(self.pooled(batch))


def build_model(encoder_cfg: EncoderConfig, head_cfg, init_seed: int = 0) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return ModelBundle(encoder_cfg, head_cfg)


def _require(model: ModelBundle, kind: str):
    if model.head_kind != kind:
        raise ValueError(f"model carries a {model.head_kind} head, {kind} head required")


def forward_embed(model: ModelBundle, batch) -> torch.Tensor:
    _require(model, "projection")
    return model(batch)


def forward_classify(model: ModelBundle, batch) -> torch.Tensor:
    _require(model, "classifier")
    return model(batch)


def load_arrays(model: ModelBundle, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy named arrays into the model; every model entry under ``prefix`` must be present."""
    state = model.state_dict()
    expected = [k for k in state if k.startswith(prefix)]
    missing = [k for k in expected if k not in arrays]
    if missing:
        raise KeyError(f"missing arrays: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    with torch.no_grad():
        for k in expected:
            src = np.asarray(arrays[k])
            if tuple(src.shape) != tuple(state[k].shape):
                raise ValueError(f"{k}: shape {src.shape} != {tuple(state[k].shape)}")
            state[k].copy_(torch.from_numpy(src.copy()).to(state[k].dtype))


def transfer_encoder(checkpoint, classifier_cfg: ClassifierHeadConfig, init_seed: int = 0) -> ModelBundle:
    """New classifier bundle whose encoder is copied from ``checkpoint``."""
    enc_doc = checkpoint.config.get("encoder")
    if enc_doc is None:
        raise FingerprintError("checkpoint carries no encoder configuration")
    encoder_cfg = encoder_config_from_dict(enc_doc)
    stored = checkpoint.config.get("encoder_fingerprint")
    if stored is not None and stored != fingerprint(encoder_cfg.to_config()):
        raise FingerprintError("encoder fingerprint does not match the stored encoder configuration")
    if classifier_cfg.in_dim is not None and classifier_cfg.in_dim != encoder_cfg.feature_dim:
        raise FingerprintError(
            f"checkpoint encoder ({encoder_cfg.architecture}, {encoder_cfg.feature_dim} features) "
            f"is incompatible with a classifier expecting {classifier_cfg.in_dim} inputs"
        )
    model = build_model(encoder_cfg, classifier_cfg, init_seed)
    load_arrays(model, checkpoint.params, prefix="encoder.")
    return model


def bundle_from_checkpoint(checkpoint) -> ModelBundle:
    """Rebuild the full bundle (encoder and head) stored in a checkpoint."""
    model = build_model(encoder_config_from_dict(checkpoint.config["encoder"]),
                        head_config_from_dict(checkpoint.config["head"]))
    load_arrays(model, checkpoint.params)
    return model


def _activation_pattern(model: ModelBundle, loss_fn) -> list[torch.Tensor]:
    """ReLU signs and max-pool winners seen during one evaluation of ``loss_fn``."""
    pattern: list[torch.Tensor] = []

    def conv_hook(block, _inputs, _output):
        pre = block.bn(block.conv(_inputs[0]))
        pattern.append(pre > 0)
        if block.pool:
            pattern.append(F.max_pool2d(F.relu(pre), 2, return_indices=True)[1])

    def linear_hook(_layer, _inputs, output):
        pattern.append(output > 0)

    hooks = [m.register_forward_hook(conv_hook) for m in model.modules() if isinstance(m, ConvBlock)]
    hooks += [layer.register_forward_hook(linear_hook) for layer in list(model.head)[:-1]]
    try:
        loss_fn(model)
    finally:
        for h in hooks:
            h.remove()
    return pattern


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def parameter_gradient_check(model: ModelBundle, loss_fn, num_params: int = 10, step: float = 1e-4,
                             seed: int = 0, max_draws: int = 1000) -> float:
    """Relative error of autograd vs central differences on randomly chosen scalar parameters.

    ``loss_fn(model)`` returns a scalar tensor. Run on a float64 model for meaningful
    precision. A draw whose +/- ``step`` perturbation changes any ReLU sign or max-pool
    winner straddles a point where the derivative is undefined; it is discarded and
    another parameter is drawn.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)

    model.zero_grad()
    loss_fn(model).backward()
    grads = {n: p.grad.detach().clone() for n, p in named}
    worst, checked = 0.0, 0
    with torch.no_grad():
        for _ in range(max_draws):
            if checked == num_params:
                break
            n, p = named[rng.integers(len(named))]
            idx = int(rng.integers(p.numel()))
            flat = p.view(-1)
            orig = float(flat[idx])
            base = _activation_pattern(model, loss_fn)
            flat[idx] = orig + step
            plus, pat_plus = float(loss_fn(model)), _activation_pattern(model, loss_fn)
            flat[idx] = orig - step
            minus, pat_minus = float(loss_fn(model)), _activation_pattern(model, loss_fn)
            flat[idx] = orig
            if not (_same_pattern(base, pat_plus) and _same_pattern(base, pat_minus)):
                continue
            analytic = float(grads[n].view(-1)[idx])
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
            checked += 1
    if checked < num_params:
        raise RuntimeError(f"only {checked} of {num_params} draws avoided activation switching points")
    return worst
