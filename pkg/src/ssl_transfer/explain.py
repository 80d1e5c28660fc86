"""Grad-CAM heatmaps and overlays for classifier bundles."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image
from torch.nn import functional as F

from .model import ModelBundle

COLORMAP = "jet"


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    target_class: int
    layer: str


def _resolve_layer(model: ModelBundle, layer: str | None):
    name = layer or getattr(model.encoder, "last_conv", None)
    if name is None:
        raise ValueError("model has no convolutional feature layer to explain")
    try:
        return name, model.encoder.get_submodule(name)
    except AttributeError:
        raise ValueError(f"encoder has no layer named {name!r}") from None


def grad_cam(model: ModelBundle, image: np.ndarray, target_class: int, layer: str | None = None) -> Heatmap:
    """Class activation map for ``target_class`` at the input resolution.

    Channel weights are the spatial mean of the target logit's gradient with respect to
    the chosen feature maps (the last convolutional block by default); the rectified
    weighted sum is upsampled bilinearly and min-max scaled to [0, 1]. A map with no
    positive evidence is returned as all zeros.
    """
    if model.head_kind != "classifier":
        raise ValueError("Grad-CAM needs a classifier head")
    num_classes = model.head_cfg.num_classes
    if not 0 <= target_class < num_classes:
        raise ValueError(f"target_class {target_class} outside [0, {num_classes})")
    name, module = _resolve_layer(model, layer)

    captured = {}

    def hook(_module, _inputs, output):
        output.retain_grad()
        captured["maps"] = output

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(np.asarray(image)[None])
            maps = captured.get("maps")
            if maps is None or maps.ndim != 4:
                raise ValueError(f"layer {name!r} does not produce convolutional feature maps")
            model.zero_grad()
            logits[0, target_class].backward()
            grads = maps.grad
    finally:
        handle.remove()
        model.train(was_training)

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * maps).sum(dim=1, keepdim=True)).detach()
    h, w = np.asarray(image).shape[:2]
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)[0, 0].double().numpy()
    cam = np.clip(cam, 0.0, None)
    hi, lo = cam.max(), cam.min()
    if hi <= 0:
        values = np.zeros_like(cam)
    elif hi > lo:
        values = (cam - lo) / (hi - lo)
    else:
        values = np.ones_like(cam)
    return Heatmap(values, target_class, name)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB floats with the fixed colormap."""
    return colormaps[COLORMAP](np.clip(values, 0, 1))[..., :3]


def blend(heatmap: Heatmap | np.ndarray, image: np.ndarray, alpha: float) -> np.ndarray:
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    image = np.asarray(image, dtype=np.float64)
    if values.shape != image.shape[:2]:
        raise ValueError(f"heatmap shape {values.shape} does not match image shape {image.shape[:2]}")
    return (1 - alpha) * image + alpha * colorize(values)


def overlay(heatmap: Heatmap | np.ndarray, image: np.ndarray, alpha: float = 0.4, path=None) -> np.ndarray:
    """Blend the colour-mapped heatmap over ``image``; write an 8-bit PNG when ``path`` is given."""
    out = np.round(np.clip(blend(heatmap, image, alpha), 0, 1) * 255).astype(np.uint8)
    if path is not None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(out, mode="RGB").save(path)
        except OSError as exc:
            raise OSError(f"cannot write overlay to {path}: {exc}") from exc
    return out


def localization_score(heatmap: Heatmap, blobs, shape) -> tuple[float, float]:
    """Mean heatmap value inside vs outside the blobs' bounding boxes."""
    h, w = shape
    inside = np.zeros((h, w), dtype=bool)
    for row, col, radius in blobs:
        r0, r1 = int(np.floor(row - radius)), int(np.ceil(row + radius))
        c0, c1 = int(np.floor(col - radius)), int(np.ceil(col + radius))
        inside[max(r0, 0) : min(r1, h), max(c0, 0) : min(c1, w)] = True
    if not inside.any() or inside.all():
        raise ValueError("blob boxes must cover part, but not all, of the image")
    return float(heatmap.values[inside].mean()), float(heatmap.values[~inside].mean())
