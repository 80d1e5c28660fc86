"""Seeded augmentation pipelines for contrastive views and fine-tuning.

Images are ``H x W x 3`` float arrays in [0, 1]. Every stage draws one uniform
number to decide whether it fires, then (only when firing) its own parameters, all
from a single generator seeded per call, so ``apply`` is a pure function of
``(pipeline, image, seed)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

STAGE_KINDS = (
    "resize",
    "horizontal_flip",
    "vertical_flip",
    "grayscale",
    "gaussian_blur",
    "color_jitter",
    "random_affine",
    "random_crop",
    "normalize",
)

# stages that define geometry or value range and therefore must always run
_MANDATORY = ("resize", "random_crop", "normalize")

LUMA = np.array([0.299, 0.587, 0.114])


class AugmentationError(ValueError):
    pass


def _pair(value, name) -> tuple:
    if np.isscalar(value):
        return (value, value)
    value = tuple(value)
    if len(value) != 2:
        raise AugmentationError(f"{name} must be a pair, got {value}")
    return value


@dataclass(frozen=True)
class TransformStage:
    kind: str
    probability: float = 1.0
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise AugmentationError(f"unknown stage kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentationError(f"{self.kind}: probability {self.probability} outside [0, 1]")
        if self.kind in ("resize", "random_crop") and self.probability != 1.0:
            raise AugmentationError(f"{self.kind} fixes the output geometry and must have probability 1")
        p = dict(self.params)
        if self.kind in ("resize", "random_crop"):
            p["size"] = tuple(int(v) for v in _pair(p["size"], "size"))
            if min(p["size"]) < 1:
                raise AugmentationError(f"{self.kind}: size must be positive, got {p['size']}")
        if self.kind == "random_crop":
            p["scale"] = tuple(float(v) for v in p.get("scale", (0.8, 1.0)))
            p["ratio"] = tuple(float(v) for v in p.get("ratio", (3 / 4, 4 / 3)))
            if not 0 < p["scale"][0] <= p["scale"][1] <= 1:
                raise AugmentationError(f"random_crop: bad scale range {p['scale']}")
        if self.kind == "gaussian_blur":
            p["kernel"] = tuple(int(v) for v in _pair(p.get("kernel", (21, 21)), "kernel"))
            if any(k <= 0 or k % 2 == 0 for k in p["kernel"]):
                raise AugmentationError(f"gaussian_blur: kernel dims must be odd and positive, got {p['kernel']}")
            p["sigma"] = tuple(float(v) for v in p.get("sigma", (0.1, 2.0)))
            if not 0 < p["sigma"][0] <= p["sigma"][1]:
                raise AugmentationError(f"gaussian_blur: bad sigma range {p['sigma']}")
        if self.kind == "color_jitter":
            for key in ("brightness", "contrast", "saturation", "hue"):
                p[key] = float(p.get(key, 0.0))
                if p[key] < 0:
                    raise AugmentationError(f"color_jitter: {key} must be nonnegative")
            if p["hue"] > 0.5:
                raise AugmentationError("color_jitter: hue strength must be at most 0.5")
        if self.kind == "random_affine":
            p["degrees"] = tuple(float(v) for v in _pair(p.get("degrees", (0.0, 0.0)), "degrees"))
            p["translate"] = tuple(float(v) for v in _pair(p.get("translate", (0.0, 0.0)), "translate"))
            if any(not 0 <= t <= 1 for t in p["translate"]):
                raise AugmentationError("random_affine: translate fractions must lie in [0, 1]")
        if self.kind == "normalize":
            p["mean"] = tuple(float(v) for v in p["mean"])
            p["std"] = tuple(float(v) for v in p["std"])
            if len(p["mean"]) != 3 or len(p["std"]) != 3:
                raise AugmentationError("normalize: mean and std need 3 channels")
            if any(s <= 0 for s in p["std"]):
                raise AugmentationError("normalize: std must be strictly positive")
        object.__setattr__(self, "params", p)

    def describe(self) -> str:
        args = ", ".join(f"{k}={self.params[k]}" for k in sorted(self.params))
        return f"{self.kind}(p={self.probability}{', ' + args if args else ''})"

    def to_config(self) -> dict:
        return {"kind": self.kind, "probability": self.probability,
                "params": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.params.items())}}


@dataclass(frozen=True)
class AugmentationPipeline:
    stages: tuple[TransformStage, ...]
    output_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "output_size", tuple(int(v) for v in self.output_size))
        sized = [s for s in self.stages if s.kind in ("resize", "random_crop")]
        if not sized:
            raise AugmentationError("pipeline needs a resize or random_crop stage")
        if sized[-1].params["size"] != self.output_size:
            raise AugmentationError(
                f"last sizing stage produces {sized[-1].params['size']}, pipeline declares {self.output_size}"
            )

    def describe(self) -> str:
        lines = [f"output_size={self.output_size}"]
        lines += [f"{i}: {s.describe()}" for i, s in enumerate(self.stages)]
        return "\n".join(lines)

    def to_config(self) -> dict:
        return {"output_size": list(self.output_size), "stages": [s.to_config() for s in self.stages]}

    @classmethod
    def from_config(cls, doc: Mapping) -> "AugmentationPipeline":
        stages = [TransformStage(s["kind"], s.get("probability", 1.0), s.get("params", {})) for s in doc["stages"]]
        return cls(tuple(stages), tuple(doc["output_size"]))

    def with_probability(self, probability: float) -> "AugmentationPipeline":
        """Copy with every optional stage set to ``probability``."""
        stages = tuple(
            s if s.kind in _MANDATORY else TransformStage(s.kind, probability, s.params) for s in self.stages
        )
        return AugmentationPipeline(stages, self.output_size)

    def deterministic(self) -> "AugmentationPipeline":
        """Evaluation pipeline: only resize and normalize stages survive."""
        stages = tuple(s for s in self.stages if s.kind in ("resize", "normalize"))
        return AugmentationPipeline(stages, self.output_size)

    def find(self, kind: str) -> TransformStage | None:
        return next((s for s in self.stages if s.kind == kind), None)


# --- pipeline builders --------------------------------------------------------------

PRETEXT_DEFAULTS = {
    "output_size": (224, 224),
    "hflip_p": 0.5,
    "vflip_p": 0.5,
    "grayscale_p": 0.2,
    "blur_p": 0.5,
    "blur_kernel": (21, 21),
    "blur_sigma": (0.1, 2.0),
    # transforms named in prose but absent from the hyperparameter table; off by default
    "affine_p": 0.0,
    "affine_degrees": (-180.0, 180.0),
    "affine_translate": (0.2, 0.2),
    "crop": False,
    "crop_scale": (0.8, 1.0),
}

FINETUNE_DEFAULTS = {
    "output_size": (224, 224),
    "crop_scale": (0.8, 1.0),
    "hflip_p": 0.5,
    "jitter_p": 1.0,
    "brightness": 0.4,
    "contrast": 0.4,
    "saturation": 0.4,
    "hue": 0.1,
    "affine_p": 1.0,
    "affine_degrees": (-180.0, 180.0),
    "affine_translate": (0.2, 0.2),
    "grayscale_p": 0.2,
    "mean": (0.425, 0.297, 0.212),
    "std": (0.276, 0.202, 0.168),
    # binary fine-tuning uses resize + crop only unless this is set
    "binary_extras": False,
}


def _merge(defaults: dict, config: Mapping | None) -> dict:
    merged = dict(defaults)
    for key, value in (config or {}).items():
        if key not in defaults:
            raise AugmentationError(f"unknown augmentation option {key!r}")
        merged[key] = value
    merged["output_size"] = _pair(merged["output_size"], "output_size")
    return merged


def build_pretext_pipeline(config: Mapping | None = None) -> AugmentationPipeline:
    c = _merge(PRETEXT_DEFAULTS, config)
    size = c["output_size"]
    stages = [TransformStage("resize", 1.0, {"size": size})]
    if c["crop"]:
        stages.append(TransformStage("random_crop", 1.0, {"size": size, "scale": c["crop_scale"]}))
    stages += [
        TransformStage("horizontal_flip", c["hflip_p"]),
        TransformStage("vertical_flip", c["vflip_p"]),
    ]
    if c["affine_p"] > 0:
        stages.append(TransformStage("random_affine", c["affine_p"],
                                     {"degrees": c["affine_degrees"], "translate": c["affine_translate"]}))
    stages += [
        TransformStage("grayscale", c["grayscale_p"]),
        TransformStage("gaussian_blur", c["blur_p"], {"kernel": c["blur_kernel"], "sigma": c["blur_sigma"]}),
    ]
    return AugmentationPipeline(tuple(stages), size)


def build_finetune_pipeline(config: Mapping | None = None, task: str = "binary") -> AugmentationPipeline:
    if task not in ("binary", "multiclass"):
        raise AugmentationError(f"task must be binary or multiclass, got {task!r}")
    c = _merge(FINETUNE_DEFAULTS, config)
    size = c["output_size"]
    stages = [
        TransformStage("resize", 1.0, {"size": size}),
        TransformStage("random_crop", 1.0, {"size": size, "scale": c["crop_scale"]}),
    ]
    if task == "multiclass" or c["binary_extras"]:
        stages += [
            TransformStage("horizontal_flip", c["hflip_p"]),
            TransformStage("color_jitter", c["jitter_p"], {k: c[k] for k in ("brightness", "contrast", "saturation", "hue")}),
            TransformStage("random_affine", c["affine_p"],
                           {"degrees": c["affine_degrees"], "translate": c["affine_translate"]}),
            TransformStage("grayscale", c["grayscale_p"]),
            TransformStage("normalize", 1.0, {"mean": c["mean"], "std": c["std"]}),
        ]
    return AugmentationPipeline(tuple(stages), size)


# --- primitive transforms -----------------------------------------------------------


def resize(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with half-pixel centres; a no-op at the current size."""
    h, w = image.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return image
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    return _sample_bilinear(image, *np.meshgrid(ys, xs, indexing="ij"))


def _sample_bilinear(image, rows, cols, mode="nearest", cval=0.0):
    out = np.empty(rows.shape + (image.shape[2],), dtype=image.dtype)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(image[..., ch], [rows, cols], order=1, mode=mode, cval=cval)
    return out


def to_grayscale(image: np.ndarray) -> np.ndarray:
    luma = image @ LUMA.astype(image.dtype)
    return np.repeat(luma[..., None], 3, axis=2)


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, kernel, sigma: float) -> np.ndarray:
    kh, kw = kernel
    out = ndimage.convolve1d(image, gaussian_kernel1d(kh, sigma).astype(image.dtype), axis=0, mode="reflect")
    return ndimage.convolve1d(out, gaussian_kernel1d(kw, sigma).astype(image.dtype), axis=1, mode="reflect")


def _blend(a, b, factor):
    return np.clip(factor * a + (1 - factor) * b, 0.0, 1.0)


def color_jitter(image, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0):
    """Apply jitter factors in a fixed order: brightness, contrast, saturation, hue."""
    out = np.clip(image * brightness, 0.0, 1.0)
    out = _blend(out, np.full_like(out, to_grayscale(out)[..., 0].mean()), contrast)
    out = _blend(out, to_grayscale(out), saturation)
    if hue != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = hsv_to_rgb(hsv).astype(image.dtype)
    return out


def affine(image, angle_deg: float, shift) -> np.ndarray:
    """Rotate about the centre by ``angle_deg`` then translate by ``shift`` (rows, cols) pixels."""
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source location
    y, x = rows - cy - shift[0], cols - cx - shift[1]
    t = np.deg2rad(angle_deg)
    src_r = np.cos(t) * y - np.sin(t) * x + cy
    src_c = np.sin(t) * y + np.cos(t) * x + cx
    return _sample_bilinear(image, src_r, src_c, mode="constant", cval=0.0)


def crop_and_resize(image, top: int, left: int, height: int, width: int, size) -> np.ndarray:
    return resize(image[top : top + height, left : left + width], size)


def normalize(image, mean, std) -> np.ndarray:
    return (image - np.asarray(mean, dtype=image.dtype)) / np.asarray(std, dtype=image.dtype)


def denormalize(image, mean, std) -> np.ndarray:
    return image * np.asarray(std, dtype=image.dtype) + np.asarray(mean, dtype=image.dtype)


def _random_crop_box(rng, h, w, scale, ratio):
    area = h * w
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(*log_ratio))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    # fall back to the largest centred crop of the clamped aspect ratio
    aspect = w / h
    if aspect < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif aspect > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _run_stage(stage: TransformStage, image, rng):
    p = stage.params
    kind = stage.kind
    if kind == "resize":
        return resize(image, p["size"])
    if kind == "horizontal_flip":
        return image[:, ::-1]
    if kind == "vertical_flip":
        return image[::-1]
    if kind == "grayscale":
        return to_grayscale(image)
    if kind == "gaussian_blur":
        return gaussian_blur(image, p["kernel"], rng.uniform(*p["sigma"]))
    if kind == "color_jitter":
        factors = {k: rng.uniform(max(0.0, 1 - p[k]), 1 + p[k]) for k in ("brightness", "contrast", "saturation")}
        return color_jitter(image, hue=rng.uniform(-p["hue"], p["hue"]), **factors)
    if kind == "random_affine":
        h, w = image.shape[:2]
        angle = rng.uniform(*p["degrees"])
        ty = rng.uniform(-p["translate"][0], p["translate"][0]) * h
        tx = rng.uniform(-p["translate"][1], p["translate"][1]) * w
        return affine(image, angle, (ty, tx))
    if kind == "random_crop":
        h, w = image.shape[:2]
        th, tw = p["size"]
        if h < th or w < tw:
            raise AugmentationError(f"image {h}x{w} is smaller than the crop target {th}x{tw}")
        top, left, ch, cw = _random_crop_box(rng, h, w, p["scale"], p["ratio"])
        return crop_and_resize(image, top, left, ch, cw, p["size"])
    if kind == "normalize":
        return normalize(image, p["mean"], p["std"])
    raise AssertionError(kind)


def apply_traced(pipeline: AugmentationPipeline, image: np.ndarray, rng_seed) -> tuple[np.ndarray, tuple[bool, ...]]:
    """Like :func:`apply` but also report which stages fired."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise AugmentationError(f"expected an H x W x 3 image, got shape {image.shape}")
    if not np.issubdtype(image.dtype, np.floating):
        raise AugmentationError(f"expected a floating point image, got {image.dtype}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    fired = []
    out = image
    for stage in pipeline.stages:
        hit = rng.random() < stage.probability
        fired.append(bool(hit))
        if hit:
            out = _run_stage(stage, out, rng)
    return np.ascontiguousarray(out), tuple(fired)


def apply(pipeline: AugmentationPipeline, image: np.ndarray, rng_seed) -> np.ndarray:
    return apply_traced(pipeline, image, rng_seed)[0]


def make_view_pair(image: np.ndarray, pipeline: AugmentationPipeline, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic views of ``image``.

    ``rng_seed`` may be an int or a :class:`numpy.random.SeedSequence`; the two
    views use distinct child streams spawned from it.
    """
    seq = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    # derive children by key rather than spawn(), which mutates the caller's sequence
    seq_a, seq_b = (np.random.SeedSequence(seq.entropy, spawn_key=(*seq.spawn_key, k)) for k in (0, 1))
    return apply(pipeline, image, seq_a), apply(pipeline, image, seq_b)
