"""Functional LARS and momentum SGD steps over named parameter tensors.

Parameters, gradients and momentum buffers are dicts keyed by parameter name. Values
may be numpy arrays or torch tensors; the update uses only arithmetic and a norm, so
both work. Steps return new dicts and never modify their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch


class NonFiniteGradientError(FloatingPointError):
    pass


def default_exclude(name: str) -> bool:
    """Biases and normalization parameters skip trust-ratio adaptation."""
    parts = name.split(".")
    if parts[-1] == "bias":
        return True
    return any(p.startswith("bn") or "norm" in p for p in parts[:-1]) or ".downsample.1." in f".{name}"


@dataclass(frozen=True)
class LarsHyper:
    base_lr: float = 0.79
    weight_decay: float = 1e-6
    momentum: float = 0.9
    trust_coefficient: float = 1e-3
    epsilon: float = 1e-8
    exclude_from_adaptation: Callable[[str], bool] = field(default=default_exclude, compare=False)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.trust_coefficient > 0:
            raise ValueError(f"trust_coefficient must be positive, got {self.trust_coefficient}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "LarsHyper":
        """Task defaults: binary pretext (0.79, 1e-6) and multiclass (1e-3, 5e-4)."""
        base = {"binary": dict(base_lr=0.79, weight_decay=1e-6),
                "multiclass": dict(base_lr=1e-3, weight_decay=5e-4)}[task]
        return cls(**{**base, **overrides})

    def to_config(self) -> dict:
        return {k: getattr(self, k) for k in ("base_lr", "weight_decay", "momentum", "trust_coefficient", "epsilon")}


@dataclass
class OptimizerState:
    momentum: dict = field(default_factory=dict)
    step: int = 0
    trust_ratios: dict = field(default_factory=dict)

    def trust_ratio_summary(self) -> tuple[float, float, float]:
        """(min, median, max) of the trust ratios realized on the last step."""
        if not self.trust_ratios:
            return (float("nan"),) * 3
        r = np.array(list(self.trust_ratios.values()), dtype=np.float64)
        return float(r.min()), float(np.median(r)), float(r.max())


def _norm(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(torch.linalg.vector_norm(x.detach().double()))
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64).ravel()))


def _all_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(x).all())


def _zeros_like(x):
    return torch.zeros_like(x) if isinstance(x, torch.Tensor) else np.zeros_like(x)


def _validate(params: Mapping, grads: Mapping, state: OptimizerState) -> None:
    for name, w in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for {name}")
        g = grads[name]
        if tuple(g.shape) != tuple(w.shape):
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(w.shape)}")
        m = state.momentum.get(name)
        if m is not None and tuple(m.shape) != tuple(w.shape):
            raise ValueError(f"{name}: momentum shape {tuple(m.shape)} != parameter shape {tuple(w.shape)}")
        if not _all_finite(g):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; step aborted")


def _momentum_update(params, grads, state, lr_for, momentum, weight_decay):
    new_params, new_momentum = {}, dict(state.momentum)
    for name, w in params.items():
        g_eff = grads[name] + weight_decay * w
        m_prev = state.momentum.get(name)
        if m_prev is None:
            m_prev = _zeros_like(w)
        m_new = momentum * m_prev + lr_for(name, w, g_eff) * g_eff
        new_params[name] = w - m_new
        new_momentum[name] = m_new
    return new_params, new_momentum


def lars_step(params: Mapping, grads: Mapping, state: OptimizerState, hyper: LarsHyper, lr: float | None = None):
    """One LARS step. ``lr`` overrides ``hyper.base_lr`` (used by schedules)."""
    _validate(params, grads, state)
    base_lr = hyper.base_lr if lr is None else lr
    ratios = {}

    def lr_for(name, w, g_eff):
        w_norm = _norm(w)
        if hyper.exclude_from_adaptation(name) or w_norm == 0:
            r = 1.0
        else:
            r = hyper.trust_coefficient * w_norm / (_norm(g_eff) + hyper.epsilon)
        ratios[name] = r
        return r * base_lr

    new_params, new_momentum = _momentum_update(params, grads, state, lr_for, hyper.momentum, hyper.weight_decay)
    return new_params, OptimizerState(new_momentum, state.step + 1, ratios)


def sgd_step(params: Mapping, grads: Mapping, state: OptimizerState, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0):
    if lr < 0 or not math.isfinite(lr):
        raise ValueError(f"lr must be a finite nonnegative number, got {lr}")
    _validate(params, grads, state)
    new_params, new_momentum = _momentum_update(params, grads, state, lambda *_: lr, momentum, weight_decay)
    return new_params, OptimizerState(new_momentum, state.step + 1, dict.fromkeys(params, 1.0))


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))
