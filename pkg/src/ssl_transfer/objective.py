"""NT-Xent contrastive loss.

Embedding batches hold ``2n`` rows where rows ``2k`` and ``2k + 1`` are the two views
of image ``k``. Each row is an anchor whose positive is its partner row; every other
row except the anchor itself appears in the softmax denominator.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np
import torch

DEFAULT_TEMPERATURE = 0.5


class LossValue(NamedTuple):
    total: torch.Tensor
    per_anchor: torch.Tensor


def _as_tensor(z) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z
    return torch.as_tensor(np.asarray(z, dtype=np.float64))


def _check_batch(z: torch.Tensor, temperature: float) -> None:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {tuple(z.shape)}")
    if z.shape[0] == 0 or z.shape[0] % 2:
        raise ValueError(f"need an even, nonzero number of rows (2n), got {z.shape[0]}")
    if not torch.isfinite(z).all():
        raise ValueError("embeddings contain non-finite values")


def partner_index(num_rows: int) -> torch.Tensor:
    """Index of the positive partner for each row (``i ^ 1``)."""
    return torch.arange(num_rows) ^ 1


def cosine_similarity_matrix(z) -> torch.Tensor:
    z = _as_tensor(z)
    norms = torch.linalg.vector_norm(z, dim=1, keepdim=True)
    if (norms == 0).any():
        bad = torch.nonzero(norms.squeeze(1) == 0).flatten().tolist()
        raise ValueError(f"zero-norm embedding rows: {bad}")
    unit = z / norms
    return unit @ unit.T


def nt_xent_loss(z, temperature: float = DEFAULT_TEMPERATURE) -> LossValue:
    z = _as_tensor(z)
    _check_batch(z, temperature)
    m = z.shape[0]
    logits = cosine_similarity_matrix(z) / temperature
    # the anchor itself never enters its own denominator
    self_mask = torch.eye(m, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    rows = torch.arange(m, device=z.device)
    log_denominator = torch.logsumexp(logits, dim=1)  # max-subtracted internally
    per_anchor = log_denominator - logits[rows, partner_index(m).to(z.device)]
    return LossValue(per_anchor.mean(), per_anchor)


def nt_xent_oracle(z, temperature: float = DEFAULT_TEMPERATURE) -> tuple[float, list[float]]:
    """Reference NT-Xent by explicit loops over anchors and candidates.

    Plain Python floats throughout; meant for small batches only.
    """
    rows = [[float(v) for v in r] for r in np.asarray(z, dtype=np.float64)]
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m = len(rows)
    if m == 0 or m % 2:
        raise ValueError(f"need an even, nonzero number of rows (2n), got {m}")

    def sim(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        if na == 0 or nb == 0:
            raise ValueError("zero-norm embedding row")
        return dot / (na * nb)

    per_anchor = []
    for i in range(m):
        j = i + 1 if i % 2 == 0 else i - 1
        denominator = 0.0
        for k in range(m):
            if k != i:
                denominator += math.exp(sim(rows[i], rows[k]) / temperature)
        numerator = math.exp(sim(rows[i], rows[j]) / temperature)
        per_anchor.append(-math.log(numerator / denominator))
    return sum(per_anchor) / m, per_anchor


def finite_difference_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    z,
    step: float = 1e-5,
    analytic_grad=None,
) -> float:
    """Max elementwise relative error between an analytic gradient and central differences.

    ``loss_fn`` maps a float64 tensor to a scalar tensor. The analytic gradient comes
    from autograd unless ``analytic_grad`` is given. The relative error of each
    component uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    z = _as_tensor(z).detach().to(torch.float64)
    if analytic_grad is None:
        probe = z.clone().requires_grad_(True)
        value = loss_fn(probe)
        if not torch.isfinite(value):
            raise FloatingPointError("loss is not finite at the probe point")
        (grad,) = torch.autograd.grad(value, probe, allow_unused=True)
        analytic = torch.zeros_like(z) if grad is None else grad.detach()
    else:
        analytic = _as_tensor(analytic_grad).to(torch.float64)

    numeric = torch.zeros_like(z)
    flat, out = z.view(-1), numeric.view(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + step
            plus = float(loss_fn(z))
            flat[idx] = orig - step
            minus = float(loss_fn(z))
            flat[idx] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise FloatingPointError(f"loss became non-finite while probing element {idx}")
            out[idx] = (plus - minus) / (2 * step)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(1e-8, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max())
