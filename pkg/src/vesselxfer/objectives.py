"""Training objectives of the fusion GAN, defined on [0, 1] images and raw logits.

All losses are means over every element of their inputs, so batch and patch
size do not change the meaning of the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOSS_TERMS = ("gan", "seg", "shape_a", "shape_b")


@dataclass(frozen=True)
class LossWeights:
    lambda_shape_a: float = 100.0
    mu_shape_b: float = 50.0

    def __post_init__(self):
        if self.lambda_shape_a < 0 or self.mu_shape_b < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r}{where}: {value}")
        self.term = term
        self.step = step


def _check_shapes(*tensors) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def shape_loss(fake, source, label, normalize_by_mask_area: bool = False):
    """Masked L1 distance between ``fake`` and ``source`` inside ``label``.

    By default the absolute differences are averaged over all pixels. With
    ``normalize_by_mask_area`` the sum is divided by the label area instead.
    """
    _check_shapes(fake, source, label)
    diff = torch.abs(label * (fake - source))
    if normalize_by_mask_area:
        return diff.sum() / torch.clamp(label.sum(), min=1.0)
    return diff.mean()


def gan_loss_discriminator(real_logits, fake_logits):
    """-mean log D(real) - mean log(1 - D(fake)), with D = sigmoid(logit)."""
    return -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()


def gan_loss_generator(fake_logits):
    """Non-saturating generator loss -mean log D(fake)."""
    return -F.logsigmoid(fake_logits).mean()


def seg_loss(logits, target):
    """Per-pixel logistic loss -(y log s(z) + (1 - y) log(1 - s(z))), averaged.

    This is the single-class form of a multi-label soft-margin loss.
    """
    _check_shapes(logits, target)
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("seg_loss target must be binary")
    # log s(z) = -softplus(-z), log(1 - s(z)) = -softplus(z)
    return (target * F.softplus(-logits) + (1 - target) * F.softplus(logits)).mean()


def total_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted sum ``gan + seg + lambda * shape_a + mu * shape_b``.

    ``components`` maps each of ``LOSS_TERMS`` to a scalar (float or 0-d
    tensor). Returns ``(total, breakdown)`` where ``breakdown`` holds the
    unweighted float value of every term plus ``"total"``.
    """
    missing = [k for k in LOSS_TERMS if k not in components]
    if missing:
        raise KeyError(f"missing loss term(s): {', '.join(missing)}")
    breakdown = {}
    for k in LOSS_TERMS:
        c = components[k]
        v = float(c.detach()) if torch.is_tensor(c) else float(c)
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v)
        breakdown[k] = v
    total = (
        components["gan"]
        + components["seg"]
        + weights.lambda_shape_a * components["shape_a"]
        + weights.mu_shape_b * components["shape_b"]
    )
    breakdown["total"] = float(total.detach()) if torch.is_tensor(total) else float(total)
    return total, breakdown
