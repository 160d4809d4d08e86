"""
Differentiable building blocks shared by the encoder, the heads and the losses.

Every function validates its shapes and raises :class:`~pcreid.errors.InvalidInputError`
on a mismatch; gradients come from torch autograd.

"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

DEFAULT_NEGATIVE_SLOPE = 0.2


def affine(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None
) -> torch.Tensor:
    """Return ``x @ weight + bias`` for ``x`` of shape ``(..., D_in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise InvalidInputError(
            f"cannot multiply features of shape {tuple(x.shape)} "
            f"with a weight of shape {tuple(weight.shape)}"
        )

    if bias is not None and bias.shape != weight.shape[1:]:
        raise InvalidInputError(
            f"bias of shape {tuple(bias.shape)} does not match {weight.shape[1]} outputs"
        )

    y = torch.matmul(x, weight)
    return y + bias if bias is not None else y


def leaky_relu(x: torch.Tensor, slope: float = DEFAULT_NEGATIVE_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def global_max_pool(features: torch.Tensor) -> torch.Tensor:
    """Channel-wise maximum over the rows of ``(..., N, D)`` features."""
    if features.ndim < 2 or features.shape[-2] == 0:
        raise InvalidInputError("global max pooling needs at least one row")

    return features.amax(dim=-2)


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor | int) -> torch.Tensor:
    """
    Mean of ``-log softmax(logits)[label]`` over the batch.

    Accepts a single logit vector with an integer label or a ``(B, C)`` batch.

    """
    target = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
        target = target.reshape(1)

    classes = logits.shape[-1]
    if target.shape != logits.shape[:1]:
        raise InvalidInputError(
            f"{target.numel()} labels given for {logits.shape[0]} logit rows"
        )

    if target.numel() and (target.min() < 0 or target.max() >= classes):
        raise InvalidInputError(f"label out of range for {classes} classes")

    return F.cross_entropy(logits, target)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise InvalidInputError(
            f"mean squared error needs equal shapes, got {tuple(a.shape)} "
            f"and {tuple(b.shape)}"
        )

    return ((a - b) ** 2).mean()


def glorot_uniform_(tensor: torch.Tensor, fan_in: int, fan_out: int) -> torch.Tensor:
    """Fill ``tensor`` uniformly in ``±sqrt(6 / (fan_in + fan_out))``."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)
