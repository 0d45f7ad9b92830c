"""Pre-training objectives.

All functions take torch tensors and return differentiable scalars. Contrastive
losses use cosine similarity scaled by a temperature.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .skeleton import load_topology

DEFAULT_TEMPERATURE = 0.1
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    temperature: float = DEFAULT_TEMPERATURE
    reconstruction_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class ReconstructionTerms(NamedTuple):
    total: torch.Tensor
    keypoint: torch.Tensor
    bone: torch.Tensor
    motion: torch.Tensor


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # smooth at zero so static joints do not produce NaN gradients
    return torch.sqrt((x * x).sum(-1) + _NORM_EPS)


def reconstruction_loss(pred: torch.Tensor, truth: torch.Tensor, weights, mask=None,
                        edges=None, component_weights=(1.0, 1.0, 1.0)) -> ReconstructionTerms:
    """Masked keypoint, bone and motion reconstruction on (..., T, J, 2) coordinates.

    ``weights`` holds the per-joint factors on the masked set (zero elsewhere);
    ``mask`` defaults to ``weights > 0``. Bone and motion terms compare lengths
    of the skeleton obtained by substituting predictions at masked joints into
    the ground truth, so unmasked joints never contribute. Sums run over T and J,
    and leading batch dimensions are averaged.
    """
    if pred.shape != truth.shape or pred.shape[-1] != 2:
        raise ValueError(f"pred {tuple(pred.shape)} and truth {tuple(truth.shape)} must match as (..., T, J, 2)")
    weights = torch.as_tensor(weights, dtype=pred.dtype)
    if weights.shape != pred.shape[:-1]:
        raise ValueError(f"weights shape {tuple(weights.shape)} != {tuple(pred.shape[:-1])}")
    mask = weights > 0 if mask is None else torch.as_tensor(mask, dtype=torch.bool)
    if edges is None:
        edges = load_topology().edges
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    keypoint = (weights * ((pred - truth) ** 2).sum(-1)).sum(dim=(-2, -1))

    composite = torch.where(mask[..., None], pred, truth)
    if len(edges) and pred.shape[-2] > int(edges.max()):
        a, b = edges[:, 0], edges[:, 1]
        bone_pred = _safe_norm(composite[..., a, :] - composite[..., b, :])
        bone_true = _safe_norm(truth[..., a, :] - truth[..., b, :])
        bone = ((bone_pred - bone_true) ** 2).sum(dim=(-2, -1))
    else:
        bone = torch.zeros_like(keypoint)

    if pred.shape[-3] > 1:
        motion_pred = _safe_norm(composite[..., 1:, :, :] - composite[..., :-1, :, :])
        motion_true = _safe_norm(truth[..., 1:, :, :] - truth[..., :-1, :, :])
        motion = ((motion_pred - motion_true) ** 2).sum(dim=(-2, -1))
    else:
        motion = torch.zeros_like(keypoint)

    keypoint, bone, motion = keypoint.mean(), bone.mean(), motion.mean()
    wk, wb, wm = component_weights
    total = (wk * keypoint + wb * bone + wm * motion) / 3.0
    return ReconstructionTerms(total, keypoint, bone, motion)


def _normalize_rows(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms <= _NORM_EPS).any()):
        raise FloatingPointError("zero-norm embedding: cosine similarity undefined")
    return z / norms


def ntxent(anchors: torch.Tensor, positives: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over the 2b pooled views.

    Row ``i`` of ``anchors`` and ``positives`` are the two views of sample ``i``;
    every other view in the pool is a negative. The positive stays in the
    denominator and the loss is averaged over all 2b anchors.
    """
    if anchors.shape != positives.shape or anchors.dim() != 2:
        raise ValueError("anchors and positives must be b x d matrices of equal shape")
    b = anchors.shape[0]
    if b < 2:
        raise ValueError("NT-Xent needs a batch of at least 2 for negatives")
    z = _normalize_rows(torch.cat([anchors, positives], dim=0))
    logits = z @ z.T / temperature
    self_mask = torch.eye(2 * b, dtype=torch.bool)
    logits = logits.masked_fill(self_mask, float("-inf"))
    target = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)])
    return F.cross_entropy(logits, target)


def clip_loss(gesture: torch.Tensor, verbal: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Symmetric in-batch cross entropy between matched gesture and verbal rows (mean of 2b terms)."""
    if gesture.dim() != 2 or verbal.dim() != 2 or gesture.shape[0] != verbal.shape[0]:
        raise ValueError("gesture and verbal must be b x d matrices with equal b")
    if gesture.shape[0] < 1:
        raise ValueError("empty batch")
    logits = _normalize_rows(gesture) @ _normalize_rows(verbal).T / temperature
    target = torch.arange(gesture.shape[0])
    g2t = F.cross_entropy(logits, target, reduction="sum")
    t2g = F.cross_entropy(logits.T, target, reduction="sum")
    return (g2t + t2g) / (2 * gesture.shape[0])


def crossmodal_loss(unimodal: torch.Tensor, fused: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """NT-Xent with (unimodal_i, fused_i) as the positive pair."""
    return ntxent(unimodal, fused, temperature)
