"""Dual-branch spatio-temporal attention encoder for skeleton sequences.

Each block runs two branches in parallel on a (B, T, J, C) token grid: one
applies temporal then spatial self-attention, the other spatial then temporal.
With cross-attention enabled, the second layer of both branches is replaced by
attention from every (frame, joint) token to the verbal context tokens. Branch
outputs are mixed by a learned per-feature convex combination.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .skeleton import NUM_JOINTS, SkeletonSequence

CROSS_MODES = ("off", "semantic", "speech")


@dataclass(frozen=True)
class EncoderConfig:
    feature_width: int = 256
    blocks_per_branch: int = 4
    heads: int = 8
    cross_attention: str = "off"
    projection_width: int = 128
    context_width: int = 768
    num_joints: int = NUM_JOINTS
    max_frames: int = 64
    mlp_ratio: float = 3.0
    input_channels: int = 3

    def __post_init__(self):
        if self.feature_width % self.heads:
            raise ValueError("feature_width must be divisible by heads")
        if self.blocks_per_branch < 1:
            raise ValueError("blocks_per_branch must be >= 1")
        if self.cross_attention not in CROSS_MODES:
            raise ValueError(f"cross_attention must be one of {CROSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedGesture:
    per_frame: torch.Tensor
    pooled: torch.Tensor
    projected: torch.Tensor


@dataclass
class MaskSpec:
    """Reconstruction masking: ``mask`` and ``weights`` are (T, J) (optionally batched)."""

    mask: np.ndarray
    weights: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.mask.shape != self.weights.shape:
            raise ValueError("mask and weights must have the same shape")

    @property
    def masked_weights(self) -> np.ndarray:
        return np.where(self.mask, self.weights, 0.0)


def random_mask(confidence: np.ndarray, probability: float, rng: np.random.Generator, noise_std: float = 0.0) -> MaskSpec:
    """Bernoulli mask over joints with confidence-derived weights."""
    mask = rng.random(confidence.shape) < probability
    return MaskSpec(mask, confidence, noise_std)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention; keys/values may come from a context of another width."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        kv_dim = dim if kv_dim is None else kv_dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` (B, L, C); ``context`` (B, N, Ck); ``key_mask`` (B, N) with True for valid keys."""
        context = x if context is None else context
        b, n_q, c = x.shape
        n_k = context.shape[1]
        q = self.q(x).view(b, n_q, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(context).view(b, n_k, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(context).view(b, n_k, self.heads, self.head_dim).transpose(1, 2)
        attn_mask = None if key_mask is None else key_mask[:, None, None, :]
        if self.keep_weights:
            logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
            if attn_mask is not None:
                logits = logits.masked_fill(~attn_mask, float("-inf"))
            weights = logits.softmax(dim=-1)
            self.last_weights = weights.detach()
            out = weights @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(b, n_q, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AttentionLayer(nn.Module):
    """Pre-norm attention + MLP with residuals over one axis of the token grid.

    ``axis`` is ``"spatial"`` (joints attend to joints within a frame),
    ``"temporal"`` (a joint attends to itself across frames) or ``"cross"``
    (every token attends to the context tokens).
    """

    def __init__(self, dim: int, heads: int, axis: str, mlp_ratio: float = 3.0, context_width: int | None = None):
        super().__init__()
        if axis not in ("spatial", "temporal", "cross"):
            raise ValueError(f"unknown axis {axis!r}")
        self.axis = axis
        self.norm1 = nn.LayerNorm(dim)
        if axis == "cross":
            self.context_norm = nn.LayerNorm(context_width)
            self.attn = Attention(dim, heads, kv_dim=context_width)
        else:
            self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def _attend(self, h: torch.Tensor, context, key_mask) -> torch.Tensor:
        b, t, j, c = h.shape
        if self.axis == "spatial":
            out = self.attn(h.reshape(b * t, j, c))
            return out.view(b, t, j, c)
        if self.axis == "temporal":
            out = self.attn(h.transpose(1, 2).reshape(b * j, t, c))
            return out.view(b, j, t, c).transpose(1, 2)
        if context is None:
            raise ValueError("cross-attention layer needs context tokens")
        out = self.attn(h.reshape(b, t * j, c), self.context_norm(context), key_mask)
        return out.view(b, t, j, c)

    def forward(self, x: torch.Tensor, context=None, key_mask=None) -> torch.Tensor:
        x = x + self._attend(self.norm1(x), context, key_mask)
        return x + self.mlp(self.norm2(x))


class DualBlock(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        c, h, r = config.feature_width, config.heads, config.mlp_ratio
        cross = config.cross_attention != "off"
        second = (lambda axis: AttentionLayer(c, h, "cross", r, config.context_width)) if cross \
            else (lambda axis: AttentionLayer(c, h, axis, r))
        self.ts = nn.ModuleList([AttentionLayer(c, h, "temporal", r), second("spatial")])
        self.st = nn.ModuleList([AttentionLayer(c, h, "spatial", r), second("temporal")])
        self.fusion_logits = nn.Parameter(torch.zeros(2, c))

    @property
    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.fusion_logits, dim=0)

    def forward(self, x, context=None, key_mask=None):
        a = x
        for layer in self.ts:
            a = layer(a, context, key_mask)
        b = x
        for layer in self.st:
            b = layer(b, context, key_mask)
        w = self.fusion_weights
        return w[0] * a + w[1] * b


class JointEmbedding(nn.Module):
    """Per-joint linear embedding of (x, y, confidence) plus learned spatial and temporal tables."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c = config.feature_width
        self.linear = nn.Linear(config.input_channels, c)
        self.spatial_pos = nn.Parameter(torch.zeros(config.num_joints, c))
        self.temporal_pos = nn.Parameter(torch.zeros(config.max_frames, c))
        nn.init.trunc_normal_(self.spatial_pos, std=0.02)
        nn.init.trunc_normal_(self.temporal_pos, std=0.02)
        self.num_joints = config.num_joints

    def positional(self, t: int) -> torch.Tensor:
        return self.temporal_pos[:t, None, :] + self.spatial_pos[None, :, :]

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                mask_token: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-2] != self.num_joints:
            raise ValueError(f"expected {self.num_joints} joints, got {x.shape[-2]}")
        t = x.shape[1]
        if t > self.temporal_pos.shape[0]:
            raise ValueError(f"sequence of {t} frames exceeds max_frames={self.temporal_pos.shape[0]}")
        h = self.linear(x)
        if mask is not None:
            h = torch.where(mask[..., None], mask_token.to(h.dtype), h)
        return h + self.positional(t)


class SkeletonEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embed = JointEmbedding(config)
        self.mask_token = nn.Parameter(torch.zeros(config.feature_width))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList([DualBlock(config) for _ in range(config.blocks_per_branch)])
        self.norm = nn.LayerNorm(config.feature_width)
        if config.cross_attention != "off":
            self.null_context = nn.Parameter(torch.zeros(config.context_width))
            nn.init.normal_(self.null_context, std=0.02)

    @property
    def uses_context(self) -> bool:
        return self.config.cross_attention != "off"

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` (B, T, J, 3) -> per-frame features (B, T, J, C).

        Context is ignored unless the encoder was built with cross-attention;
        a missing context then falls back to the null-utterance token.
        """
        if self.uses_context:
            if context is None:
                context = self.null_context.expand(x.shape[0], 1, -1).to(x.dtype)
                key_mask = None
            elif context.shape[-1] != self.config.context_width:
                raise ValueError(f"context width {context.shape[-1]} != {self.config.context_width}")
        else:
            context, key_mask = None, None
        h = self.embed(x, mask, self.mask_token)
        for block in self.blocks:
            h = block(h, context, key_mask)
        return self.norm(h)

    @staticmethod
    def pool(per_frame: torch.Tensor) -> torch.Tensor:
        return per_frame.mean(dim=(-3, -2))


class ProjectionHead(nn.Module):
    """Two-layer perceptron with a single GELU, e.g. 256 -> 256 -> 128."""

    def __init__(self, in_width: int, out_width: int, hidden: int | None = None):
        super().__init__()
        hidden = in_width if hidden is None else hidden
        self.fc1 = nn.Linear(in_width, hidden)
        self.fc2 = nn.Linear(hidden, out_width)
        self.in_width = in_width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_width:
            raise ValueError(f"projection head expects width {self.in_width}, got {x.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(x)))


def project(pooled: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(pooled)


class ReconstructionHead(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.linear = nn.Linear(width, 2)

    def forward(self, per_frame: torch.Tensor) -> torch.Tensor:
        return self.linear(per_frame)


def _as_batch(seq: SkeletonSequence | np.ndarray | torch.Tensor, dtype) -> torch.Tensor:
    frames = seq.frames if isinstance(seq, SkeletonSequence) else seq
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames, dtype=dtype)
    return x.unsqueeze(0) if x.dim() == 3 else x


def _param_dtype(module: nn.Module):
    return next(module.parameters()).dtype


def embed_joints(seq, encoder: SkeletonEncoder) -> torch.Tensor:
    """(T, J, feature_width) joint embeddings including positional terms."""
    x = _as_batch(seq, _param_dtype(encoder))
    return encoder.embed(x)[0]


def context_tokens(context, width: int, dtype) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Single-sample context as a (1, N, D) batch; ``None`` when there are no tokens."""
    if context is None:
        return None, None
    tokens = getattr(context, "tokens", context)
    tokens = torch.as_tensor(np.asarray(tokens) if not torch.is_tensor(tokens) else tokens, dtype=dtype)
    if tokens.dim() != 2:
        raise ValueError("context must be an N x D token matrix")
    if tokens.shape[0] == 0:
        return None, None
    if tokens.shape[1] != width:
        raise ValueError(f"context width {tokens.shape[1]} != {width}")
    return tokens.unsqueeze(0), torch.ones(1, tokens.shape[0], dtype=torch.bool)


def encode(seq, encoder: SkeletonEncoder, head: ProjectionHead, context=None) -> EncodedGesture:
    """Encode one sequence; ``context`` (UtteranceFeatures or N x D array) feeds cross-attention."""
    dtype = _param_dtype(encoder)
    x = _as_batch(seq, dtype)
    ctx, key_mask = (None, None)
    if encoder.uses_context:
        ctx, key_mask = context_tokens(context, encoder.config.context_width, dtype)
    per_frame = encoder(x, ctx, key_mask)
    pooled = encoder.pool(per_frame)
    return EncodedGesture(per_frame[0], pooled[0], head(pooled)[0])


def reconstruct_masked(seq, spec: MaskSpec, encoder: SkeletonEncoder, head: ReconstructionHead,
                       noise: np.ndarray | None = None) -> torch.Tensor:
    """Predict (T, J, 2) coordinates from an input whose masked joints are replaced by the mask token.

    ``noise`` (T, J, 2), if given, is added to the input coordinates outside the mask.
    """
    dtype = _param_dtype(encoder)
    x = _as_batch(seq, dtype).clone()
    mask = torch.as_tensor(spec.mask).reshape(x.shape[:-1])
    if noise is not None:
        n = torch.as_tensor(noise, dtype=dtype).reshape(*x.shape[:-1], 2)
        x[..., :2] = x[..., :2] + torch.where(mask[..., None], torch.zeros_like(n), n)
    per_frame = encoder(x, mask=mask)
    return head(per_frame)[0]


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
