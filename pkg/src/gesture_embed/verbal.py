"""Precomputed verbal features: storage, speech-layer aggregation and pooling.

The text and speech backbones are not run here; their outputs are ingested as
arrays from a feature store, one ``.npy`` file per key plus ``index.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .skeleton import IntegrityError, read_array, write_array

SEMANTIC_WIDTH = 768
SPEECH_WIDTH = 1024
MODALITIES = ("semantic", "speech")
INDEX_NAME = "index.json"


class EmptyUtteranceError(ValueError):
    """Pooling was asked for an utterance with no tokens; use the null-utterance vector."""


@dataclass
class UtteranceFeatures:
    modality: str
    tokens: np.ndarray
    window: tuple[float, float] = (0.0, 0.0)
    layerwise: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be N x D, got shape {tokens.shape}")
        self.tokens = tokens
        if self.layerwise is not None:
            lw = np.asarray(self.layerwise)
            if self.modality != "speech":
                raise ValueError("layerwise features are only defined for speech")
            if lw.ndim != 3 or lw.shape[1:] != tokens.shape:
                raise ValueError(f"layerwise shape {lw.shape} does not match tokens {tokens.shape}")
            self.layerwise = lw

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


class FeatureStore:
    """Directory of feature arrays with an ``index.json`` mapping key -> metadata."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        index_path = self.root / INDEX_NAME
        self._index: dict[str, dict] = json.loads(index_path.read_text()) if index_path.is_file() else {}

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def keys(self) -> list[str]:
        return list(self._index)

    def has(self, key: str) -> bool:
        entry = self._index.get(key)
        return entry is not None and (self.root / entry["path"]).is_file()

    def put(self, key: str, features: UtteranceFeatures) -> None:
        rel = f"{features.modality}/{key}.npy"
        write_array(self.root / rel, features.tokens)
        entry = {
            "path": rel,
            "modality": features.modality,
            "shape": list(features.tokens.shape),
            "window": [float(features.window[0]), float(features.window[1])],
        }
        if features.layerwise is not None:
            lrel = f"{features.modality}/{key}.layers.npy"
            write_array(self.root / lrel, features.layerwise)
            entry["layerwise_path"] = lrel
            entry["layerwise_shape"] = list(features.layerwise.shape)
        self._index[key] = entry

    def flush(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / INDEX_NAME).write_text(json.dumps(self._index, indent=1, sort_keys=True) + "\n")

    def get(self, key: str) -> UtteranceFeatures:
        try:
            entry = self._index[key]
        except KeyError:
            raise KeyError(f"verbal_ref {key!r} not in feature store {self.root}") from None
        tokens = read_array(self.root / entry["path"])
        if list(tokens.shape) != list(entry["shape"]):
            raise IntegrityError(f"{key}: stored shape {tokens.shape} != index shape {entry['shape']}")
        layerwise = None
        if "layerwise_path" in entry:
            layerwise = read_array(self.root / entry["layerwise_path"])
            if list(layerwise.shape) != list(entry["layerwise_shape"]):
                raise IntegrityError(f"{key}: layerwise shape mismatch")
        return UtteranceFeatures(entry["modality"], tokens, tuple(entry["window"]), layerwise)


def load_features(store: str | Path | FeatureStore, key: str) -> UtteranceFeatures:
    if not isinstance(store, FeatureStore):
        store = FeatureStore(store)
    return store.get(key)


def pool_utterance(features: UtteranceFeatures) -> np.ndarray:
    """Mean over the token axis."""
    if features.num_tokens == 0:
        raise EmptyUtteranceError("utterance has no tokens")
    return features.tokens.astype(np.float64).mean(axis=0)


class LayerAggregator(nn.Module):
    """Softmax-weighted average over backbone layers followed by two pointwise convolutions.

    The convolutions start at identity, so a fresh aggregator computes the plain
    weighted average.
    """

    def __init__(self, num_layers: int, width: int = SPEECH_WIDTH):
        super().__init__()
        if num_layers < 1:
            raise ValueError("need at least one layer")
        self.num_layers = num_layers
        self.layer_logits = nn.Parameter(torch.zeros(num_layers))
        self.conv1 = nn.Conv1d(width, width, kernel_size=1)
        self.conv2 = nn.Conv1d(width, width, kernel_size=1)
        for conv in (self.conv1, self.conv2):
            with torch.no_grad():
                conv.weight.copy_(torch.eye(width).unsqueeze(-1))
                conv.bias.zero_()

    @property
    def layer_weights(self) -> torch.Tensor:
        return torch.softmax(self.layer_logits, dim=0)

    def forward(self, layerwise: torch.Tensor) -> torch.Tensor:
        """``layerwise`` is (L, N, D) or batched (B, L, N, D); returns (N, D) / (B, N, D)."""
        batched = layerwise.dim() == 4
        if not batched:
            layerwise = layerwise.unsqueeze(0)
        if layerwise.shape[1] != self.num_layers:
            raise ValueError(f"expected {self.num_layers} layers, got {layerwise.shape[1]}")
        w = self.layer_weights.to(layerwise.dtype)
        mixed = torch.einsum("l,blnd->bnd", w, layerwise)
        out = self.conv2(self.conv1(mixed.transpose(1, 2))).transpose(1, 2)
        return out if batched else out[0]


def aggregate_speech_layers(layerwise, state: LayerAggregator) -> torch.Tensor:
    layerwise = torch.as_tensor(layerwise, dtype=state.layer_logits.dtype)
    if layerwise.dim() != 3:
        raise ValueError("layerwise features must be L x N x D")
    return state(layerwise)
