"""Pre-training architectures, loss composition, the training loop and checkpoints.

Three architectures are supported:

* ``unimodal``: masked reconstruction + NT-Xent between two augmented views.
* ``multimodal``: the unimodal terms + a CLIP-style loss against pooled verbal features.
* ``multimodal_x``: CLIP-style loss + a crossmodal NT-Xent between the
  skeleton-only encoder and a second encoder fusing verbal tokens by cross-attention.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncoderConfig, ProjectionHead, ReconstructionHead, SkeletonEncoder
from .losses import LossConfig, clip_loss, crossmodal_loss, ntxent, reconstruction_loss
from .skeleton import (
    AugmentSpec,
    DatasetManifest,
    FormSimilarityPair,
    GestureSample,
    SkeletonSequence,
    augment,
    derive_seed,
    normalization_params,
)
from .verbal import SEMANTIC_WIDTH, SPEECH_WIDTH, FeatureStore, LayerAggregator, UtteranceFeatures

log = logging.getLogger(__name__)

ARCHITECTURES = ("unimodal", "multimodal", "multimodal_x")
LOSS_TERMS = {
    "unimodal": ("reconstruction", "ntxent"),
    "multimodal": ("reconstruction", "ntxent", "clip"),
    "multimodal_x": ("clip", "crossmodal"),
}
DEFAULT_BATCH = {"unimodal": 64, "multimodal": 64, "multimodal_x": 96}
CHECKPOINT_FORMAT = "gesture-embed-checkpoint"
CHECKPOINT_VERSION = 1
DEFAULT_SPEECH_LAYERS = 25


class ConfigurationError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: Path | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ArchitectureKind:
    arch: str
    modality: str = "none"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.arch == "unimodal" and self.modality != "none":
            raise ConfigurationError("the unimodal architecture takes no verbal modality")
        if self.arch != "unimodal" and self.modality not in ("semantic", "speech"):
            raise ConfigurationError(f"{self.arch} needs modality 'semantic' or 'speech'")

    @property
    def loss_terms(self) -> tuple[str, ...]:
        return LOSS_TERMS[self.arch]

    @property
    def context_width(self) -> int:
        return SPEECH_WIDTH if self.modality == "speech" else SEMANTIC_WIDTH


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 100
    batch_size: int | None = None
    temperature: float = 0.1
    mask_probability: float = 0.05
    noise_probability: float = 0.05
    noise_std: float = 1.0
    seed: int = 0
    validation_fraction: float = 0.10
    patience: int | None = None
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")

    def batch_for(self, kind: ArchitectureKind) -> int:
        return self.batch_size or DEFAULT_BATCH[kind.arch]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            aug = {k: tuple(v) if isinstance(v, list) else v for k, v in d["augment"].items()}
            d["augment"] = AugmentSpec(**aug)
        return cls(**d)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(**d)


@dataclass
class VerbalBatch:
    pooled: torch.Tensor
    tokens: torch.Tensor
    key_mask: torch.Tensor


class TrainablePipeline(nn.Module):
    """Encoders, heads and (for speech) the layer aggregator for one architecture.

    Use :func:`build_architecture` rather than constructing directly.
    """

    def __init__(self, kind: ArchitectureKind, enc: EncoderConfig, train: TrainConfig,
                 speech_layers: int = DEFAULT_SPEECH_LAYERS):
        super().__init__()
        self.kind = kind
        self.train_config = train
        self.speech_layers = speech_layers
        self.loss_config = LossConfig(temperature=train.temperature)
        self.encoder_config = replace(enc, cross_attention="off", context_width=kind.context_width)
        c, p = enc.feature_width, enc.projection_width
        self.encoder = SkeletonEncoder(self.encoder_config)
        self.heads = nn.ModuleDict()
        if kind.arch in ("unimodal", "multimodal"):
            self.heads["ntxent"] = ProjectionHead(c, p)
            self.reconstruction_head = ReconstructionHead(c)
        if kind.arch in ("multimodal", "multimodal_x"):
            self.heads["clip_gesture"] = ProjectionHead(c, p)
            self.heads["clip_verbal"] = ProjectionHead(kind.context_width, p, hidden=c)
            if kind.modality == "speech":
                self.aggregator = LayerAggregator(speech_layers, SPEECH_WIDTH)
        if kind.arch == "multimodal":
            self.null_utterance = nn.Parameter(torch.randn(kind.context_width) * 0.02)
        if kind.arch == "multimodal_x":
            fused_cfg = replace(self.encoder_config, cross_attention=kind.modality)
            self.fused_encoder = SkeletonEncoder(fused_cfg)
            self.heads["crossmodal_unimodal"] = ProjectionHead(c, p)
            self.heads["crossmodal_fused"] = ProjectionHead(c, p)

    @property
    def embedding_head(self) -> ProjectionHead:
        return self.heads["ntxent"] if self.kind.arch == "unimodal" else self.heads["clip_gesture"]

    @property
    def null_vector(self) -> torch.Tensor | None:
        if self.kind.arch == "multimodal":
            return self.null_utterance
        if self.kind.arch == "multimodal_x":
            return self.fused_encoder.null_context
        return None

    @property
    def loss_terms(self) -> tuple[str, ...]:
        return self.kind.loss_terms

    # -- verbal side ---------------------------------------------------------

    def verbal_batch(self, features: Sequence[UtteranceFeatures | None]) -> VerbalBatch:
        """Pad per-sample verbal tokens; empty or missing utterances become the null token."""
        null = self.null_vector
        if null is None:
            raise ConfigurationError(f"{self.kind.arch} has no verbal pathway")
        dtype = null.dtype
        width = self.kind.context_width
        lengths = [0 if f is None else f.num_tokens for f in features]
        n_max = max(1, max(lengths, default=0))
        b = len(features)
        use_layers = self.kind.modality == "speech" and any(f is not None and f.layerwise is not None for f in features)
        if use_layers:
            raw = torch.zeros(b, self.speech_layers, n_max, width, dtype=dtype)
            for i, f in enumerate(features):
                if f is not None and f.num_tokens:
                    if f.layerwise is None:
                        raise ConfigurationError("speech batch mixes layerwise and flat features")
                    raw[i, :, : f.num_tokens] = torch.as_tensor(f.layerwise, dtype=dtype)
            tokens = self.aggregator(raw)
        else:
            tokens = torch.zeros(b, n_max, width, dtype=dtype)
            for i, f in enumerate(features):
                if f is not None and f.num_tokens:
                    if f.width != width:
                        raise ConfigurationError(f"verbal width {f.width} != expected {width}")
                    tokens[i, : f.num_tokens] = torch.as_tensor(f.tokens, dtype=dtype)
        lengths_t = torch.tensor(lengths)
        key_mask = torch.arange(n_max)[None, :] < lengths_t[:, None]
        empty = lengths_t == 0
        null_tokens = torch.zeros_like(tokens)
        null_tokens[:, 0] = null
        tokens = torch.where(empty[:, None, None], null_tokens, tokens)
        key_mask = key_mask | (empty[:, None] & (torch.arange(n_max)[None, :] == 0))
        m = key_mask.to(dtype)[..., None]
        pooled = (tokens * m).sum(1) / m.sum(1)
        return VerbalBatch(pooled, tokens, key_mask)

    # -- inference -----------------------------------------------------------

    @torch.no_grad()
    def embed(self, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Gesture-only projected embeddings for normalized (n, T, J, 3) frames."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        out = []
        for i in range(0, len(frames), batch_size):
            x = torch.as_tensor(frames[i:i + batch_size], dtype=dtype)
            pooled = self.encoder.pool(self.encoder(x))
            out.append(self.embedding_head(pooled).numpy())
        self.train(was_training)
        width = self.embedding_head.fc2.out_features
        return np.concatenate(out, axis=0) if out else np.zeros((0, width), dtype=np.float32)


def build_architecture(kind: ArchitectureKind, enc: EncoderConfig = EncoderConfig(), train: TrainConfig = TrainConfig(),
                       speech_layers: int = DEFAULT_SPEECH_LAYERS) -> TrainablePipeline:
    """Assemble the trainable pipeline for ``kind`` with parameters seeded from ``train.seed``."""
    torch.manual_seed(derive_seed(train.seed, "init"))
    return TrainablePipeline(kind, enc, train, speech_layers)


def parameter_report(pipeline: TrainablePipeline) -> dict[str, int]:
    groups: dict[str, int] = {}
    for name, p in pipeline.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + p.numel()
    groups["total_trainable"] = sum(p.numel() for p in pipeline.parameters() if p.requires_grad)
    return groups


# ---------------------------------------------------------------------------
# batches and losses


def prepared_frames(seq: SkeletonSequence) -> tuple[np.ndarray, float]:
    """Normalized (T, J, 3) frames and the scale used (pixels per unit)."""
    origin, scale = normalization_params(seq)
    frames = seq.frames.copy()
    frames[..., :2] = (frames[..., :2] - origin) / scale
    return frames, scale


def _view(sample: GestureSample, spec: AugmentSpec, seed: int, epoch: int, view: int) -> np.ndarray:
    seq = augment(sample.skeleton, spec, derive_seed(seed, sample.sample_id, epoch, view))
    return prepared_frames(seq)[0]


def compute_training_loss(pipeline: TrainablePipeline, samples: Sequence[GestureSample],
                          features: Sequence[UtteranceFeatures | None] | None = None,
                          epoch: int = 0, step: int = 0, augment_views: bool = True) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Sum of the architecture's loss terms on one batch, plus the per-term map."""
    if len(samples) < 2:
        raise ValueError("training batches need at least 2 samples")
    cfg = pipeline.train_config
    kind = pipeline.kind
    dtype = next(pipeline.parameters()).dtype
    spec = cfg.augment if augment_views else AugmentSpec.disabled()
    tau = pipeline.loss_config.temperature

    def stack(view: int) -> torch.Tensor:
        return torch.as_tensor(np.stack([_view(s, spec, cfg.seed, epoch, view) for s in samples]), dtype=dtype)

    x1, x2 = stack(0), stack(1)
    terms: dict[str, torch.Tensor] = {}
    pooled1 = pipeline.encoder.pool(pipeline.encoder(x1))

    if kind.arch in ("unimodal", "multimodal"):
        pooled2 = pipeline.encoder.pool(pipeline.encoder(x2))
        terms["ntxent"] = ntxent(pipeline.heads["ntxent"](pooled1), pipeline.heads["ntxent"](pooled2), tau)
        terms["reconstruction"] = _reconstruction_term(pipeline, samples, epoch, step, dtype)

    if kind.arch in ("multimodal", "multimodal_x"):
        if features is None:
            raise ConfigurationError(f"{kind.arch} needs verbal features for every batch")
        verbal = pipeline.verbal_batch(features)
        terms["clip"] = clip_loss(pipeline.heads["clip_gesture"](pooled1), pipeline.heads["clip_verbal"](verbal.pooled), tau)
        if kind.arch == "multimodal_x":
            fused = pipeline.fused_encoder.pool(pipeline.fused_encoder(x2, verbal.tokens, verbal.key_mask))
            terms["crossmodal"] = crossmodal_loss(
                pipeline.heads["crossmodal_unimodal"](pooled1), pipeline.heads["crossmodal_fused"](fused), tau)

    total = sum(terms[name] for name in kind.loss_terms)
    return total, terms


def _reconstruction_term(pipeline: TrainablePipeline, samples, epoch: int, step: int, dtype) -> torch.Tensor:
    cfg = pipeline.train_config
    rng = np.random.default_rng(derive_seed(cfg.seed, "mask", epoch, step))
    clean, inputs, masks = [], [], []
    for s in samples:
        frames, scale = prepared_frames(s.skeleton)
        mask = rng.random(frames.shape[:2]) < cfg.mask_probability
        noisy = (rng.random(frames.shape[:2]) < cfg.noise_probability) & ~mask
        noise = rng.normal(0.0, cfg.noise_std, size=frames.shape[:2] + (2,)) / scale
        x = frames.copy()
        x[..., :2] += np.where(noisy[..., None], noise, 0.0)
        clean.append(frames)
        inputs.append(x)
        masks.append(mask)
    clean_t = torch.as_tensor(np.stack(clean), dtype=dtype)
    mask_t = torch.as_tensor(np.stack(masks))
    per_frame = pipeline.encoder(torch.as_tensor(np.stack(inputs), dtype=dtype), mask=mask_t)
    pred = pipeline.reconstruction_head(per_frame)
    weights = torch.where(mask_t, clean_t[..., 2], torch.zeros_like(clean_t[..., 2]))
    return reconstruction_loss(pred, clean_t[..., :2], weights, mask=mask_t,
                               component_weights=pipeline.loss_config.reconstruction_weights).total


# ---------------------------------------------------------------------------
# checkpoints and metrics


def save_checkpoint(path: str | Path, pipeline: TrainablePipeline, optimizer: torch.optim.Optimizer | None,
                    epoch: int, metrics: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": asdict(pipeline.kind),
        "encoder_config": pipeline.encoder_config.to_dict(),
        "train_config": pipeline.train_config.to_dict(),
        "speech_layers": pipeline.speech_layers,
        "state_dict": pipeline.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "epoch": epoch,
        "metrics": metrics,
    }, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainablePipeline, dict]:
    """Rebuild the pipeline stored at ``path``; returns it with the raw checkpoint record."""
    record = torch.load(Path(path), map_location="cpu", weights_only=False)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a gesture-embed checkpoint")
    if record["version"] != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {record['version']}")
    kind = ArchitectureKind(**record["kind"])
    enc = encoder_config_from_dict(record["encoder_config"])
    train = TrainConfig.from_dict(record["train_config"])
    pipeline = TrainablePipeline(kind, enc, train, record["speech_layers"])
    pipeline.load_state_dict(record["state_dict"])
    return pipeline, record


class MetricsStream:
    """Append-only newline-delimited JSON records (sorted keys, so reruns are byte-identical)."""

    def __init__(self, path: str | Path, timing_path: str | Path | None = None, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        self._fh = self.path.open(mode)
        self._timing = Path(timing_path).open(mode) if timing_path else None
        self._t0 = time.perf_counter()

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        if self._timing is not None:
            self._timing.write(json.dumps({"epoch": record.get("epoch"), "step": record.get("step"),
                                           "wall_time": round(time.perf_counter() - self._t0, 3)}) + "\n")
            self._timing.flush()

    def close(self) -> None:
        self._fh.close()
        if self._timing is not None:
            self._timing.close()


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PretrainResult:
    best_epoch: int
    best_checkpoint: Path
    best_rho: float
    epoch0_rho: float | None
    checkpoints: list[Path]
    history: list[dict]


def split_train_val(sample_ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(sample_ids)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(fraction * len(ids))))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def _features_for(samples, store: FeatureStore | None, cache: dict) -> list[UtteranceFeatures | None] | None:
    if store is None:
        return None
    out = []
    for s in samples:
        if s.verbal_ref is None:
            out.append(None)
            continue
        if s.sample_id not in cache:
            cache[s.sample_id] = store.get(s.verbal_ref)
        out.append(cache[s.sample_id])
    return out


def embed_samples(pipeline: TrainablePipeline, samples: Sequence[GestureSample],
                  transform: Callable[[GestureSample], SkeletonSequence] | None = None) -> dict[str, np.ndarray]:
    """sample_id -> gesture-only embedding; ``transform`` may perturb each skeleton first."""
    frames = []
    for s in samples:
        seq = s.skeleton if transform is None else transform(s)
        frames.append(prepared_frames(seq)[0])
    if not frames:
        return {}
    emb = pipeline.embed(np.stack(frames))
    return {s.sample_id: emb[i] for i, s in enumerate(samples)}


def monitor_correlation(pipeline: TrainablePipeline, manifest: DatasetManifest,
                        pairs: Sequence[FormSimilarityPair]) -> tuple[float, float]:
    from .evaluation import UndefinedCorrelationError, form_similarity_correlation

    ids = sorted({i for p in pairs for i in (p.id_a, p.id_b)})
    emb = embed_samples(pipeline, [manifest[i] for i in ids])
    try:
        return form_similarity_correlation(pairs, emb)
    except UndefinedCorrelationError:
        return float("nan"), float("nan")


def pretrain(manifest: DatasetManifest, pipeline: TrainablePipeline, out_dir: str | Path,
             feature_store: FeatureStore | str | Path | None = None,
             monitor_pairs: Sequence[FormSimilarityPair] | None = None,
             resume_from: str | Path | None = None, record_timing: bool = False) -> PretrainResult:
    """Train ``pipeline`` on ``manifest`` and keep the checkpoint with the best monitor correlation.

    Writes ``epoch-NNN.ckpt`` per epoch, ``best.json`` naming the selected one,
    and ``metrics.jsonl`` (deterministic). With ``record_timing`` wall-clock
    stamps go to a separate ``timing.jsonl`` so the metric stream stays
    reproducible.
    Epoch 0 is a monitor-only record of the untrained weights.
    """
    cfg = pipeline.train_config
    kind = pipeline.kind
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind.arch != "unimodal":
        if feature_store is None:
            feature_store = manifest.feature_store
        if feature_store is None:
            raise ConfigurationError(f"{kind.arch} needs a feature store")
        if not isinstance(feature_store, FeatureStore):
            feature_store = FeatureStore(feature_store)
    else:
        feature_store = None
    if monitor_pairs is None:
        monitor_pairs = manifest.form_pairs

    if "train" in manifest.splits and "val" in manifest.splits:
        train_ids, val_ids = list(manifest.splits["train"]), list(manifest.splits["val"])
    else:
        train_ids, val_ids = split_train_val([s.sample_id for s in manifest.samples], cfg.validation_fraction, cfg.seed)
    b = cfg.batch_for(kind)
    feats_cache: dict = {}
    optimizer = torch.optim.Adam(pipeline.parameters(), lr=cfg.learning_rate)

    history: list[dict] = []
    checkpoints: list[Path] = []
    best_epoch, best_rho, epoch0_rho = 0, -math.inf, None
    start_epoch = 1
    if resume_from is not None:
        record = torch.load(Path(resume_from), map_location="cpu", weights_only=False)
        pipeline.load_state_dict(record["state_dict"])
        optimizer.load_state_dict(record["optimizer"])
        start_epoch = record["epoch"] + 1
        prev = record["metrics"]
        best_epoch, best_rho = prev.get("best_epoch", record["epoch"]), prev.get("best_rho", -math.inf)
        epoch0_rho = prev.get("epoch0_rho")
        checkpoints = [out_dir / f"epoch-{e:03d}.ckpt" for e in range(1, start_epoch) if (out_dir / f"epoch-{e:03d}.ckpt").exists()]

    metrics = MetricsStream(out_dir / "metrics.jsonl", out_dir / "timing.jsonl" if record_timing else None, append=resume_from is not None)
    try:
        if start_epoch == 1 and monitor_pairs:
            rho0, p0 = monitor_correlation(pipeline, manifest, monitor_pairs)
            epoch0_rho = rho0
            rec = {"epoch": 0, "kind": "monitor", "monitor_rho": rho0, "monitor_p": p0}
            metrics.write(rec)
            history.append(rec)

        stale = 0
        for epoch in range(start_epoch, cfg.max_epochs + 1):
            pipeline.train()
            rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch))
            order = [train_ids[i] for i in rng.permutation(len(train_ids))]
            batches = [order[i:i + b] for i in range(0, len(order), b)]
            batches = [bt for bt in batches if len(bt) >= 2]
            for step, ids in enumerate(batches):
                samples = [manifest[i] for i in ids]
                feats = _features_for(samples, feature_store, feats_cache)
                loss, terms = compute_training_loss(pipeline, samples, feats, epoch=epoch, step=step)
                if not torch.isfinite(loss):
                    diag = save_checkpoint(out_dir / "diagnostics.ckpt", pipeline, optimizer, epoch,
                                           {"step": step, "terms": {k: float(v.detach()) for k, v in terms.items()}})
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}", diag)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                rec = {"epoch": epoch, "step": step, "kind": "step", "loss": float(loss.detach()),
                       **{k: float(v.detach()) for k, v in terms.items()}}
                metrics.write(rec)

            val_loss = _validation_loss(pipeline, manifest, val_ids, b, feature_store, feats_cache)
            rho, p = monitor_correlation(pipeline, manifest, monitor_pairs) if monitor_pairs else (float("nan"), float("nan"))
            improved = best_epoch == 0 or rho > best_rho
            if improved:
                best_epoch, best_rho, stale = epoch, rho, 0
            else:
                stale += 1
            rec = {"epoch": epoch, "kind": "epoch", "val_loss": val_loss, "monitor_rho": rho, "monitor_p": p}
            metrics.write(rec)
            history.append(rec)
            ckpt = save_checkpoint(out_dir / f"epoch-{epoch:03d}.ckpt", pipeline, optimizer, epoch,
                                   {"val_loss": val_loss, "monitor_rho": rho, "best_epoch": best_epoch,
                                    "best_rho": best_rho, "epoch0_rho": epoch0_rho})
            checkpoints.append(ckpt)
            _write_best(out_dir, best_epoch, best_rho, epoch0_rho)
            log.info("epoch %d val_loss=%.4f rho=%.4f", epoch, val_loss, rho)
            if cfg.patience is not None and stale >= cfg.patience:
                break
    finally:
        metrics.close()

    return PretrainResult(best_epoch, out_dir / f"epoch-{best_epoch:03d}.ckpt", best_rho, epoch0_rho, checkpoints, history)


def _write_best(out_dir: Path, epoch: int, rho: float, epoch0_rho) -> None:
    record = {"checkpoint": f"epoch-{epoch:03d}.ckpt", "epoch": epoch, "monitor_rho": rho, "epoch0_rho": epoch0_rho}
    (out_dir / "best.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def best_checkpoint(out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    record = json.loads((out_dir / "best.json").read_text())
    return out_dir / record["checkpoint"]


@torch.no_grad()
def _validation_loss(pipeline, manifest, val_ids, b, store, cache) -> float:
    pipeline.eval()
    total, count = 0.0, 0
    batches = [val_ids[i:i + b] for i in range(0, len(val_ids), b)]
    for step, ids in enumerate(bt for bt in batches if len(bt) >= 2):
        samples = [manifest[i] for i in ids]
        loss, _ = compute_training_loss(pipeline, samples, _features_for(samples, store, cache), epoch=0, step=step)
        total += float(loss) * len(ids)
        count += len(ids)
    pipeline.train()
    return total / count if count else float("nan")


def select_best_epoch(history: Sequence[dict]) -> int:
    """Epoch with the highest monitor correlation among trained epochs; ties go to the earliest."""
    best, best_rho = None, -math.inf
    for rec in history:
        if rec.get("kind") == "epoch" and rec["monitor_rho"] > best_rho:
            best, best_rho = rec["epoch"], rec["monitor_rho"]
    if best is None:
        raise ValueError("no trained epochs in history")
    return best
