"""Skeletal gesture data: sequences, manifests, windowing, normalization and augmentation.

Coordinates are kept in pixels on disk and through augmentation; the encoder
consumes sequences after :func:`normalize_skeleton`.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_JOINTS = 27
DEFAULT_FPS = 25
MANIFEST_VERSION = 1
NUM_FORM_FEATURES = 5
FORM_FEATURES = ("shape", "movement", "rotation", "position", "hands")


class ManifestValidationError(ValueError):
    """Raised when a manifest document violates the schema; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class IntegrityError(ValueError):
    """A manifest or store references data that does not exist or does not match."""


class DegenerateSkeletonWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Topology:
    version: int
    joints: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    mirror_pairs: tuple[tuple[int, int], ...]
    root: tuple[int, ...]
    scale: tuple[int, int]

    @property
    def mirror_permutation(self) -> np.ndarray:
        perm = np.arange(len(self.joints))
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm


@lru_cache(maxsize=None)
def load_topology() -> Topology:
    """The shipped 27-joint upper-body + hands topology (versioned data file)."""
    text = resources.files("gesture_embed").joinpath("data/skeleton27.json").read_text()
    doc = json.loads(text)
    return Topology(
        version=doc["version"],
        joints=tuple(doc["joints"]),
        edges=tuple(tuple(e) for e in doc["edges"]),
        mirror_pairs=tuple(tuple(p) for p in doc["mirror_pairs"]),
        root=tuple(doc["root"]),
        scale=tuple(doc["scale"]),
    )


@dataclass
class SkeletonSequence:
    """``frames`` is a (T, J, 3) array of x, y (pixels) and confidence."""

    frames: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"expected (T, J, 3) frames, got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a skeleton sequence needs at least one frame")
        if frames.shape[1] != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joints, got {frames.shape[1]}")
        conf = frames[..., 2]
        if np.any(conf < 0.0) or np.any(conf > 1.0):
            raise ValueError("confidence channel must lie in [0, 1]")
        if int(self.fps) <= 0:
            raise ValueError("fps must be a positive integer")
        self.frames = frames
        self.fps = int(self.fps)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    @property
    def coords(self) -> np.ndarray:
        return self.frames[..., :2]

    @property
    def confidence(self) -> np.ndarray:
        return self.frames[..., 2]

    def with_coords(self, coords: np.ndarray) -> "SkeletonSequence":
        frames = self.frames.copy()
        frames[..., :2] = coords
        return SkeletonSequence(frames, self.fps)


def write_array(path: str | Path, array: np.ndarray) -> None:
    """Store ``array`` as little-endian float32 with a shape header (``.npy``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.ascontiguousarray(array, dtype="<f4"), allow_pickle=False)


def read_array(path: str | Path) -> np.ndarray:
    arr = np.load(Path(path), allow_pickle=False)
    if arr.dtype != np.dtype("<f4"):
        raise IntegrityError(f"{path}: expected little-endian float32, found {arr.dtype}")
    return arr


def write_skeleton(path: str | Path, seq: SkeletonSequence) -> None:
    write_array(path, seq.frames)


def read_skeleton(path: str | Path, fps: int = DEFAULT_FPS) -> SkeletonSequence:
    arr = read_array(path)
    if arr.ndim != 3 or arr.shape[1:] != (NUM_JOINTS, 3):
        raise IntegrityError(f"{path}: expected shape (T, {NUM_JOINTS}, 3), found {arr.shape}")
    return SkeletonSequence(arr.astype(np.float64), fps)


# ---------------------------------------------------------------------------
# dataset model


@dataclass(frozen=True)
class ReferentLabel:
    object_id: int
    part: str
    class_index: int = field(default=-1, compare=False)

    def __post_init__(self):
        if not 1 <= int(self.object_id) <= 16:
            raise ValueError(f"object_id must be in 1..16, got {self.object_id}")
        if not self.part:
            raise ValueError("part must be a non-empty string")

    @property
    def key(self) -> str:
        return f"{self.object_id:02d}{self.part}"


class LabelVocabulary:
    """Bijection between referent labels and class indices, built from the data."""

    def __init__(self, keys: Iterable[tuple[int, str]]):
        self._keys = sorted(set((int(o), str(p)) for o, p in keys))
        self._index = {k: i for i, k in enumerate(self._keys)}

    def __len__(self) -> int:
        return len(self._keys)

    def index(self, label: ReferentLabel) -> int:
        try:
            return self._index[(label.object_id, label.part)]
        except KeyError:
            raise KeyError(f"label {label.key} not in vocabulary") from None

    def label(self, index: int) -> ReferentLabel:
        obj, part = self._keys[index]
        return ReferentLabel(obj, part, index)

    @property
    def keys(self) -> list[tuple[int, str]]:
        return list(self._keys)


@dataclass
class GestureSample:
    sample_id: str
    dialogue_id: str
    round: int
    speaker: str
    skeleton_path: Path | None = None
    referent: ReferentLabel | None = None
    verbal_ref: str | None = None
    fps: int = DEFAULT_FPS
    _skeleton: SkeletonSequence | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= int(self.round) <= 6:
            raise ValueError(f"round must be in 1..6, got {self.round}")

    @property
    def skeleton(self) -> SkeletonSequence:
        if self._skeleton is None:
            if self.skeleton_path is None:
                raise IntegrityError(f"sample {self.sample_id} has no skeleton")
            self._skeleton = read_skeleton(self.skeleton_path, self.fps)
        return self._skeleton

    @skeleton.setter
    def skeleton(self, seq: SkeletonSequence) -> None:
        self._skeleton = seq


@dataclass(frozen=True)
class FormSimilarityPair:
    id_a: str
    id_b: str
    features: tuple[int, ...]

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ValueError("form pair ids must be distinct")
        if len(self.features) != NUM_FORM_FEATURES or any(f not in (0, 1) for f in self.features):
            raise ValueError("form features must be five 0/1 flags")

    @property
    def shared_count(self) -> int:
        return int(sum(self.features))


@dataclass
class DatasetManifest:
    samples: list[GestureSample]
    form_pairs: list[FormSimilarityPair] = field(default_factory=list)
    splits: dict[str, list[str]] = field(default_factory=dict)
    fps: int = DEFAULT_FPS
    feature_store: Path | None = None
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self._by_id = {s.sample_id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise ManifestValidationError("samples.sample_id", "sample ids must be unique")
        self.vocabulary = LabelVocabulary(
            (s.referent.object_id, s.referent.part) for s in self.samples if s.referent is not None
        )
        for s in self.samples:
            if s.referent is not None:
                s.referent = replace(s.referent, class_index=self.vocabulary.index(s.referent))

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, sample_id: str) -> GestureSample:
        return self._by_id[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._by_id

    def labeled(self) -> list[GestureSample]:
        return [s for s in self.samples if s.referent is not None]

    def split(self, name: str) -> list[GestureSample]:
        return [self._by_id[i] for i in self.splits.get(name, [])]


def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise ManifestValidationError(f"{where}.{key}", "missing")
    value = doc[key]
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind is int:
        raise ManifestValidationError(f"{where}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _parse_sample(doc: dict, i: int, root: Path, fps: int) -> GestureSample:
    where = f"samples[{i}]"
    if not isinstance(doc, dict):
        raise ManifestValidationError(where, "expected an object")
    sample_id = _require(doc, "sample_id", str, where)
    skeleton_path = _require(doc, "skeleton_path", str, where)
    dialogue_id = _require(doc, "dialogue_id", str, where)
    rnd = _require(doc, "round", int, where)
    if not 1 <= rnd <= 6:
        raise ManifestValidationError(f"{where}.round", "must be in 1..6")
    speaker = _require(doc, "speaker", str, where)
    referent = doc.get("referent")
    label = None
    if referent is not None:
        if not isinstance(referent, dict):
            raise ManifestValidationError(f"{where}.referent", "expected an object or null")
        obj = _require(referent, "object_id", int, f"{where}.referent")
        part = _require(referent, "part", str, f"{where}.referent")
        try:
            label = ReferentLabel(obj, part)
        except ValueError as exc:
            raise ManifestValidationError(f"{where}.referent", str(exc)) from None
    verbal_ref = doc.get("verbal_ref")
    if verbal_ref is not None and not isinstance(verbal_ref, str):
        raise ManifestValidationError(f"{where}.verbal_ref", "expected a string or null")
    return GestureSample(
        sample_id=sample_id,
        dialogue_id=dialogue_id,
        round=rnd,
        speaker=speaker,
        skeleton_path=root / skeleton_path,
        referent=label,
        verbal_ref=verbal_ref,
        fps=fps,
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON manifest. Skeleton arrays are read on first access."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestValidationError("<document>", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestValidationError("<document>", "expected an object")
    root = path.parent
    version = _require(doc, "version", int, "manifest")
    if version != MANIFEST_VERSION:
        raise ManifestValidationError("manifest.version", f"unsupported version {version}")
    fps = _require(doc, "fps", int, "manifest")
    if fps <= 0:
        raise ManifestValidationError("manifest.fps", "must be positive")
    raw_samples = _require(doc, "samples", list, "manifest")
    samples = [_parse_sample(s, i, root, fps) for i, s in enumerate(raw_samples)]

    pairs = []
    for i, p in enumerate(doc.get("form_pairs", [])):
        where = f"form_pairs[{i}]"
        a = _require(p, "id_a", str, where)
        b = _require(p, "id_b", str, where)
        feats = _require(p, "features", list, where)
        try:
            pairs.append(FormSimilarityPair(a, b, tuple(int(f) for f in feats)))
        except (ValueError, TypeError) as exc:
            raise ManifestValidationError(where, str(exc)) from None

    splits = doc.get("splits", {})
    if not isinstance(splits, dict):
        raise ManifestValidationError("manifest.splits", "expected an object")
    store = doc.get("feature_store")
    store_path = root / store if store else None

    manifest = DatasetManifest(
        samples=samples, form_pairs=pairs, splits={k: list(v) for k, v in splits.items()},
        fps=fps, feature_store=store_path, version=version,
    )
    _check_integrity(manifest)
    return manifest


def _check_integrity(manifest: DatasetManifest) -> None:
    missing = [s.sample_id for s in manifest.samples if not s.skeleton_path.is_file()]
    if missing:
        raise IntegrityError(f"missing skeleton files for samples: {', '.join(missing)}")
    for p in manifest.form_pairs:
        for sid in (p.id_a, p.id_b):
            if sid not in manifest:
                raise IntegrityError(f"form pair references unknown sample {sid}")
    for name, ids in manifest.splits.items():
        unknown = [i for i in ids if i not in manifest]
        if unknown:
            raise IntegrityError(f"split {name} references unknown samples: {', '.join(unknown[:5])}")
    refs = [s for s in manifest.samples if s.verbal_ref is not None]
    if refs:
        if manifest.feature_store is None:
            raise IntegrityError("samples carry verbal_ref but the manifest names no feature_store")
        from .verbal import FeatureStore

        store = FeatureStore(manifest.feature_store)
        dangling = [s.sample_id for s in refs if not store.has(s.verbal_ref)]
        if dangling:
            raise IntegrityError(f"dangling verbal_ref for samples: {', '.join(dangling[:10])}")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Serialize ``manifest``; skeleton paths are written relative to the manifest directory."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return p.as_posix()

    doc = {
        "version": manifest.version,
        "fps": manifest.fps,
        "samples": [
            {
                "sample_id": s.sample_id,
                "skeleton_path": rel(s.skeleton_path),
                "dialogue_id": s.dialogue_id,
                "round": s.round,
                "speaker": s.speaker,
                "referent": None if s.referent is None
                else {"object_id": s.referent.object_id, "part": s.referent.part},
                "verbal_ref": s.verbal_ref,
            }
            for s in manifest.samples
        ],
        "form_pairs": [
            {"id_a": p.id_a, "id_b": p.id_b, "features": list(p.features)} for p in manifest.form_pairs
        ],
        "splits": manifest.splits,
    }
    if manifest.feature_store is not None:
        doc["feature_store"] = rel(manifest.feature_store)
    path.write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------------------
# windowing


def extract_window(seq: SkeletonSequence, center: float, duration: float) -> SkeletonSequence:
    """Cut ``round(duration * fps)`` frames centred on ``center`` seconds.

    Frames falling outside the sequence are filled by replicating the nearest
    edge frame, so the output length never depends on clipping.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if not 0.0 <= center <= seq.duration:
        raise ValueError(f"center {center} outside [0, {seq.duration}]")
    n = int(round(duration * seq.fps))
    if n < 1:
        raise ValueError(f"window of {duration} s is shorter than one frame at {seq.fps} fps")
    start = int(math.floor(center * seq.fps - n / 2 + 0.5))
    idx = np.clip(np.arange(start, start + n), 0, seq.num_frames - 1)
    return SkeletonSequence(seq.frames[idx], seq.fps)


def oversample_windows(
    gesture_intervals: Sequence[tuple[float, float]],
    window: float = 1.0,
    stride: float = 0.25,
    overlap_threshold: float = 0.5,
) -> list[float]:
    """Centres of stride-aligned windows overlapping some gesture by more than
    ``overlap_threshold * window`` seconds.

    Window starts are ``k * stride`` for integer ``k >= 0``.
    """
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    if not 0 < overlap_threshold <= 1:
        raise ValueError("overlap_threshold must lie in (0, 1]")
    if not gesture_intervals:
        return []
    intervals = np.asarray(gesture_intervals, dtype=np.float64).reshape(-1, 2)
    if np.any(intervals[:, 1] < intervals[:, 0]):
        raise ValueError("gesture intervals must have start <= end")
    k_max = int(math.ceil(intervals[:, 1].max() / stride))
    starts = np.arange(k_max + 1) * stride
    ends = starts + window
    overlap = np.minimum(ends[:, None], intervals[None, :, 1]) - np.maximum(starts[:, None], intervals[None, :, 0])
    keep = (overlap > overlap_threshold * window).any(axis=1)
    return [float(c) for c in starts[keep] + window / 2]


# ---------------------------------------------------------------------------
# normalization


def normalization_params(seq: SkeletonSequence) -> tuple[np.ndarray, float]:
    """Origin (root joint of the middle frame) and scale (median shoulder span)."""
    topo = load_topology()
    coords = seq.coords
    mid = seq.num_frames // 2
    origin = coords[mid, list(topo.root)].mean(axis=0)
    a, b = topo.scale
    spans = np.linalg.norm(coords[:, a] - coords[:, b], axis=-1)
    scale = float(np.median(spans))
    if not np.isfinite(scale) or scale <= 1e-12:
        warnings.warn("degenerate skeleton (zero torso length); using unit scale", DegenerateSkeletonWarning)
        scale = 1.0
    return origin, scale


def apply_normalization(seq: SkeletonSequence, origin: np.ndarray, scale: float) -> SkeletonSequence:
    return seq.with_coords((seq.coords - origin) / scale)


def normalize_skeleton(seq: SkeletonSequence) -> SkeletonSequence:
    """Root-centre on the middle frame's neck and scale the median torso (shoulder) span to 1."""
    origin, scale = normalization_params(seq)
    return apply_normalization(seq, origin, scale)


# ---------------------------------------------------------------------------
# augmentation and noise


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts, e.g. ``(global_seed, sample_id, epoch)``."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(frozen=True)
class AugmentSpec:
    """Enabled skeletal transforms and their parameter ranges.

    ``shift`` is a fraction of the skeleton's bounding box; ranges are ``(min, max)``.
    Setting a range to ``None`` disables that transform.
    """

    mirror: bool = True
    shift: float | None = 0.1
    scale: tuple[float, float] | None = (0.9, 1.1)
    rotation: tuple[float, float] | None = (-15.0, 15.0)
    jitter: float | None = 1.0
    shear: tuple[float, float] | None = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("scale", "rotation", "shear"):
            rng = getattr(self, name)
            if rng is not None and (len(rng) != 2 or rng[0] > rng[1]):
                raise ValueError(f"{name} range must be (min, max) with min <= max")
        if self.scale is not None and self.scale[0] <= 0:
            raise ValueError("scale factors must be positive")
        if self.shift is not None and self.shift < 0:
            raise ValueError("shift must be non-negative")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter sigma must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(mirror=False, shift=None, scale=None, rotation=None, jitter=None, shear=None)


def _mirror(coords: np.ndarray) -> np.ndarray:
    perm = load_topology().mirror_permutation
    center_x = coords[..., 0].mean()
    out = coords[:, perm].copy()
    out[..., 0] = 2 * center_x - out[..., 0]
    return out


def augment(seq: SkeletonSequence, spec: AugmentSpec, rng_seed: int) -> SkeletonSequence:
    """Apply the enabled transforms in a fixed order with parameters drawn from ``rng_seed``.

    Geometric transforms act about the sequence centroid. Mirroring fires with
    probability 1/2 and swaps left/right joints. The confidence channel is carried
    through unchanged.
    """
    rng = np.random.default_rng(rng_seed)
    coords = seq.coords.copy()
    # one draw per slot whether or not the transform is enabled keeps parameter streams aligned
    u_mirror = rng.random()
    u_scale = rng.random()
    u_rot = rng.random()
    u_shear = rng.random(2)
    u_shift = rng.random(2)

    if spec.mirror and u_mirror < 0.5:
        coords = _mirror(coords)
    center = coords.reshape(-1, 2).mean(axis=0)
    linear = np.eye(2)
    if spec.scale is not None:
        lo, hi = spec.scale
        linear = (lo + (hi - lo) * u_scale) * linear
    if spec.rotation is not None:
        lo, hi = spec.rotation
        theta = math.radians(lo + (hi - lo) * u_rot)
        c, s = math.cos(theta), math.sin(theta)
        linear = np.array([[c, -s], [s, c]]) @ linear
    if spec.shear is not None:
        lo, hi = spec.shear
        kx, ky = lo + (hi - lo) * u_shear
        linear = np.array([[1.0, kx], [ky, 1.0]]) @ linear
    if not np.array_equal(linear, np.eye(2)):
        coords = (coords - center) @ linear.T + center
    if spec.shift is not None and spec.shift > 0:
        flat = coords.reshape(-1, 2)
        extent = flat.max(axis=0) - flat.min(axis=0)
        coords = coords + (2 * u_shift - 1) * spec.shift * extent
    if spec.jitter:
        coords = coords + rng.normal(0.0, spec.jitter, size=coords.shape)
    return seq.with_coords(coords)


def add_gaussian_jitter(seq: SkeletonSequence, sigma: float, rng_seed: int) -> SkeletonSequence:
    """Perturb x, y by i.i.d. N(0, sigma^2) pixels; confidence is untouched."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return SkeletonSequence(seq.frames.copy(), seq.fps)
    rng = np.random.default_rng(rng_seed)
    return seq.with_coords(seq.coords + rng.normal(0.0, sigma, size=seq.coords.shape))
