"""Synthetic referential-gesture corpus with planted structure.

Every referent owns a gesture prototype: a handedness, a handshape (finger
spread and per-finger curl) and an elliptical wrist trajectory (frequency,
amplitude, aspect, orientation, position). A sample renders its referent's
prototype with per-sample style perturbation, a per-dialogue drift that grows
over rounds, class-unrelated nuisance motion and pixel noise. With
``verbal_drift`` the utterances drift too: each dialogue settles on its own
variant of a referent's code.

``trajectory_variability`` and ``hand_flip_rate`` loosen the tie between a
referent and its large-scale arm motion, which leaves the small-scale
handshape as the main carrier of referent identity. Form-similarity flags
are coded on the intended form (prototype, style, drift), not on that
execution scatter. The co-occurring utterance carries the referent's
semantic code with probability ``p_s``, otherwise an unrelated code.

Coordinates are pixels in an image frame with y pointing down.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .skeleton import (
    NUM_JOINTS,
    DatasetManifest,
    FormSimilarityPair,
    GestureSample,
    ReferentLabel,
    SkeletonSequence,
    derive_seed,
    normalize_skeleton,
    write_manifest,
    write_skeleton,
)
from .verbal import SEMANTIC_WIDTH, SPEECH_WIDTH, FeatureStore, UtteranceFeatures

MANIFEST_NAME = "manifest.json"
SEMANTIC_STORE = "features_semantic"
SPEECH_STORE = "features_speech"

# continuous prototype parameters and the range each is drawn from
PARAM_RANGES = {
    "frequency": (0.6, 2.2),    # Hz
    "amplitude": (0.12, 0.40),  # shoulder spans
    "aspect": (0.0, 1.0),       # ellipse minor/major
    "orientation": (0.0, math.pi),
    "pos_x": (-0.1, 0.7),       # shoulder spans, toward the body side of the active hand
    "pos_y": (-0.2, 0.9),
    "spread": (0.0, 1.0),
    "curl_thumb": (0.0, 1.0),
    "curl_index": (0.0, 1.0),
    "curl_middle": (0.0, 1.0),
    "curl_ring": (0.0, 1.0),
    "curl_pinky": (0.0, 1.0),
    "phase": (0.0, 2 * math.pi),
}
PARAM_NAMES = tuple(PARAM_RANGES)
HANDS = ("right", "left", "both")
CURLS = ("curl_thumb", "curl_index", "curl_middle", "curl_ring", "curl_pinky")
HANDSHAPE = ("spread", *CURLS)

# which continuous parameters drive each binary form flag (hands is categorical)
FORM_GROUPS = {
    "shape": HANDSHAPE,
    "movement": ("frequency", "aspect"),
    "rotation": ("orientation",),
    "position": ("pos_x", "pos_y"),
}


class SynthConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SynthConfig:
    num_referents: int = 10
    samples_per_referent: int = 200
    dialogues: int = 5
    rounds: int = 6
    fps: int = 25
    duration: float = 1.0
    motion_noise: float = 2.0        # sigma_g, pixels
    style_variability: float = 0.08  # per-sample prototype perturbation, fraction of each range
    trajectory_variability: float = 0.35  # execution scatter of the non-handshape parameters
    hand_flip_rate: float = 0.5      # probability a sample redraws its handedness
    nuisance_motion: float = 0.15    # class-unrelated sway, shoulder spans
    body_variability: float = 1.0    # 0 pins body size and placement
    p_s: float = 0.8
    semantic_noise: float = 0.3
    tokens_per_utterance: tuple[int, int] = (2, 6)
    empty_utterance_rate: float = 0.0
    drift: float = 0.0               # per-dialogue prototype drift, fraction of each range
    verbal_drift: float = 0.0        # per-dialogue drift of the referring expression, per code dimension
    form_pairs_per_referent: int = 40
    speech: bool = False
    speech_layers: int = 4
    seed: int = 0

    def __post_init__(self):
        def bad(name, msg):
            raise SynthConfigError(name, msg)

        if self.num_referents < 2:
            bad("num_referents", "K must be >= 2")
        if self.num_referents > 16 * 99:
            bad("num_referents", "too many referents")
        if self.samples_per_referent < 1:
            bad("samples_per_referent", "must be >= 1")
        if self.dialogues < 1:
            bad("dialogues", "must be >= 1")
        if not 1 <= self.rounds <= 6:
            bad("rounds", "must be in 1..6")
        if self.fps < 1:
            bad("fps", "must be >= 1")
        if self.duration <= 0:
            bad("duration", "must be positive")
        if not 0.0 <= self.p_s <= 1.0:
            bad("p_s", "must lie in [0, 1]")
        if not 0.0 <= self.hand_flip_rate <= 1.0:
            bad("hand_flip_rate", "must lie in [0, 1]")
        if not 0.0 <= self.empty_utterance_rate <= 1.0:
            bad("empty_utterance_rate", "must lie in [0, 1]")
        for name in ("motion_noise", "style_variability", "trajectory_variability", "nuisance_motion", "body_variability",
                     "semantic_noise", "drift", "verbal_drift"):
            if getattr(self, name) < 0:
                bad(name, "must be non-negative")
        lo, hi = self.tokens_per_utterance
        if not 1 <= lo <= hi:
            bad("tokens_per_utterance", "need 1 <= min <= max")
        if self.form_pairs_per_referent < 0:
            bad("form_pairs_per_referent", "must be non-negative")
        if self.speech_layers < 1:
            bad("speech_layers", "must be >= 1")

    @property
    def num_frames(self) -> int:
        return max(1, round(self.duration * self.fps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens_per_utterance"] = list(self.tokens_per_utterance)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SynthConfigError(sorted(unknown)[0], "unknown field")
        doc = dict(doc)
        if "tokens_per_utterance" in doc:
            doc["tokens_per_utterance"] = tuple(doc["tokens_per_utterance"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SynthConfigError("config", str(exc)) from None


@dataclass(frozen=True)
class Prototype:
    hands: int
    params: dict

    def vector(self) -> np.ndarray:
        return np.array([self.params[k] for k in PARAM_NAMES])


def referent_label(k: int) -> ReferentLabel:
    return ReferentLabel(k % 16 + 1, f"part{k // 16:02d}")


def prototypes(config: SynthConfig) -> list[Prototype]:
    out = []
    for k in range(config.num_referents):
        rng = np.random.default_rng(derive_seed(config.seed, "prototype", k))
        params = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES.items()}
        out.append(Prototype(int(rng.integers(len(HANDS))), params))
    return out


def _span(name: str) -> float:
    lo, hi = PARAM_RANGES[name]
    return hi - lo


def _clip(params: dict) -> dict:
    out = {}
    for name, v in params.items():
        lo, hi = PARAM_RANGES[name]
        if name in ("orientation", "phase"):
            out[name] = lo + (v - lo) % (hi - lo)
        else:
            out[name] = float(np.clip(v, lo, hi))
    return out


def dialogue_drift(config: SynthConfig, dialogue: int, referent: int) -> np.ndarray:
    """Unit-range drift direction shared by one dialogue's gestures for one referent."""
    rng = np.random.default_rng(derive_seed(config.seed, "drift", dialogue, referent))
    return rng.normal(size=len(PARAM_NAMES))


def _growth(config: SynthConfig, round_: int) -> float:
    # mild growth: half the magnitude in round 1, full magnitude in the last round
    if config.rounds == 1:
        return 1.0
    return 0.5 + 0.5 * (round_ - 1) / (config.rounds - 1)


def drift_scale(config: SynthConfig, round_: int) -> float:
    return config.drift * _growth(config, round_)


def sample_parameters(config: SynthConfig, proto: Prototype, referent: int, dialogue: int, round_: int,
                      rng: np.random.Generator) -> tuple[Prototype, Prototype]:
    """(intended form, performed form) of one sample.

    The intended form is the prototype plus style and drift; form-similarity
    flags are coded on it. The performed form adds execution scatter (trajectory
    variability and hand swaps) and is what gets rendered.
    """
    direction = dialogue_drift(config, dialogue, referent)
    scale = drift_scale(config, round_)
    intended, performed = {}, {}
    for i, name in enumerate(PARAM_NAMES):
        style, scatter = rng.normal(size=2)
        intended[name] = proto.params[name] + _span(name) * (style * config.style_variability + scale * direction[i])
        performed[name] = intended[name]
        if name not in HANDSHAPE:
            performed[name] += _span(name) * scatter * config.trajectory_variability
    hands = proto.hands
    if rng.uniform() < config.hand_flip_rate:
        hands = int(rng.integers(len(HANDS)))
    return Prototype(proto.hands, _clip(intended)), Prototype(hands, _clip(performed))


# ---------------------------------------------------------------------------
# rendering


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _hand_points(wrist: np.ndarray, elbow: np.ndarray, span: float, spread: float, curls) -> np.ndarray:
    """Ten hand points (root, thumb tip, base+tip for index..pinky) per frame, shape (T, 10, 2)."""
    forearm = wrist - elbow
    forearm /= np.maximum(np.linalg.norm(forearm, axis=-1, keepdims=True), 1e-9)
    base_len = 0.15 * span
    angles = np.deg2rad(np.array([55.0, 18.0, 0.0, -16.0, -32.0]) * (0.4 + 1.2 * spread))
    pts = [wrist]
    for f, (a, curl) in enumerate(zip(angles, curls)):
        tip_len = 0.50 * span * (1.0 - 0.7 * curl)
        d = forearm @ _rot(a).T
        if f == 0:
            pts.append(wrist + 0.8 * tip_len * d)
        else:
            pts.append(wrist + base_len * d)
            pts.append(wrist + (base_len + tip_len) * d)
    return np.stack(pts, axis=1)


def render(config: SynthConfig, params: Prototype, rng: np.random.Generator | None,
           body: tuple[float, float, float] = (130.0, 320.0, 200.0)) -> SkeletonSequence:
    """Render one window of ``config.num_frames`` frames.

    ``rng=None`` draws nothing (no nuisance, no noise, no phase jitter), which
    yields the noiseless prototype rendering used by the oracle.
    """
    t_count = config.num_frames
    t = np.arange(t_count) / config.fps
    span, cx, cy = body
    p = params.params

    sway = np.zeros((t_count, 2))
    wobble = np.zeros((t_count, 2))
    if rng is not None and config.nuisance_motion > 0:
        for target in (sway, wobble):
            f = rng.uniform(0.3, 2.5)
            ph = rng.uniform(0, 2 * math.pi, size=2)
            amp = config.nuisance_motion * span * rng.uniform(0.3, 1.0, size=2)
            target += amp * np.sin(2 * math.pi * f * t[:, None] + ph)

    nose = np.array([cx, cy - 0.6 * span])
    l_sh = np.array([cx + span / 2, cy])
    r_sh = np.array([cx - span / 2, cy])
    rest = {"right": np.array([cx - 0.45 * span, cy + 1.05 * span]),
            "left": np.array([cx + 0.45 * span, cy + 1.05 * span])}

    omega = 2 * math.pi * p["frequency"] * t + p["phase"]
    ellipse = np.stack([np.cos(omega), p["aspect"] * np.sin(omega)], axis=-1) * p["amplitude"] * span
    path = ellipse @ _rot(p["orientation"]).T

    active = {"right": params.hands in (0, 2), "left": params.hands in (1, 2)}
    wrists = {}
    for side, sign in (("right", -1.0), ("left", 1.0)):
        if active[side]:
            center = np.array([cx + sign * p["pos_x"] * span, cy + p["pos_y"] * span])
            mirror = np.array([sign * -1.0, 1.0]) if side == "left" else np.ones(2)
            wrists[side] = center + path * mirror + wobble
        else:
            wrists[side] = np.broadcast_to(rest[side], (t_count, 2)) + 0.2 * wobble
    elbows = {}
    for side, sh, sign in (("right", r_sh, -1.0), ("left", l_sh, 1.0)):
        mid = (sh + wrists[side]) / 2
        elbows[side] = mid + np.array([sign * 0.18 * span, 0.15 * span])

    curls = [p[name] for name in CURLS]
    coords = np.zeros((t_count, NUM_JOINTS, 2))
    coords[:, 0] = nose
    coords[:, 1] = l_sh
    coords[:, 2] = r_sh
    coords[:, 3] = elbows["left"]
    coords[:, 4] = elbows["right"]
    coords[:, 5] = wrists["left"]
    coords[:, 6] = wrists["right"]
    coords[:, 7:17] = _hand_points(wrists["left"], elbows["left"], span, p["spread"], curls)
    coords[:, 17:27] = _hand_points(wrists["right"], elbows["right"], span, p["spread"], curls)
    coords += sway[:, None, :]
    if rng is not None and config.motion_noise > 0:
        coords += rng.normal(0.0, config.motion_noise, size=coords.shape)
    frames = np.concatenate([coords, np.ones((t_count, NUM_JOINTS, 1))], axis=-1)
    return SkeletonSequence(frames, config.fps)


def _body(config: SynthConfig, rng: np.random.Generator) -> tuple[float, float, float]:
    v = config.body_variability
    return (130.0 + v * rng.uniform(-20, 20), 320.0 + v * rng.uniform(-25, 25), 200.0 + v * rng.uniform(-20, 20))


# ---------------------------------------------------------------------------
# verbal features


def semantic_code(config: SynthConfig, referent: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(config.seed, "semantic-code", referent))
    return rng.normal(size=SEMANTIC_WIDTH)


def _speech_projection(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(config.seed, "speech-projection"))
    return rng.normal(size=(SEMANTIC_WIDTH, SPEECH_WIDTH)) / math.sqrt(SEMANTIC_WIDTH)


def verbal_code(config: SynthConfig, referent: int, dialogue: int, round_: int) -> np.ndarray:
    """The referent's code as one dialogue's partners have come to express it."""
    code = semantic_code(config, referent)
    if config.verbal_drift == 0:
        return code
    rng = np.random.default_rng(derive_seed(config.seed, "verbal-drift", dialogue, referent))
    return code + config.verbal_drift * _growth(config, round_) * rng.normal(size=SEMANTIC_WIDTH)


def utterance(config: SynthConfig, referent: int, rng: np.random.Generator,
              dialogue: int = 0, round_: int = 1) -> tuple[np.ndarray, bool]:
    """Token matrix for one utterance and whether it carries the true referent."""
    lo, hi = config.tokens_per_utterance
    n = int(rng.integers(lo, hi + 1))
    informative = bool(rng.uniform() < config.p_s)
    code = verbal_code(config, referent, dialogue, round_) if informative else rng.normal(size=SEMANTIC_WIDTH)
    tokens = code + config.semantic_noise * rng.normal(size=(n, SEMANTIC_WIDTH))
    return tokens, informative


# ---------------------------------------------------------------------------
# corpus


@dataclass
class SynthCorpus:
    manifest: DatasetManifest
    root: Path
    sample_params: dict[str, Prototype]  # performed
    form_params: dict[str, Prototype]    # intended, as coded by the form flags
    informative: dict[str, bool]


def _sample_layout(config: SynthConfig):
    """(referent, index, dialogue, round, speaker) for every sample, balanced over dialogues and rounds."""
    cells = config.dialogues * config.rounds
    for k in range(config.num_referents):
        for i in range(config.samples_per_referent):
            cell = i % cells
            dialogue, round_ = cell % config.dialogues, cell // config.dialogues + 1
            speaker = "AB"[(i // cells) % 2]
            yield k, i, dialogue, round_, speaker


def form_flags(a: Prototype, b: Prototype, thresholds: dict[str, float]) -> tuple[int, ...]:
    flags = []
    for name in ("shape", "movement", "rotation", "position"):
        flags.append(int(_group_distance(a, b, name) <= thresholds[name]))
    flags.append(int(a.hands == b.hands))
    return tuple(flags)


def _group_distance(a: Prototype, b: Prototype, group: str) -> float:
    total = 0.0
    for name in FORM_GROUPS[group]:
        d = abs(a.params[name] - b.params[name])
        if name == "orientation":
            d = min(d, math.pi - d)
        total += (d / _span(name)) ** 2
    return math.sqrt(total)


def parameter_distance(a: Prototype, b: Prototype) -> float:
    return sum(_group_distance(a, b, g) for g in FORM_GROUPS) + float(a.hands != b.hands)


def _form_pairs(config: SynthConfig, ids_by_referent: dict[int, list[str]],
                params: dict[str, Prototype]) -> list[FormSimilarityPair]:
    candidates = []
    for k, ids in ids_by_referent.items():
        if len(ids) < 2:
            continue
        rng = np.random.default_rng(derive_seed(config.seed, "form-pairs", k))
        seen = set()
        max_pairs = len(ids) * (len(ids) - 1) // 2
        while len(seen) < min(config.form_pairs_per_referent, max_pairs):
            i, j = sorted(rng.choice(len(ids), size=2, replace=False))
            seen.add((ids[i], ids[j]))
        candidates += sorted(seen)
    if not candidates:
        return []
    # median split per feature group keeps every flag informative
    thresholds = {g: float(np.median([_group_distance(params[a], params[b], g) for a, b in candidates]))
                  for g in FORM_GROUPS}
    return [FormSimilarityPair(a, b, form_flags(params[a], params[b], thresholds)) for a, b in candidates]


def generate_corpus(config: SynthConfig, out_dir: str | Path) -> SynthCorpus:
    """Write skeletons, feature stores and ``manifest.json`` under ``out_dir``."""
    root = Path(out_dir)
    (root / "skeletons").mkdir(parents=True, exist_ok=True)
    protos = prototypes(config)
    semantic = FeatureStore(root / SEMANTIC_STORE)
    speech = FeatureStore(root / SPEECH_STORE) if config.speech else None
    projection = _speech_projection(config) if config.speech else None

    samples, params, form, informative = [], {}, {}, {}
    ids_by_referent: dict[int, list[str]] = {}
    for k, i, d, r, speaker in _sample_layout(config):
        sid = f"k{k:03d}_{i:04d}"
        rng = np.random.default_rng(derive_seed(config.seed, "sample", k, i))
        intended, sp = sample_parameters(config, protos[k], k, d, r, rng)
        seq = render(config, sp, rng, _body(config, rng))
        path = root / "skeletons" / f"{sid}.npy"
        write_skeleton(path, seq)

        verbal_ref = None
        if rng.uniform() >= config.empty_utterance_rate:
            tokens, informative[sid] = utterance(config, k, rng, d, r)
            window = (0.0, config.duration)
            semantic.put(sid, UtteranceFeatures("semantic", tokens, window))
            if speech is not None:
                base = tokens @ projection
                layers = base[None] + 0.5 * rng.normal(size=(config.speech_layers, *base.shape))
                speech.put(sid, UtteranceFeatures("speech", layers.mean(axis=0), window, layers))
            verbal_ref = sid
        samples.append(GestureSample(sid, f"dlg{d:02d}", r, speaker, path, referent_label(k), verbal_ref,
                                     config.fps))
        params[sid] = sp
        form[sid] = intended
        ids_by_referent.setdefault(k, []).append(sid)

    semantic.flush()
    if speech is not None:
        speech.flush()
    pairs = _form_pairs(config, ids_by_referent, form)
    manifest = DatasetManifest(samples, pairs, {}, config.fps, root / SEMANTIC_STORE)
    write_manifest(manifest, root / MANIFEST_NAME)
    (root / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    return SynthCorpus(manifest, root, params, form, informative)


# ---------------------------------------------------------------------------
# oracle


def oracle_accuracy_bounds(config: SynthConfig, trials: int | None = None) -> tuple[float, float]:
    """(gesture ceiling, semantic ceiling).

    The gesture ceiling is the accuracy of a nearest-centroid classifier whose
    centroids are the noiseless normalized prototype renderings, measured on
    freshly simulated samples. The semantic ceiling is mixture arithmetic.
    """
    k_count = config.num_referents
    p_empty = config.empty_utterance_rate
    semantic = (1 - p_empty) * (config.p_s + (1 - config.p_s) / k_count) + p_empty / k_count

    protos = prototypes(config)
    centroids = np.stack([normalize_skeleton(render(config, p, None)).coords.ravel() for p in protos])
    trials = trials or min(config.samples_per_referent, 50)
    correct = total = 0
    for k in range(k_count):
        for i in range(trials):
            rng = np.random.default_rng(derive_seed(config.seed, "oracle", k, i))
            d = int(rng.integers(config.dialogues))
            r = int(rng.integers(config.rounds)) + 1
            _, sp = sample_parameters(config, protos[k], k, d, r, rng)
            x = normalize_skeleton(render(config, sp, rng, _body(config, rng))).coords.ravel()
            correct += int(np.argmin(((centroids - x) ** 2).sum(axis=1)) == k)
            total += 1
    return correct / total, semantic
