import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gesture_embed.skeleton import (
    NUM_JOINTS,
    AugmentSpec,
    DatasetManifest,
    DegenerateSkeletonWarning,
    FormSimilarityPair,
    GestureSample,
    IntegrityError,
    ManifestValidationError,
    ReferentLabel,
    SkeletonSequence,
    add_gaussian_jitter,
    augment,
    derive_seed,
    extract_window,
    load_manifest,
    load_topology,
    normalization_params,
    normalize_skeleton,
    oversample_windows,
    read_skeleton,
    write_manifest,
    write_skeleton,
)


def random_seq(seed=0, t=10, fps=25):
    rng = np.random.default_rng(seed)
    frames = np.concatenate([rng.uniform(100, 500, size=(t, NUM_JOINTS, 2)),
                             rng.uniform(0, 1, size=(t, NUM_JOINTS, 1))], axis=-1)
    return SkeletonSequence(frames, fps)


def ramp_seq(t=250, fps=25):
    """Frame index stored in every coordinate, to read off which frames a window took."""
    frames = np.zeros((t, NUM_JOINTS, 3))
    frames[..., 0] = np.arange(t)[:, None]
    frames[..., 2] = 1.0
    return SkeletonSequence(frames, fps)


# -- sequence type -----------------------------------------------------------


def test_sequence_validation():
    with pytest.raises(ValueError):
        SkeletonSequence(np.zeros((5, 26, 3)), 25)
    bad = np.zeros((5, NUM_JOINTS, 3))
    bad[0, 0, 2] = 1.5
    with pytest.raises(ValueError):
        SkeletonSequence(bad, 25)
    with pytest.raises(ValueError):
        SkeletonSequence(np.zeros((0, NUM_JOINTS, 3)), 25)
    with pytest.raises(ValueError):
        SkeletonSequence(np.zeros((5, NUM_JOINTS, 3)), 0)


def test_topology_file():
    topo = load_topology()
    assert len(topo.joints) == NUM_JOINTS
    perm = topo.mirror_permutation
    assert sorted(perm) == list(range(NUM_JOINTS))
    assert np.array_equal(perm[perm], np.arange(NUM_JOINTS))
    assert all(0 <= a < NUM_JOINTS and 0 <= b < NUM_JOINTS for a, b in topo.edges)


def test_skeleton_file_roundtrip(tmp_path):
    seq = random_seq(1)
    write_skeleton(tmp_path / "a.npy", seq)
    raw = np.load(tmp_path / "a.npy")
    assert raw.dtype == np.dtype("<f4") and raw.shape == (10, NUM_JOINTS, 3)
    back = read_skeleton(tmp_path / "a.npy", 25)
    np.testing.assert_allclose(back.frames, seq.frames, rtol=1e-6)


# -- windows -----------------------------------------------------------------


def test_extract_window_covers_expected_frames():
    w = extract_window(ramp_seq(), center=2.0, duration=1.0)
    assert w.num_frames == 25
    # [1.5, 2.5) s at 25 fps is frames 37.5 .. 62.5 -> 38 .. 62
    assert w.coords[0, 0, 0] == 38 and w.coords[-1, 0, 0] == 62


def test_extract_window_left_edge_replicates_first_frame():
    w = extract_window(ramp_seq(), center=0.0, duration=1.0)
    first = w.coords[:, 0, 0]
    assert w.num_frames == 25
    assert np.all(first[:13] == 0) and first[13] == 1


def test_extract_window_two_seconds():
    assert extract_window(ramp_seq(), 5.0, 2.0).num_frames == 50


def test_extract_window_errors():
    with pytest.raises(ValueError):
        extract_window(ramp_seq(), 2.0, 0.0)
    with pytest.raises(ValueError):
        extract_window(ramp_seq(), 11.0, 1.0)
    with pytest.raises(ValueError):
        extract_window(ramp_seq(), 1.0, 0.01)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(0.04, 3.0), st.sampled_from([10, 25, 30]))
def test_extract_window_length_invariant(center, duration, fps):
    seq = ramp_seq(t=10 * fps, fps=fps)
    center = min(center, seq.duration)
    assume(round(duration * fps) >= 1)
    assert extract_window(seq, center, duration).num_frames == round(duration * fps)


def brute_force_windows(intervals, window, stride, thr, horizon):
    out = []
    k = 0
    while k * stride <= horizon:
        s = k * stride
        best = max((min(s + window, b) - max(s, a) for a, b in intervals), default=-1)
        if best > thr * window:
            out.append(s + window / 2)
        k += 1
    return out


def test_oversample_single_gesture():
    centers = oversample_windows([(2.0, 3.0)], window=1.0, stride=0.5, overlap_threshold=0.5)
    assert centers == [2.5]
    assert centers == brute_force_windows([(2.0, 3.0)], 1.0, 0.5, 0.5, 5.0)


def test_oversample_edge_cases():
    assert oversample_windows([]) == []
    assert oversample_windows([(1.0, 1.6)], window=1.0, stride=0.25, overlap_threshold=1.0) == []
    with pytest.raises(ValueError):
        oversample_windows([(0, 1)], window=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 20), st.floats(0.05, 3)), max_size=100),
       st.sampled_from([0.25, 0.5]), st.sampled_from([0.3, 0.5, 0.9]))
def test_oversample_matches_brute_force(raw, stride, thr):
    intervals = [(a, a + d) for a, d in raw]
    got = oversample_windows(intervals, 1.0, stride, thr)
    horizon = math.ceil(max((b for _, b in intervals), default=0) / stride) * stride
    assert got == pytest.approx(brute_force_windows(intervals, 1.0, stride, thr, horizon))


# -- normalization --------------------------------------------------------------


def shoulder_median(seq):
    a, b = load_topology().scale
    return float(np.median(np.linalg.norm(seq.coords[:, a] - seq.coords[:, b], axis=-1)))


@pytest.mark.parametrize("seed", range(5))
def test_normalized_torso_is_unit(seed):
    out = normalize_skeleton(random_seq(seed))
    assert abs(shoulder_median(out) - 1.0) < 1e-9


def test_normalize_idempotent_and_translation_invariant():
    seq = random_seq(3)
    once = normalize_skeleton(seq)
    np.testing.assert_allclose(normalize_skeleton(once).frames, once.frames, atol=1e-12)
    moved = seq.with_coords(seq.coords + np.array([100.0, 40.0]))
    np.testing.assert_allclose(normalize_skeleton(moved).frames, once.frames, atol=1e-9)
    np.testing.assert_array_equal(once.confidence, seq.confidence)


def test_normalize_degenerate_warns():
    seq = SkeletonSequence(np.zeros((4, NUM_JOINTS, 3)), 25)
    with pytest.warns(DegenerateSkeletonWarning):
        _, scale = normalization_params(seq)
    assert scale == 1.0


# -- augmentation -------------------------------------------------------------------


def test_augment_disabled_is_identity():
    seq = random_seq(4)
    np.testing.assert_array_equal(augment(seq, AugmentSpec.disabled(), 7).frames, seq.frames)


def test_zero_rotation_only_is_identity():
    spec = AugmentSpec(mirror=False, shift=None, scale=None, rotation=(0.0, 0.0), jitter=None, shear=None)
    np.testing.assert_allclose(augment(random_seq(5), spec, 3).frames, random_seq(5).frames, atol=1e-12)


def test_mirror_is_involution():
    spec = AugmentSpec(mirror=True, shift=None, scale=None, rotation=None, jitter=None, shear=None)
    seq = random_seq(6)
    # pick a seed whose first draw fires the mirror
    seed = next(s for s in range(100) if np.random.default_rng(s).random() < 0.5)
    once = augment(seq, spec, seed)
    assert not np.allclose(once.coords, seq.coords)
    np.testing.assert_allclose(augment(once, spec, seed).coords, seq.coords, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_rotation_preserves_distances(seed):
    spec = AugmentSpec(mirror=False, shift=None, scale=None, rotation=(-40.0, 40.0), jitter=None, shear=None)
    seq = random_seq(seed % 100)
    out = augment(seq, spec, seed)
    pts_in, pts_out = seq.coords.reshape(-1, 2), out.coords.reshape(-1, 2)
    d_in = np.linalg.norm(pts_in[:, None] - pts_in[None], axis=-1)
    d_out = np.linalg.norm(pts_out[:, None] - pts_out[None], axis=-1)
    assert np.abs(d_in - d_out).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_keeps_confidence_and_is_deterministic(seed):
    seq = random_seq(seed % 50)
    a, b = augment(seq, AugmentSpec(), seed), augment(seq, AugmentSpec(), seed)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.confidence, seq.confidence)


def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(scale=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentSpec(jitter=-1.0)
    with pytest.raises(ValueError):
        AugmentSpec(rotation=(10.0, -10.0))


# -- jitter ------------------------------------------------------------------------


def test_jitter_zero_is_bit_identical():
    seq = random_seq(8)
    assert add_gaussian_jitter(seq, 0.0, 1).frames.tobytes() == seq.frames.tobytes()


def test_jitter_standard_deviation():
    frames = np.zeros((20000, NUM_JOINTS, 3))
    seq = SkeletonSequence(frames[:, :, :], 25)
    out = add_gaussian_jitter(seq, 1.0, 11)
    draws = out.coords.ravel()
    assert draws.size > 1_000_000
    assert abs(draws.std() - 1.0) < 0.01
    np.testing.assert_array_equal(out.confidence, seq.confidence)


@pytest.mark.parametrize("sigma", [0.2, 1.0, 15.0])
def test_jitter_grid_deterministic(sigma):
    seq = random_seq(9)
    a, b = add_gaussian_jitter(seq, sigma, 5), add_gaussian_jitter(seq, sigma, 5)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert np.isfinite(a.frames).all()


def test_jitter_negative_sigma():
    with pytest.raises(ValueError):
        add_gaussian_jitter(random_seq(), -0.1, 0)


def test_derive_seed_stable():
    assert derive_seed(0, "x", 1) == derive_seed(0, "x", 1)
    assert derive_seed(0, "x", 1) != derive_seed(0, "x", 2)
    assert 0 <= derive_seed("a") < 2**63


# -- manifest ---------------------------------------------------------------------------


def build_dataset(root, n=100, with_pairs=True):
    samples = []
    for i in range(n):
        path = root / "skel" / f"s{i:03d}.npy"
        write_skeleton(path, random_seq(i, t=4))
        label = ReferentLabel(i % 16 + 1, "main" if i % 3 else "a") if i % 10 else None
        samples.append(GestureSample(f"s{i:03d}", f"d{i % 4}", i % 6 + 1, "AB"[i % 2], path, label))
    pairs = [FormSimilarityPair("s001", "s017", (1, 0, 1, 1, 0))] if with_pairs and n > 17 else []
    return DatasetManifest(samples, pairs, {"train": [s.sample_id for s in samples[: n // 2]]}, 25)


def test_manifest_roundtrip(tmp_path):
    manifest = build_dataset(tmp_path)
    write_manifest(manifest, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert [s.sample_id for s in back.samples] == [s.sample_id for s in manifest.samples]
    assert [s.referent for s in back.samples] == [s.referent for s in manifest.samples]
    assert [s.referent.class_index for s in back.labeled()] == [s.referent.class_index for s in manifest.labeled()]
    assert back.form_pairs[0].shared_count == 3
    assert len(back.split("train")) == 50
    np.testing.assert_allclose(back["s005"].skeleton.frames, random_seq(5, t=4).frames, rtol=1e-6)


def test_vocabulary_is_bijective(tmp_path):
    manifest = build_dataset(tmp_path)
    idx = {s.referent.key: s.referent.class_index for s in manifest.labeled()}
    assert sorted(idx.values()) == list(range(len(manifest.vocabulary)))
    for key, i in idx.items():
        assert manifest.vocabulary.label(i).key == key


def test_empty_manifest(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"version": 1, "fps": 25, "samples": []}))
    assert len(load_manifest(tmp_path / "m.json")) == 0


def test_missing_skeleton_lists_sample(tmp_path):
    manifest = build_dataset(tmp_path, n=5, with_pairs=False)
    write_manifest(manifest, tmp_path / "manifest.json")
    (tmp_path / "skel" / "s003.npy").unlink()
    with pytest.raises(IntegrityError, match="s003"):
        load_manifest(tmp_path / "manifest.json")


def test_schema_violation_names_field(tmp_path):
    manifest = build_dataset(tmp_path, n=3, with_pairs=False)
    write_manifest(manifest, tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["samples"][1]["round"] = 9
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestValidationError) as err:
        load_manifest(tmp_path / "bad.json")
    assert err.value.field == "samples[1].round"
    del doc["samples"][0]["speaker"]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestValidationError, match=r"samples\[0\]\.speaker"):
        load_manifest(tmp_path / "bad.json")


def test_dangling_verbal_ref(tmp_path):
    from gesture_embed.verbal import FeatureStore

    manifest = build_dataset(tmp_path, n=3, with_pairs=False)
    manifest.samples[0].verbal_ref = "nope"
    FeatureStore(tmp_path / "store").flush()
    manifest.feature_store = tmp_path / "store"
    write_manifest(manifest, tmp_path / "manifest.json")
    with pytest.raises(IntegrityError, match="s000"):
        load_manifest(tmp_path / "manifest.json")


def test_missing_manifest_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.json")


def test_duplicate_ids_rejected(tmp_path):
    manifest = build_dataset(tmp_path, n=2, with_pairs=False)
    with pytest.raises(ManifestValidationError):
        DatasetManifest([manifest.samples[0], manifest.samples[0]])


def test_sample_and_label_validation():
    with pytest.raises(ValueError):
        GestureSample("x", "d", 7, "A")
    with pytest.raises(ValueError):
        ReferentLabel(17, "a")
    with pytest.raises(ValueError):
        FormSimilarityPair("a", "a", (0, 0, 0, 0, 0))
    with pytest.raises(ValueError):
        FormSimilarityPair("a", "b", (0, 2, 0, 0, 0))
