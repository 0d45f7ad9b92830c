import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gesture_embed.skeleton import IntegrityError
from gesture_embed.verbal import (
    EmptyUtteranceError,
    FeatureStore,
    LayerAggregator,
    UtteranceFeatures,
    aggregate_speech_layers,
    load_features,
    pool_utterance,
)


def test_empty_entry_roundtrip(tmp_path):
    store = FeatureStore(tmp_path)
    store.put("e", UtteranceFeatures("semantic", np.zeros((0, 768))))
    store.flush()
    got = load_features(tmp_path, "e")
    assert got.tokens.shape == (0, 768) and got.num_tokens == 0


def test_semantic_shape_passthrough(tmp_path):
    store = FeatureStore(tmp_path)
    store.put("k", UtteranceFeatures("semantic", np.ones((7, 768)), window=(1.0, 3.0)))
    store.flush()
    got = FeatureStore(tmp_path).get("k")
    assert got.tokens.shape == (7, 768)
    assert got.modality == "semantic" and got.window == (1.0, 3.0)


def test_speech_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(12, 1024)).astype("<f4")
    layers = rng.normal(size=(3, 12, 1024)).astype("<f4")
    store = FeatureStore(tmp_path)
    store.put("s", UtteranceFeatures("speech", tokens, (0.0, 2.0), layers))
    store.flush()
    got = FeatureStore(tmp_path).get("s")
    assert got.tokens.astype("<f4").tobytes() == tokens.tobytes()
    assert got.layerwise.astype("<f4").tobytes() == layers.tobytes()


def test_missing_key_and_shape_mismatch(tmp_path):
    store = FeatureStore(tmp_path)
    store.put("k", UtteranceFeatures("semantic", np.ones((2, 768))))
    store.flush()
    with pytest.raises(KeyError):
        store.get("absent")
    index = json.loads((tmp_path / "index.json").read_text())
    index["k"]["shape"] = [3, 768]
    (tmp_path / "index.json").write_text(json.dumps(index))
    with pytest.raises(IntegrityError):
        FeatureStore(tmp_path).get("k")


def test_features_validation():
    with pytest.raises(ValueError):
        UtteranceFeatures("video", np.ones((1, 4)))
    with pytest.raises(ValueError):
        UtteranceFeatures("semantic", np.ones((1, 4)), layerwise=np.ones((2, 1, 4)))
    with pytest.raises(ValueError):
        UtteranceFeatures("speech", np.ones((2, 4)), layerwise=np.ones((2, 3, 4)))


# -- pooling -------------------------------------------------------------------


def test_pool_single_token_and_symmetry():
    v = np.arange(768.0)
    assert np.array_equal(pool_utterance(UtteranceFeatures("semantic", v[None])), v)
    assert np.allclose(pool_utterance(UtteranceFeatures("semantic", np.stack([v, -v]))), 0.0)


def test_pool_random_against_summation():
    x = np.random.default_rng(1).normal(size=(5, 768))
    expected = np.array([sum(x[i, j] for i in range(5)) / 5 for j in range(768)])
    np.testing.assert_allclose(pool_utterance(UtteranceFeatures("semantic", x)), expected, atol=1e-12)


def test_pool_empty_signals():
    with pytest.raises(EmptyUtteranceError):
        pool_utterance(UtteranceFeatures("semantic", np.zeros((0, 768))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_pool_duplicate_invariant(seed, n):
    a = np.random.default_rng(seed).normal(size=(n, 16))
    once = pool_utterance(UtteranceFeatures("semantic", a))
    twice = pool_utterance(UtteranceFeatures("semantic", np.concatenate([a, a])))
    np.testing.assert_allclose(once, twice, atol=1e-12)


# -- layer aggregation -----------------------------------------------------------------


def test_single_layer_identity():
    agg = LayerAggregator(1, 16).double()
    x = torch.randn(1, 5, 16, dtype=torch.float64)
    with torch.no_grad():
        torch.testing.assert_close(aggregate_speech_layers(x, agg), x[0])


def test_equal_weights_give_mean():
    agg = LayerAggregator(4, 16).double()
    x = torch.randn(4, 3, 16, dtype=torch.float64)
    with torch.no_grad():
        torch.testing.assert_close(aggregate_speech_layers(x, agg), x.mean(0))


def test_layer_count_mismatch():
    with pytest.raises(ValueError):
        aggregate_speech_layers(torch.randn(3, 2, 16), LayerAggregator(4, 16))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_layer_permutation_invariant(seed, n_layers):
    torch.manual_seed(seed)
    agg = LayerAggregator(n_layers, 8).double()
    with torch.no_grad():
        agg.layer_logits.normal_()
    x = torch.randn(n_layers, 3, 8, dtype=torch.float64)
    perm = torch.randperm(n_layers)
    permuted = LayerAggregator(n_layers, 8).double()
    permuted.load_state_dict(agg.state_dict())
    with torch.no_grad():
        permuted.layer_logits.copy_(agg.layer_logits[perm])
        torch.testing.assert_close(permuted(x[perm]), agg(x))


def test_weights_stay_normalized_through_training():
    torch.manual_seed(0)
    agg = LayerAggregator(5, 8)
    opt = torch.optim.Adam(agg.parameters(), lr=0.1)
    x = torch.randn(2, 5, 3, 8)
    target = torch.randn(2, 3, 8)
    for _ in range(20):
        loss = ((agg(x) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        w = agg.layer_weights.detach()
        assert abs(float(w.sum()) - 1.0) < 1e-6
        assert bool(((w > 0) & (w < 1)).all())
