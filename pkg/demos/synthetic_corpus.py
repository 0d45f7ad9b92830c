"""
A synthetic referential-gesture corpus
======================================

Generate a small corpus with planted referent structure, look at a few
rendered gestures and compare the oracle ceilings with chance.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from gesture_embed.skeleton import load_manifest, normalize_skeleton
from gesture_embed.synth import SynthConfig, generate_corpus, oracle_accuracy_bounds
from gesture_embed.verbal import FeatureStore, pool_utterance

out = Path(tempfile.mkdtemp()) / "corpus"
config = SynthConfig(num_referents=4, samples_per_referent=24, fps=10, seed=1)
corpus = generate_corpus(config, out)
manifest = load_manifest(out / "manifest.json")
print(len(manifest.samples), "samples,", len(manifest.form_pairs), "form pairs")

# %%
# Each referent has a handshape and a wrist trajectory. Plot the right
# wrist path (joint 6) of the first three samples of every referent.
fig, axes = plt.subplots(1, config.num_referents, figsize=(3 * config.num_referents, 3))
for k, ax in enumerate(axes):
    ids = [s for s in manifest.samples if s.referent.class_index == k][:3]
    for s in ids:
        xy = normalize_skeleton(s.skeleton).coords
        ax.plot(xy[:, 6, 0], -xy[:, 6, 1], marker=".")
    ax.set_title(f"referent {k}")
fig.tight_layout()
fig.savefig(out / "wrists.png")
print("wrote", out / "wrists.png")

# %%
# The utterance carries the referent's code with probability p_s.
store = FeatureStore(out / "features_semantic")
pooled = np.stack([pool_utterance(store.get(s.verbal_ref)) for s in manifest.samples])
print("pooled semantic vectors:", pooled.shape)
print("informative share:", np.mean(list(corpus.informative.values())).round(3), "target", config.p_s)

# %%
# Ceilings: nearest-centroid on noiseless prototype renderings, and
# mixture arithmetic for the semantic side.
gesture, semantic = oracle_accuracy_bounds(config)
print(f"gesture ceiling {gesture:.3f}  semantic ceiling {semantic:.3f}  chance {1 / config.num_referents:.3f}")
