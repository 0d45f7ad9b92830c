"""
Pre-train, embed, resolve
=========================

A desk-sized run of the whole pipeline: pre-train a small multimodal_x
encoder on a synthetic corpus, embed the gestures without any verbal
input, then resolve referents with leave-one-round-out cross-validation.
Runs in well under a minute on a laptop CPU.
"""

import logging
import tempfile
from pathlib import Path

import numpy as np

from gesture_embed.encoder import EncoderConfig
from gesture_embed.evaluation import ResolverConfig, concat_tables, form_similarity_correlation, leave_one_round_out
from gesture_embed.pretrain import ArchitectureKind, TrainConfig, build_architecture, embed_samples, load_checkpoint, pretrain
from gesture_embed.skeleton import load_manifest
from gesture_embed.synth import SynthConfig, generate_corpus
from gesture_embed.verbal import FeatureStore, pool_utterance

logging.basicConfig(level=logging.INFO, format="%(message)s")
work = Path(tempfile.mkdtemp())
generate_corpus(SynthConfig(num_referents=5, samples_per_referent=60, fps=10, seed=0), work / "data")
manifest = load_manifest(work / "data" / "manifest.json")

# %%
# A small encoder keeps this quick; the default is 256 wide with 4 blocks.
enc = EncoderConfig(feature_width=32, blocks_per_branch=1, heads=4, max_frames=16)
kind = ArchitectureKind("multimodal_x", "semantic")
pipeline = build_architecture(kind, enc, TrainConfig(max_epochs=4, seed=0))
print("loss terms:", pipeline.loss_terms)
result = pretrain(manifest, pipeline, work / "run")
print(f"best epoch {result.best_epoch}: rho {result.best_rho:.3f} (untrained {result.epoch0_rho:.3f})")

# %%
# Gesture-only embeddings come from the skeleton encoder alone.
best, _ = load_checkpoint(result.best_checkpoint)
gesture = embed_samples(best, manifest.labeled())
rho, p = form_similarity_correlation(manifest.form_pairs, gesture)
print(f"form similarity rho={rho:.3f} p={p:.3g}")

# %%
# Reference resolution from gestures, from speech and from both.
resolver = ResolverConfig(epochs=60)
store = FeatureStore(manifest.feature_store)
semantic = {s.sample_id: pool_utterance(store.get(s.verbal_ref)) for s in manifest.labeled()}
null = best.null_vector.detach().double().numpy()
tables = {"gesture": gesture, "semantic": semantic, "concat": concat_tables(gesture, semantic, null)}
for name, table in tables.items():
    report = leave_one_round_out(manifest.labeled(), table, resolver, seed=0)
    print(f"{name:9s} {report.mean:.3f} +- {report.sd:.3f}  (chance {report.chance:.2f})")
print("per-fold gesture accuracies:", np.round(leave_one_round_out(manifest.labeled(), gesture, resolver).accuracies, 3))
