"""Self-supervised skeletal gesture embeddings and referential evaluation."""
from .encoder import EncoderConfig, SkeletonEncoder, encode
from .evaluation import (
    ResolverConfig,
    dialogue_history_experiment,
    form_similarity_correlation,
    leave_one_round_out,
    noise_robustness,
    spearman,
    train_resolver,
    ttest_independent,
)
from .losses import clip_loss, crossmodal_loss, ntxent, reconstruction_loss
from .pretrain import ArchitectureKind, TrainConfig, build_architecture, pretrain
from .skeleton import DatasetManifest, GestureSample, SkeletonSequence, load_manifest
from .synth import SynthConfig, generate_corpus, oracle_accuracy_bounds

__version__ = "0.1.0"
