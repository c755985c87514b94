"""Backdoor trigger synthesis and prompt-tuned backdoor-image detection
over a frozen dual-encoder joint embedding space."""

from .cachefile import EmbeddingCache, export_embeddings, import_embeddings
from .data import (
    Dataset,
    LooPlan,
    Sample,
    build_loo_test_set,
    build_loo_training_set,
    generate_synthetic_dataset,
    load_cifar10_binary,
    load_image_directory,
)
from .detector import (
    Detector,
    build_detector,
    evaluate,
    predict,
    run_crossgen,
    run_loo_experiment,
    run_static_prefix_ablation,
)
from .encoders import EncoderConfig, build_import_encoders, build_toy_encoders
from .triggers import KINDS, TriggerSpec, apply_trigger, poison_dataset, realize_trigger
from .tsne import TsneConfig, pairwise_affinities, project
from .tuner import PrefixState, TrainConfig, fit, init_prefix, load_prefix, save_prefix

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Detector",
    "EmbeddingCache",
    "EncoderConfig",
    "KINDS",
    "LooPlan",
    "PrefixState",
    "Sample",
    "TrainConfig",
    "TriggerSpec",
    "TsneConfig",
    "apply_trigger",
    "build_detector",
    "build_import_encoders",
    "build_loo_test_set",
    "build_loo_training_set",
    "build_toy_encoders",
    "evaluate",
    "export_embeddings",
    "fit",
    "generate_synthetic_dataset",
    "import_embeddings",
    "init_prefix",
    "load_cifar10_binary",
    "load_image_directory",
    "load_prefix",
    "pairwise_affinities",
    "poison_dataset",
    "predict",
    "project",
    "realize_trigger",
    "run_crossgen",
    "run_loo_experiment",
    "run_static_prefix_ablation",
    "save_prefix",
]
