"""Noise-resistant multimodal transformer for emotion recognition, at toy scale."""
from .data import (
    Dataset,
    DatasetManifest,
    GeneratorConfig,
    MultimodalSample,
    generate_dataset,
    load_dataset,
    save_dataset,
    unify_lengths,
)
from .model import ModelConfig, NormTR, load_checkpoint, save_checkpoint
from .noise import MaskSpec, apply_mask, eval_mask, sample_type1, sample_type2
from .training import TrainConfig, fit, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DatasetManifest", "GeneratorConfig", "MultimodalSample",
    "generate_dataset", "load_dataset", "save_dataset", "unify_lengths",
    "ModelConfig", "NormTR", "load_checkpoint", "save_checkpoint",
    "MaskSpec", "apply_mask", "eval_mask", "sample_type1", "sample_type2",
    "TrainConfig", "fit", "lr_schedule",
]
