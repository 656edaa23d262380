"""Few-shot image classification with learned channel-wise embedding aggregation."""

from .autodiff import Graph, Tensor
from .data import Dataset, augment_rotations, load_image_dataset, resize_bilinear, split_classes, synth_dataset
from .episodes import (
    EpisodeSpec,
    EvalReport,
    TrainConfig,
    confidence_interval,
    learning_rate_at,
    meta_test,
    meta_train,
    sample_episode,
)
from .model import (
    ModelConfig,
    ModelParams,
    aggregate_kshot,
    aggregate_mean,
    aggregate_oneshot,
    attention_weights,
    classify,
    embed,
    episode_loss,
    init_params,
    sample_task_mask,
)
from .optim import AdamState, adam_step

__all__ = [
    "Graph",
    "Tensor",
    "Dataset",
    "augment_rotations",
    "load_image_dataset",
    "resize_bilinear",
    "split_classes",
    "synth_dataset",
    "EpisodeSpec",
    "EvalReport",
    "TrainConfig",
    "confidence_interval",
    "learning_rate_at",
    "meta_test",
    "meta_train",
    "sample_episode",
    "ModelConfig",
    "ModelParams",
    "aggregate_kshot",
    "aggregate_mean",
    "aggregate_oneshot",
    "attention_weights",
    "classify",
    "embed",
    "episode_loss",
    "init_params",
    "sample_task_mask",
    "AdamState",
    "adam_step",
]

__version__ = "0.1.0"
