"""Difficulty-aware meta-learning for few-shot binary classification.

Modules:
    autodiff    reverse-mode differentiation over numpy tensors
    nn          conv4 / MLP models, ParamSet, checkpoint container
    episodes    datasets, synthetic pools, augmentation, episode sampler
    metaloss    task loss, inner adaptation, difficulty-aware meta loss, meta update
    trainer     the meta-training loop
    evaluation  AUC, meta-test protocol, fine-tuning and KNN baselines
    cli         the ``metafit`` command
"""

from .autodiff import Tensor, backward, gradcheck, no_grad
from .episodes import AugmentPolicy, Dataset, Episode, load_directory, sample_episode, synth_pools
from .errors import ConfigError, DataError, DomainError, MetafitError, NumericError, ShapeError, UsageError
from .evaluation import EvalReport, auc, finetune_baseline, knn_feature_baseline, meta_test
from .metaloss import MetaConfig, cross_entropy, da_meta_loss, da_task_loss, inner_adapt, meta_update
from .nn import ArchSpec, ParamSet, forward, init_params
from .trainer import TrainSchedule, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "AugmentPolicy",
    "ConfigError",
    "DataError",
    "Dataset",
    "DomainError",
    "Episode",
    "EvalReport",
    "MetaConfig",
    "MetafitError",
    "NumericError",
    "ParamSet",
    "ShapeError",
    "Tensor",
    "TrainSchedule",
    "UsageError",
    "auc",
    "backward",
    "cross_entropy",
    "da_meta_loss",
    "da_task_loss",
    "finetune_baseline",
    "forward",
    "gradcheck",
    "init_params",
    "inner_adapt",
    "knn_feature_baseline",
    "load_directory",
    "lr_at",
    "meta_test",
    "meta_update",
    "no_grad",
    "sample_episode",
    "synth_pools",
    "train",
]
