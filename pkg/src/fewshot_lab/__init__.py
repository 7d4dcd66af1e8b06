"""Few-shot image classification lab: episodic graph message passing over
learned CNN embeddings, built on a from-scratch autodiff tensor engine."""

from .autograd import Adam, Parameter, SGD, Tensor, backward, grad_check, no_grad
from .backbones import BackboneConfig, EmbeddingBatch, build_backbone
from .errors import (
    ConfigError,
    ContractError,
    DataIntegrityError,
    DegenerateBatchError,
    DimensionError,
    FewshotError,
    NonFiniteError,
)
from .fewshot_graph import Episode, FewshotClassifier, GnnClassifier, episode_loss
from .harness import TrainConfig, evaluate_checkpoint, load_config, train
from .omniglot import EpisodeSpec, ingest, preprocess, sample_episode, split_classes

__version__ = "0.1.0"
