"""Multi-grained audio-text contrastive learning on a synthetic toy corpus."""

from .codebook import Codebook, aggregate, aggregate_variant, mean_pool_aggregate
from .data import Corpus, gen_corpus, read_corpus, write_corpus
from .losses import LossConfig, clap_loss, hn_clap_loss
from .model import Model, ModelConfig
from .numerics import sparsemax
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Codebook", "Corpus", "LossConfig", "Model", "ModelConfig", "TrainConfig",
    "aggregate", "aggregate_variant", "clap_loss", "gen_corpus", "hn_clap_loss",
    "load_checkpoint", "mean_pool_aggregate", "read_corpus", "save_checkpoint",
    "sparsemax", "train", "write_corpus",
]
