"""Multi-target domain adaptation for semantic segmentation via collaborative experts and an online-distilled student."""
from .core import IGNORE, ConfigError, DomainSplit, MultiDomainDataset, NumericalError, batch_iterator
from .losses import LossWeights
from .metrics import ConfusionMatrix, accumulate, miou
from .styletransfer import StyleStats, compute_style, translate
from .synthdata import BenchmarkSpec, generate_benchmark
from .trainer import MODES, TrainConfig, evaluate, train

__all__ = [
    "IGNORE", "ConfigError", "DomainSplit", "MultiDomainDataset", "NumericalError", "batch_iterator",
    "LossWeights", "ConfusionMatrix", "accumulate", "miou", "StyleStats", "compute_style", "translate",
    "BenchmarkSpec", "generate_benchmark", "MODES", "TrainConfig", "evaluate", "train",
]
