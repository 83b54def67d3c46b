"""Token-sparse dual-attention classifier for multi-channel time series."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DimensionError, MetricError,
                     NumericError, SparseformerError)
from .data import (ClassDef, DatasetBundle, SignalComponent, SynthSpec,
                   generate_synthetic, load_bundle, save_bundle)
from .encoder import AttentionConfig, EncoderConfig, GranularitySpec, \
    SparseformerModel
from .estimator import SparseformerClassifier
from .training import (LabelConfig, SparseformerSystem, TrainConfig,
                       evaluate_split, fewshot_adapt, train_multisource,
                       train_supervised, zeroshot_eval)

__all__ = [
    "AttentionConfig", "ClassDef", "ConfigError", "DataError",
    "DatasetBundle", "DimensionError", "EncoderConfig", "GranularitySpec",
    "LabelConfig", "MetricError", "NumericError", "SignalComponent",
    "SparseformerClassifier", "SparseformerError", "SparseformerModel",
    "SparseformerSystem", "SynthSpec", "TrainConfig", "evaluate_split",
    "fewshot_adapt", "generate_synthetic", "load_bundle", "save_bundle",
    "train_multisource", "train_supervised", "zeroshot_eval",
    "__version__",
]
