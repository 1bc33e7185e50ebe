"""AUM- and saliency-guided mixup for calibrated text classification.

The package is organised by pipeline stage: ``numerics`` (gradient tape),
``model`` (hashing bag-of-tokens classifier), ``dynamics`` (margins, AUM),
``saliency``, ``mixup`` (strategies and trainers), ``calibration`` (ECE,
label smoothing, temperature scaling), ``data`` and the ``pipeline`` / ``cli``
orchestration.
"""

from .calibration import (
    CalibrationReport,
    PredictionSet,
    apply_temperature,
    ece,
    fit_temperature,
    smooth_targets,
)
from .config import RunConfig
from .data import DatasetBundle, Sample, load_jsonl, split, synth_task
from .dynamics import Categorization, MarginLedger, categorize, margin
from .errors import (
    AumixError,
    CheckpointError,
    ConfigError,
    InvalidInputError,
    ManifestError,
    StateError,
)
from .mixup import Ablation, MixupConfig, Strategy, fit, interpolate, sample_lambda
from .model import Classifier, ModelConfig, load_checkpoint, save_checkpoint
from .saliency import SaliencyMap, cosine_similarity, saliency_map, select_pair
from .training import TrainConfig, TrainingData

__version__ = "0.1.0"


__all__ = [
    "Ablation",
    "AumixError",
    "CalibrationReport",
    "Categorization",
    "CheckpointError",
    "Classifier",
    "ConfigError",
    "DatasetBundle",
    "InvalidInputError",
    "ManifestError",
    "MarginLedger",
    "MixupConfig",
    "ModelConfig",
    "PredictionSet",
    "RunConfig",
    "SaliencyMap",
    "Sample",
    "StateError",
    "Strategy",
    "TrainConfig",
    "TrainingData",
    "apply_temperature",
    "categorize",
    "cosine_similarity",
    "ece",
    "fit",
    "fit_temperature",
    "interpolate",
    "load_checkpoint",
    "load_jsonl",
    "margin",
    "saliency_map",
    "sample_lambda",
    "save_checkpoint",
    "select_pair",
    "smooth_targets",
    "split",
    "synth_task",
]
