"""CMAformer segmentation with a Lagrange-duality consistency objective for
semi-supervised training."""
from .errors import ConfigError, DataError, InfeasibleError, InputError, ShapeError, TrainingError
from .model import CMAformer, ModelConfig
from .ldc import ConstraintSet, LdcParams, consistency_loss, ldc_loss, project_kkt
from .contrast import info_nce, signed_distance_map
from .training import LossWeights, TrainConfig, Trainer, evaluate, fit

__version__ = "0.1.0"
