"""Multi-head class-incremental learning with out-of-distribution replay."""
from .distance import CoefficientConfig, TaskStats
from .evaluator import AccuracyMatrix, PredictionRecord
from .hatnet import AdapterModel, MaskConfig
from .memory import ReplayMemory
from .trainer import TaskDataset, TrainConfig

__version__ = "0.1.0"
