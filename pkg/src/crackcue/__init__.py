"""Crack segmentation guided by a background-subtraction crack cue."""

__version__ = "0.1.0"

from .cuegen import coarse_background, coarse_cue, cue_guided_input, fine_cue
from .errors import (ConfigError, CrackCueError, FormatError, ParameterError, RangeError,
                     ShapeError, TrainingDiverged)
from .metrics import evaluate
from .networks import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, desk_config, infer, paper_config, train

__all__ = [
    "Checkpoint", "ConfigError", "CrackCueError", "FormatError", "ParameterError", "RangeError",
    "ShapeError", "TrainConfig", "TrainingDiverged", "coarse_background", "coarse_cue",
    "cue_guided_input", "desk_config", "evaluate", "fine_cue", "infer", "load_checkpoint",
    "paper_config", "save_checkpoint", "train",
]
