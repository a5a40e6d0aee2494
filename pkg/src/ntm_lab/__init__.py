"""Neural Turing Machine laboratory."""

from .autodiff import Parameter, Tape, Tensor, backward
from .ntm import NTM, HeadParams, InitScheme, NtmConfig, NtmState
from .controllers import LstmBaseline
from .tasks import Episode, TaskConfig
from .training import CurvePoint, TrainConfig, Trainer, evaluate, train

__all__ = [
    "Parameter", "Tape", "Tensor", "backward",
    "NTM", "HeadParams", "InitScheme", "NtmConfig", "NtmState", "LstmBaseline",
    "Episode", "TaskConfig",
    "CurvePoint", "TrainConfig", "Trainer", "evaluate", "train",
]

__version__ = "0.1.0"
