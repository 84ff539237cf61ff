"""Learned pose-error distributions for odometry correction and uncertainty calibration."""

from .errors import (
    AlignmentError,
    BranchCutError,
    DataError,
    DecompositionError,
    DivergenceError,
    IllConditionedError,
    InsufficientDataError,
    NumericalError,
    ParseError,
    PosecalError,
    ShapeError,
    ValidationError,
)
from .gaussian import ErrorGaussian
from .seqmodel import ErrorModel, ModelConfig, SensorWindow
from .synth import NoiseEvent, NoiseSchedule, SimConfig, SimulatedDataset, Trajectory
from .train import TrainConfig, fit

__version__ = "0.1.0"
