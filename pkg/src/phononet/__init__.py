"""Differentiable mass-spring lattice classifiers: simulation, adjoint gradients, surrogates and reduction."""

__version__ = "0.1.0"

from .adjoint import GradientVector, adjoint_backward, forward_pass, gradcheck, loss_and_gradient
from .audio import AudioSample, DatasetManifest, PreparedSplit, SpeechPipeline, load_wav, synth_dataset
from .errors import (
    BandIsolationError,
    BlowupError,
    ConfigError,
    ContractError,
    DegeneracyError,
    DomainError,
    InsufficientDataError,
    MissingInputError,
    ParameterError,
    PhononetError,
    SingularityError,
    TrainingFailure,
    UnsupportedEncodingError,
    WavFormatError,
)
from .model import EffectiveModel, Geometry, PhysicsConfig, State, oracle_effective_model, oracle_jacobian, random_geometry
from .nonlinear import DeepConfig, DeepNetwork, NonlinearElement, deep_forward, train_deep
from .simulator import DEFAULT_DT, SimConfig, Trajectory, energies, simulate, transfer_function
from .surrogate import SurrogateModel
from .training import TrainConfig, TrainReport, evaluate, fit_threshold, train_single_layer

__all__ = [
    "DEFAULT_DT",
    "AudioSample",
    "BandIsolationError",
    "BlowupError",
    "ConfigError",
    "ContractError",
    "DatasetManifest",
    "DeepConfig",
    "DeepNetwork",
    "DegeneracyError",
    "DomainError",
    "EffectiveModel",
    "Geometry",
    "GradientVector",
    "InsufficientDataError",
    "MissingInputError",
    "NonlinearElement",
    "ParameterError",
    "PhononetError",
    "PhysicsConfig",
    "PreparedSplit",
    "SimConfig",
    "SingularityError",
    "SpeechPipeline",
    "State",
    "SurrogateModel",
    "TrainConfig",
    "TrainReport",
    "Trajectory",
    "TrainingFailure",
    "UnsupportedEncodingError",
    "WavFormatError",
    "adjoint_backward",
    "deep_forward",
    "energies",
    "evaluate",
    "fit_threshold",
    "forward_pass",
    "gradcheck",
    "load_wav",
    "loss_and_gradient",
    "oracle_effective_model",
    "oracle_jacobian",
    "random_geometry",
    "simulate",
    "synth_dataset",
    "train_deep",
    "train_single_layer",
    "transfer_function",
]
