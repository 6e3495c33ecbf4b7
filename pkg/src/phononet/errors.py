"""Exception hierarchy shared by all modules."""


class PhononetError(Exception):
    """Base class for every error raised by this package."""


class ContractError(PhononetError, ValueError):
    """A precondition on shapes, indices or call ordering was violated."""


class ParameterError(PhononetError, ValueError):
    """A numeric parameter lies outside its admissible range."""


class DomainError(PhononetError, ValueError):
    """Input values outside the mathematical domain of an operation."""


class BlowupError(PhononetError, ArithmeticError):
    """Non-finite values appeared during time integration."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SingularityError(PhononetError, ArithmeticError):
    """A linear system that must be solved is singular."""


class DegeneracyError(PhononetError, ArithmeticError):
    """A predicted matrix lost a required definiteness property."""


class InsufficientDataError(PhononetError, ValueError):
    """Too few samples to determine a least-squares fit."""


class BandIsolationError(PhononetError, ValueError):
    """The requested frequency band is not separated from its neighbours."""


class WavFormatError(PhononetError, ValueError):
    """Malformed RIFF/WAVE header."""


class UnsupportedEncodingError(PhononetError, ValueError):
    """WAVE encoding outside the supported PCM/float set."""


class TrainingFailure(PhononetError, RuntimeError):
    """Every restart of an optimisation run diverged."""


class ConfigError(PhononetError, ValueError):
    """Invalid or unknown configuration keys or values."""


class MissingInputError(PhononetError, FileNotFoundError):
    """A declared input artifact does not exist."""
