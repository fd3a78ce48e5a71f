"""Exception hierarchy shared by all readlab modules."""


class ReadLabError(Exception):
    """Base class for all errors raised by this package."""


class CorpusError(ReadLabError):
    """Malformed input data, unknown labels, or infeasible splits."""


class GeneratorError(ReadLabError):
    """Invalid inputs to the token generator (bad ids, NaN rewards, ...)."""


class RewardError(ReadLabError):
    """Invalid inputs to the reward net or degenerate importance weights."""


class ClassifierError(ReadLabError):
    """Invalid inputs to the encoder/classifier or non-finite losses."""


class ConfigError(ReadLabError):
    """Bad configuration file or command-line arguments."""


class TrainingAbort(ReadLabError):
    """Raised when a run must stop (non-finite loss, corrupt state)."""


class CheckpointError(ReadLabError):
    """Missing or inconsistent checkpoint data."""
