"""Exception taxonomy shared across the package."""


class ParlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ParlError):
    """Invalid configuration value, unknown key, or unregistered identifier."""


class RenderError(ParlError):
    """A map references a class the style cannot render."""


class FittingError(ParlError):
    """A statistical fit was asked for on unusable data."""


class TrainingError(ParlError):
    """Policy training received an empty or unusable dataset."""


class EvaluationError(ParlError):
    """Evaluation received an empty testset."""


class DegenerateInputError(ParlError):
    """An input lacks the structure an operation requires (e.g. no road)."""


class DecodeError(ParlError):
    """Bytes could not be decoded into a valid wire object."""


class ProtocolError(ParlError):
    """A round could not proceed (e.g. zero uploads by the deadline)."""
