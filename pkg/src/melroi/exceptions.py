"""Exception hierarchy shared by every stage of the pipeline."""


class MelroiError(Exception):
    """Base class for all errors raised by melroi."""


class InvalidSlide(MelroiError, ValueError):
    pass


class IdentityError(MelroiError, ValueError):
    """Inputs that should describe the same slide do not."""


class ParseError(MelroiError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class EmptySlideError(MelroiError, ValueError):
    pass


class InsufficientTissue(MelroiError, ValueError):
    pass


class DegenerateStains(MelroiError, ValueError):
    pass


class ConfigError(MelroiError, ValueError):
    pass


class StratificationError(MelroiError, ValueError):
    pass


class ClassCoverageError(MelroiError, ValueError):
    pass


class DivergenceError(MelroiError, ArithmeticError):
    pass


class JoinError(MelroiError, KeyError):
    pass


class ValidationError(MelroiError, ValueError):
    pass


class GenerationError(MelroiError, RuntimeError):
    pass


class MissingArtifact(MelroiError, FileNotFoundError):
    pass


class SingleClusterFallback(MelroiError):
    """Fewer points than ``min_pts``: the caller should treat all points as one cluster."""
