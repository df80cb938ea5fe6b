"""Exception hierarchy shared across the package."""


class VerError(Exception):
    """Base class for all package errors."""


class NotFoundError(VerError):
    """An entity (system name, template, record) does not exist."""


class InvalidArgumentError(VerError):
    """An argument violates a documented precondition."""


class DivergedError(VerError):
    """State norm exceeded the overflow guard during integration."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class UnstableError(VerError):
    """Requested time step violates the explicit-stepping stability bound."""


class OutOfFrameError(VerError):
    """Trajectory states fall outside the rendering world bounds."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)


class ParseError(VerError):
    """Term text does not match the grammar."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class EvalError(VerError):
    """Library evaluation produced a non-finite value."""

    def __init__(self, message, row=None, term=None):
        super().__init__(message)
        self.row = row
        self.term = term


class SingularDesignError(VerError):
    """The reduced least-squares system is singular."""

    def __init__(self, message, terms=()):
        super().__init__(message)
        self.terms = tuple(terms)


class DegenerateTargetError(VerError):
    """R-squared target has zero total variance."""


class DetectionFailedError(VerError):
    """Too many frames yielded no detection."""


class DivergedTrainingError(VerError):
    """Joint training hit NaN; carries the last stable parameter snapshot."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DiscoveryFailedError(VerError):
    """Every discovery iteration failed to produce an assessable library."""


class TransportError(VerError):
    """HTTP or authentication failure while talking to the chat service."""


class ConfigError(VerError):
    """Missing or inconsistent configuration."""


class ReplayMismatchError(VerError):
    """Replayed request digest does not match the recorded transcript."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ExtractError(VerError):
    """Unbalanced delimiters in advisor output."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class TemplateError(VerError):
    """Prompt template missing or placeholder unbound."""

    def __init__(self, message, placeholder=None):
        super().__init__(message)
        self.placeholder = placeholder


class TrainingStalledWarning(UserWarning):
    """Training loss failed to decrease over the probe window."""
