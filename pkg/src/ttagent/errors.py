class TTAgentError(Exception):
    """Base class for all package errors."""


class InvalidStateError(TTAgentError, ValueError):
    pass


class PreconditionError(TTAgentError, ValueError):
    pass


class NotClassifiableError(TTAgentError):
    pass


class FitFailedError(TTAgentError):
    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class SamplingExhaustedError(TTAgentError):
    pass


class UnknownRecordError(TTAgentError, KeyError):
    pass


class DivergenceError(TTAgentError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class EmptyTableError(TTAgentError):
    pass


class MatchOverError(TTAgentError):
    pass


class MissingArtifactError(TTAgentError):
    pass
