"""Exception hierarchy shared by every qpsnn module."""


class QPSNNError(Exception):
    """Base class for all errors raised by qpsnn."""


class InvalidArgumentError(QPSNNError, ValueError):
    pass


class DegenerateInputError(QPSNNError, ValueError):
    """Input is well-formed but the requested quantity is undefined for it."""


class UnsupportedLayerError(QPSNNError, TypeError):
    pass


class InvalidStateError(QPSNNError, RuntimeError):
    pass


class TrainingFailure(QPSNNError, RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(QPSNNError, ValueError):
    def __init__(self, message, offset=None):
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")
        self.offset = offset


class ConfigError(QPSNNError, ValueError):
    pass


class StageError(QPSNNError, RuntimeError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
