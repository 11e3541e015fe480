"""Exception types shared across the package."""


class MVSError(Exception):
    """Base class for all package errors."""


class PointBehindCamera(MVSError):
    pass


class DegenerateConfiguration(MVSError):
    pass


class ShapeMismatch(MVSError):
    pass


class NonFiniteValue(MVSError):
    pass


class GraphCycle(MVSError):
    """Kept for API completeness; the autograd tape is acyclic, so nothing raises it."""


class EmptyMask(MVSError):
    pass


class NonFiniteLoss(MVSError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class CoverageTooLow(MVSError):
    pass


class EmptyCloud(MVSError):
    pass


class MalformedCameraFile(MVSError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MalformedHeader(MVSError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"byte {offset}: {message}"
        super().__init__(message)
        self.offset = offset


class ConfigError(MVSError):
    pass
