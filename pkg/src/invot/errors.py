"""Exception hierarchy shared across the package."""


class InvOTError(Exception):
    """Base class for all package errors."""


class ShapeError(InvOTError, ValueError):
    pass


class DomainError(InvOTError, ValueError):
    pass


class DegenerateLatent(InvOTError, ValueError):
    """A latent block is identically zero, so it cannot be normalized."""


class NotConverged(InvOTError, RuntimeError):
    """Sinkhorn hit its iteration budget before meeting the tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class UnreachablePair(InvOTError, ValueError):
    def __init__(self, source, target):
        super().__init__(f"vertex {target} is unreachable from vertex {source}")
        self.source = source
        self.target = target


class InitializationError(InvOTError, RuntimeError):
    pass


class EmptyChain(InvOTError, ValueError):
    pass


class DegenerateObservation(InvOTError, ValueError):
    pass


class IngestError(InvOTError, ValueError):
    pass


class VersionError(InvOTError, ValueError):
    pass


class CorruptFile(InvOTError, ValueError):
    pass
