class ReachSynthError(Exception):
    """Base class for all errors raised by reachsynth."""


class DimensionError(ReachSynthError, ValueError):
    pass


class ConfigError(ReachSynthError):
    pass


class ArtifactError(ReachSynthError):
    """Corrupt artifact file or an artifact built from a different config."""


class IntegrationError(ReachSynthError):
    def __init__(self, message: str, cell: int = None, input_index: int = None):
        self.cell = cell
        self.input_index = input_index
        if cell is not None or input_index is not None:
            message = f"{message} (cell {cell}, input {input_index})"
        super().__init__(message)


class UnboundedLevelSetError(ReachSynthError):
    pass


class UncontrollableError(ReachSynthError):
    pass


class InfeasibleSpecificationError(ReachSynthError):
    pass


class LeftWinningSetError(ReachSynthError):
    def __init__(self, message: str, cell: int = None, time: float = None, trace=None):
        self.cell = cell
        self.time = time
        self.trace = trace
        super().__init__(f"left winning set: {message}")


class CertificationError(ReachSynthError):
    """No storage-function level in the searched range passes the checks."""
