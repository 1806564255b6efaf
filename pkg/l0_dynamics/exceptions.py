class L0DynamicsException(Exception):
    def __init__(self, message="L0 dynamics exception"):
        self.message = message
        super().__init__(self.message)


class GateException(L0DynamicsException):
    def __init__(self, message="Gate exception"):
        self.message = message
        super().__init__(self.message)


class InvalidNoiseException(GateException):
    def __init__(self, message="Gate noise must lie strictly inside (0, 1)"):
        self.message = message
        super().__init__(self.message)


class StaleGateCacheException(GateException):
    def __init__(self, message="Gate cache does not belong to the latest sample"):
        self.message = message
        super().__init__(self.message)


class OutOfSupportException(GateException):
    def __init__(self, value: float, low: float, high: float):
        self.message = f"Value {value} outside the open support ({low}, {high})"
        super().__init__(self.message)


class ShapeMismatchException(L0DynamicsException):
    def __init__(self, expected, actual, what: str = "array"):
        self.message = f"Shape mismatch for {what}: expected {expected}, got {actual}"
        super().__init__(self.message)


class MissingNoiseException(L0DynamicsException):
    def __init__(self, message="Gate noise is required in train mode"):
        self.message = message
        super().__init__(self.message)


class BackwardBeforeForwardException(L0DynamicsException):
    def __init__(self, message="backward called before forward"):
        self.message = message
        super().__init__(self.message)


class ModelException(L0DynamicsException):
    def __init__(self, message="Model exception"):
        self.message = message
        super().__init__(self.message)


class NoGatesException(ModelException):
    def __init__(self, message="Model has no gates"):
        self.message = message
        super().__init__(self.message)


class UnsupportedModelException(ModelException):
    def __init__(self, message="Operation not supported for this model kind"):
        self.message = message
        super().__init__(self.message)


class EnvironmentStateException(L0DynamicsException):
    def __init__(self, message="Non-finite pendulum state"):
        self.message = message
        super().__init__(self.message)


class EmptyBufferException(L0DynamicsException):
    def __init__(self, message="Replay buffer is empty"):
        self.message = message
        super().__init__(self.message)


class DataFormatException(L0DynamicsException):
    def __init__(self, message="Data format exception"):
        self.message = message
        super().__init__(self.message)


class BadMagicException(DataFormatException):
    def __init__(self, message="Bad magic"):
        self.message = message
        super().__init__(self.message)


class UnsupportedVersionException(DataFormatException):
    def __init__(self, version: int):
        self.message = f"Unsupported format version {version}"
        super().__init__(self.message)


class TruncatedFileException(DataFormatException):
    def __init__(self, message="File is truncated"):
        self.message = message
        super().__init__(self.message)


class ChecksumMismatchException(DataFormatException):
    def __init__(self, message="Checksum mismatch"):
        self.message = message
        super().__init__(self.message)


class CheckpointFormatException(DataFormatException):
    def __init__(self, message="Invalid checkpoint"):
        self.message = message
        super().__init__(self.message)


class NumericalAbortException(L0DynamicsException):
    def __init__(self, message="Numerical abort"):
        self.message = message
        super().__init__(self.message)


class NonFiniteGradientException(NumericalAbortException):
    def __init__(self, block: str):
        self.block = block
        self.message = f"Non-finite gradient in parameter block `{block}`"
        super().__init__(self.message)


class NonFiniteLossException(NumericalAbortException):
    def __init__(self, epoch: int, iteration: int, last_good: dict | None = None):
        self.last_good = last_good
        self.message = f"Non-finite loss at epoch {epoch}, iteration {iteration}"
        super().__init__(self.message)
