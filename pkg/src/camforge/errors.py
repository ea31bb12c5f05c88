class CamforgeError(Exception):
    """Base class for all package errors."""


class DimensionError(CamforgeError, ValueError):
    pass


class GeometryError(CamforgeError, ValueError):
    pass


class ModelValidationError(CamforgeError, ValueError):
    def __init__(self, layer_index, expected, actual, message=""):
        self.layer_index = layer_index
        self.expected = expected
        self.actual = actual
        detail = f": {message}" if message else ""
        super().__init__(
            f"layer {layer_index}: expected {expected}, got {actual}{detail}")


class CheckpointError(CamforgeError):
    pass


class UnsupportedLayerError(CheckpointError):
    pass


class StaleCacheError(CamforgeError):
    pass


class HeadKindError(CamforgeError, ValueError):
    pass


class SurgeryError(CamforgeError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"model is not compatible with head surgery: {report.reason}")


class DivergenceError(CamforgeError, ArithmeticError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


class NumericError(CamforgeError, ArithmeticError):
    pass
