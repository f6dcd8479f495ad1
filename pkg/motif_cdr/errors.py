from typing import Optional


class MotifCDRError(Exception):
    """Base class for all errors raised by motif-cdr."""


class ParseError(MotifCDRError, ValueError):
    def __init__(self, message: str, path: Optional[str] = None, line_no: Optional[int] = None):
        self.path = path
        self.line_no = line_no
        location = ""
        if path is not None:
            location = f"{path}:{line_no}: " if line_no is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class NodeLookupError(MotifCDRError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the message readable
        return str(self.args[0]) if self.args else ""


class ValidationError(MotifCDRError, ValueError):
    pass


class SamplingError(MotifCDRError, RuntimeError):
    pass


class NumericalError(MotifCDRError, ArithmeticError):
    pass


class DimensionError(MotifCDRError, ValueError):
    pass


class RoutingError(MotifCDRError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SimilarityError(MotifCDRError, ValueError):
    pass


class ConfigError(MotifCDRError, ValueError):
    pass


class StageError(MotifCDRError, RuntimeError):
    """Raised when a pipeline stage fails; `stage` names it for diagnostics."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class TrainingDiverged(StageError):
    """A loss or parameter went non-finite; `last_good` is the last finite checkpoint."""

    def __init__(self, stage: str, message: str, last_good=None):
        super().__init__(stage, message)
        self.last_good = last_good
