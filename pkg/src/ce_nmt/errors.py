"""Shared exception types. Each maps to one error surface of the package."""


class CENMTError(Exception):
    """Base class for all package errors."""


class NumericError(CENMTError):
    """Non-finite values or invalid numeric state."""


class ShapeError(CENMTError):
    """Incompatible tensor shapes; message reports both shapes."""


class BatchTooSmallError(CENMTError):
    """Batch statistics require at least two rows."""


class DegenerateInputError(CENMTError):
    """Input with no usable content (fully masked row, all targets padded)."""


class ConfigError(CENMTError):
    """Invalid configuration or configuration/shape mismatch."""


class CorpusFormatError(CENMTError):
    """Malformed corpus input; carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmbeddingFormatError(CorpusFormatError):
    """Malformed pre-trained embedding file."""


class ProtocolError(CENMTError):
    """Evaluation protocol precondition violated."""


class CollapseError(CENMTError):
    """Embedding collapse detected during training; carries the report."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"embedding collapse detected: {report}")


class DivergenceError(CENMTError):
    """Training loss became non-finite; carries the diagnostic checkpoint path."""

    def __init__(self, message: str, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)
