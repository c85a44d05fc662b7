"""Exception types shared across the package."""


class ChunkAlignError(Exception):
    """Base class for all package errors."""


class DimensionError(ChunkAlignError, ValueError):
    """Operand shapes do not conform."""


class DegenerateInputError(ChunkAlignError, ValueError):
    """Input is empty, zero-norm, or otherwise has nothing to work with."""


class OracleError(ChunkAlignError, RuntimeError):
    """The finite-difference oracle produced a non-finite value."""


class ConfigError(ChunkAlignError, ValueError):
    """A configuration value violates its invariants."""


class SpanError(ChunkAlignError, ValueError):
    """A chunk span is out of bounds or covers no content tokens."""


class ContractError(ChunkAlignError, ValueError):
    """A caller violated an ordering or structural precondition."""


class ScheduleError(ChunkAlignError, ValueError):
    """Learning-rate schedule queried outside its domain."""


class ParseError(ChunkAlignError, ValueError):
    """A line-oriented input file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class AlignmentError(ChunkAlignError, ValueError):
    """Teacher embeddings do not line up with a document's chunk spans."""

    def __init__(self, message: str, doc_id: str | None = None):
        super().__init__(f"doc {doc_id!r}: {message}" if doc_id is not None else message)
        self.doc_id = doc_id


class CheckpointError(ChunkAlignError, IOError):
    """A checkpoint file is malformed or truncated."""


class TrainingError(ChunkAlignError, RuntimeError):
    """A component failed during training; carries step and document context."""

    def __init__(self, message: str, step: int | None = None, doc_id: str | None = None):
        ctx = []
        if step is not None:
            ctx.append(f"step {step}")
        if doc_id is not None:
            ctx.append(f"doc {doc_id!r}")
        prefix = f"[{', '.join(ctx)}] " if ctx else ""
        super().__init__(prefix + message)
        self.step = step
        self.doc_id = doc_id
