"""Exception types shared across the package."""


class HyGDLError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HyGDLError, ValueError):
    pass


class DomainError(HyGDLError, ValueError):
    pass


class EmptyFeatureMap(HyGDLError, ValueError):
    pass


class EmptyStylePool(HyGDLError, ValueError):
    pass


class DegenerateEmbedding(HyGDLError, ValueError):
    pass


class DegenerateDirection(HyGDLError, ValueError):
    pass


class RankDeficient(HyGDLError, ValueError):
    pass


class EmptyMask(HyGDLError, ValueError):
    pass


class NonFiniteLoss(HyGDLError, FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


class VersionMismatch(HyGDLError):
    pass


class CorruptCheckpoint(HyGDLError):
    pass


class DegenerateLabels(HyGDLError, ValueError):
    pass


class TooFewPoints(HyGDLError, ValueError):
    pass


class UnknownCommand(HyGDLError):
    pass


class ConfigParseError(HyGDLError, ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if field is not None:
            where.append(f"field={field}")
        if line is not None:
            where.append(f"line={line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.line = line


class MissingInput(HyGDLError, FileNotFoundError):
    pass
