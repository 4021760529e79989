"""Exception types shared across the package.

Every error raised deliberately by umgad derives from UmgadError so the CLI
can map them onto exit codes (usage=1, data=2, numerical=3).
"""


class UmgadError(Exception):
    """Base class for all umgad errors."""


# --- data / input errors -------------------------------------------------

class MissingFile(UmgadError):
    pass


class ParseError(UmgadError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class IndexOutOfRange(UmgadError):
    pass


class InconsistentNodeCount(UmgadError):
    pass


class EmptyRelation(UmgadError):
    pass


class InsufficientNodes(UmgadError):
    pass


class LengthMismatch(UmgadError):
    pass


class SingleClass(UmgadError):
    pass


class IoError(UmgadError):
    pass


class VersionMismatch(UmgadError):
    pass


class UntrainedParams(UmgadError):
    pass


# --- usage / configuration errors ----------------------------------------

class ConfigError(UmgadError):
    pass


class ConflictingSelectors(UmgadError):
    pass


class EmptyList(UmgadError):
    pass


# --- numerical errors -----------------------------------------------------

class ShapeMismatch(UmgadError):
    pass


class NumericalError(UmgadError):
    pass


class DegenerateRow(UmgadError):
    pass


class GraphConsumed(UmgadError):
    pass


DATA_ERRORS = (
    MissingFile, ParseError, IndexOutOfRange, InconsistentNodeCount,
    EmptyRelation, InsufficientNodes, LengthMismatch, SingleClass,
    IoError, VersionMismatch, UntrainedParams,
)

USAGE_ERRORS = (ConfigError, ConflictingSelectors, EmptyList)

NUMERICAL_ERRORS = (ShapeMismatch, NumericalError, DegenerateRow, GraphConsumed)
