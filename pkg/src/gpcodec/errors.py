"""Exception hierarchy shared by every module.

``ValidationError`` subclasses signal bad caller input (CLI exit code 2);
``DataError`` subclasses signal bad data or streams (CLI exit code 3).
"""


class GpcError(Exception):
    pass


class ValidationError(GpcError):
    pass


class DataError(GpcError):
    pass


class EmptyCloud(ValidationError):
    pass


class InvalidPoint(ValidationError):
    pass


class HierarchyMismatch(DataError):
    pass


class EmptyCode(DataError):
    pass


class ConfigMismatch(ValidationError):
    pass


class InvalidContext(ValidationError):
    pass


class DivergedTraining(DataError):
    pass


class CorruptStream(DataError):
    pass


class WrongModel(DataError):
    pass


class ParseError(DataError):
    pass


class MissingPositions(DataError):
    pass


class EmptyCounts(ValidationError):
    pass


class BinMismatch(ValidationError):
    pass
