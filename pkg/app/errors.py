"""Error taxonomy shared by every stage of the pipeline."""


class SalStructError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SalStructError):
    pass


# raster
class UnsupportedFormat(SalStructError):
    pass


class CorruptData(SalStructError):
    pass


class WrongChannelCount(SalStructError):
    pass


# fov / detectors
class NoFovFound(SalStructError):
    pass


class EmptyFov(SalStructError):
    pass


class NegativeInput(SalStructError):
    pass


class StageMismatch(SalStructError):
    pass


# dataset
class MalformedRow(SalStructError):
    def __init__(self, row_number: int, reason: str):
        super().__init__(f"row {row_number}: {reason}")
        self.row_number = row_number
        self.reason = reason


class DuplicatePath(SalStructError):
    pass


class MissingMask(SalStructError):
    pass


class DimensionMismatch(SalStructError):
    pass


class CorruptStack(SalStructError):
    pass


# nn
class ShapeMismatch(SalStructError):
    pass


class OddDimension(SalStructError):
    pass


class EmptyDataset(SalStructError):
    pass


class DivergedLoss(SalStructError):
    pass


class CorruptCheckpoint(SalStructError):
    pass


# evaluation
class LengthMismatch(SalStructError):
    pass


class EmptyInput(SalStructError):
    pass


class EmptyMatrix(SalStructError):
    pass


class EmptyClass(SalStructError):
    pass


class IoFailure(SalStructError):
    pass
