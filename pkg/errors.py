"""Exception hierarchy. Each class names the CLI exit code it maps to."""

from typing import Iterable, List


class DareError(Exception):
    exit_code = 1


class DatasetError(DareError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class MissingValueError(DatasetError):
    pass


class NonNumericValueError(DatasetError):
    pass


class LabelCardinalityError(DatasetError):
    pass


class InvalidParamsError(DareError, ValueError):
    pass


class InvalidCountsError(DareError, ValueError):
    pass


class EmptyCandidatesError(DareError, ValueError):
    pass


class DimensionMismatchError(DareError, ValueError):
    pass


class EmptyForestError(DareError):
    pass


class UnknownInstanceError(DareError, KeyError):
    exit_code = 4

    def __init__(self, ids: Iterable[int]):
        self.ids: List[int] = sorted(int(i) for i in ids)
        super().__init__(f"unknown instance id(s): {self.ids}")

    def __str__(self) -> str:
        return self.args[0]


class SingleClassError(DareError, ValueError):
    pass


class DegenerateFoldError(DareError):
    pass


class BenchmarkError(DareError):
    pass


class ModelFileError(DareError):
    exit_code = 3


class CorruptModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass
