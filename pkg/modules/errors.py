# modules/errors.py
from typing import Tuple


class PainetError(Exception):
    exit_code: int = 1


class ConfigError(PainetError):
    exit_code = 2


class DimensionError(PainetError):
    exit_code = 3

    def __init__(self, op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.shapes = (tuple(a), tuple(b))


class ContractError(PainetError):
    exit_code = 3


class GraphError(PainetError):
    exit_code = 2


class NumericError(PainetError):
    exit_code = 3


class SimulationInstabilityError(NumericError):
    pass


class DataFormatError(PainetError):
    exit_code = 1

    def __init__(self, message: str, line: int = 0) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class ModelFileError(PainetError):
    exit_code = 1


class CorruptModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class PropertyFailure(PainetError):
    exit_code = 4


class HorizonMismatchError(PainetError):
    exit_code = 1
