"""Exception hierarchy shared by every leafnet module."""


class LeafnetError(Exception):
    """Base class for all library errors."""


class ShapeError(LeafnetError, ValueError):
    pass


class ContractError(LeafnetError, ValueError):
    """A documented precondition was violated by the caller."""


class StateError(LeafnetError, RuntimeError):
    pass


class NumericError(LeafnetError, ArithmeticError):
    """A forward op produced a non-finite value."""


class DataError(LeafnetError):
    """Problems with input files: labels, manifests, images."""


class LabelFormatError(DataError, ValueError):
    pass


class LabelIntegrityError(DataError, ValueError):
    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class StratificationError(DataError, ValueError):
    def __init__(self, message: str, class_name: str):
        super().__init__(message)
        self.class_name = class_name


class ImageDecodeError(DataError, OSError):
    def __init__(self, path, reason: str = ""):
        msg = f"cannot decode image {path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = path


class CheckpointCorruptError(DataError):
    pass


class CheckpointSchemaError(DataError, KeyError):
    def __init__(self, message: str, names=()):
        super().__init__(message)
        self.names = list(names)

    def __str__(self) -> str:
        return self.args[0]


class WeightImportError(DataError):
    def __init__(self, message: str, names=()):
        super().__init__(message)
        self.names = list(names)


class TrainingDivergenceError(LeafnetError, RuntimeError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step
