"""Exception hierarchy shared by every module."""


class TintError(Exception):
    pass


class ShapeError(TintError, ValueError):
    pass


class NonFiniteError(TintError, FloatingPointError):
    pass


class TapeError(TintError, RuntimeError):
    pass


class ConfigError(TintError, ValueError):
    pass


class DataError(TintError, ValueError):
    """Anything wrong with files or datasets on disk."""


class FormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(DataError):
    pass


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite loss at step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
