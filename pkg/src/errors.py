"""Exception hierarchy shared by every module.

Each exception carries a short machine-readable ``code`` which the CLI prints as
``error: <code>: <message>``.
"""


class RobustUAPError(Exception):
    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class NonFiniteError(RobustUAPError):
    code = "non_finite"


class ShapeError(RobustUAPError):
    code = "shape_mismatch"


class SingularTransformError(RobustUAPError):
    code = "singular_transform"


class InvalidArgumentError(RobustUAPError):
    code = "invalid_argument"


class CheckpointError(RobustUAPError):
    code = "checkpoint"


class DatasetError(RobustUAPError):
    code = "dataset"


class ConfigError(RobustUAPError):
    code = "config"
