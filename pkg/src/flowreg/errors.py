"""Exception hierarchy shared by every module.

Each class carries a ``category`` string and the process exit code the CLI
maps it to (2 usage, 3 data, 4 numerical).
"""


class FlowRegError(Exception):
    category = "error"
    exit_code = 1


class ConfigurationError(FlowRegError, ValueError):
    category = "configuration"
    exit_code = 2


class InvalidArgumentError(FlowRegError, ValueError):
    category = "invalid-argument"
    exit_code = 2


class ShapeError(FlowRegError, ValueError):
    category = "shape"
    exit_code = 4


class DegenerateInputError(FlowRegError, ValueError):
    category = "degenerate-input"
    exit_code = 4


class InsufficientPointsError(FlowRegError, ValueError):
    category = "insufficient-points"
    exit_code = 3


class EmptySetError(FlowRegError, ValueError):
    category = "empty-set"
    exit_code = 4


class EmptyDatasetError(FlowRegError, ValueError):
    category = "empty-dataset"
    exit_code = 3


class NoOverlapError(FlowRegError, RuntimeError):
    category = "no-overlap"
    exit_code = 4

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"no correspondences within gate at iteration {iteration}")


class TrainingDivergenceError(FlowRegError, FloatingPointError):
    category = "divergence"
    exit_code = 4


class CacheInvalidError(FlowRegError, ValueError):
    category = "cache-invalid"
    exit_code = 4


class ParseError(FlowRegError, ValueError):
    category = "parse"
    exit_code = 3

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")
