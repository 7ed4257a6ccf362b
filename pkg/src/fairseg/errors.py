"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, everything else -> 3.
"""


class FairsegError(Exception):
    """Base class for all package errors."""


class ConfigError(FairsegError):
    """Invalid configuration: bad distribution, bad schema, missing keys."""


class GenerationError(FairsegError):
    """Phantom geometry cannot be realized (e.g. structure clips the grid)."""


class ContractError(FairsegError):
    """An operation was called with arguments violating its contract."""


class GradientError(FairsegError):
    """A gradient check found a non-finite gradient."""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class DivergenceError(FairsegError):
    """Training produced a non-finite loss; carries epoch/batch context."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class RoutingError(FairsegError):
    """No per-group model exists for the group seen at inference time."""


class DegenerateStatisticsError(FairsegError):
    """A statistic is undefined for the given data (e.g. a perfect group)."""


class StageError(FairsegError):
    """An experiment stage failed; names the stage for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
