"""Exception types shared across the package."""


class InvalidSpecError(ValueError):
    """A spec object (shot distribution, dataset, config) is malformed."""


class TaskSamplingError(RuntimeError):
    """A task could not be sampled from the given split."""


class DataFormatError(ValueError):
    """A serialized dataset, task dump, or checkpoint failed to parse."""


class UnsupportedStrategyError(ValueError):
    """A learner was asked to run under a strategy it cannot honor."""


class UsageError(RuntimeError):
    """An API was driven out of order, e.g. backward before forward."""
