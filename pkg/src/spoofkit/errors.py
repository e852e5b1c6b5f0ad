"""Exception types shared across the toolkit."""


class SpoofkitError(Exception):
    """Base class for all toolkit errors."""


class InputError(SpoofkitError):
    """Malformed or out-of-contract input data."""


class DegenerateLabels(SpoofkitError):
    """A label vector contains only one class where two are required."""


class MetricError(SpoofkitError):
    """A metric is undefined on the given data slice."""


class TrainingError(SpoofkitError):
    """Optimization diverged or otherwise failed."""


class BalanceError(SpoofkitError):
    """Not enough samples to balance classes to the requested count."""


class SplitOverlap(SpoofkitError):
    """The same file appears in more than one dataset split."""


class ManifestError(SpoofkitError):
    """A dataset manifest failed validation."""


class UsageError(SpoofkitError):
    """CLI invocation error (wrong flags for the selected mode)."""
