"""Exception types raised across the package."""


class LarError(ValueError):
    """Base class for all package errors."""


class ZeroVectorError(LarError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has zero norm and cannot be normalised")
        self.row = row


class EqualLabelsError(LarError):
    def __init__(self, label: int):
        super().__init__(f"anchor and negative share label {label}")
        self.label = label


class DegenerateBatchError(LarError):
    pass


class BadKError(LarError):
    pass


class NonFiniteError(LarError):
    pass


class DimensionError(LarError):
    pass


class BadEpsilonError(LarError):
    pass


class RangeAliasedError(LarError):
    pass


class WrongFrameCountError(LarError):
    pass


class ChannelMismatchError(LarError):
    pass


class InsufficientLabelSamplesError(LarError):
    def __init__(self, label: int, count: int):
        super().__init__(f"label {label} has {count} training sample(s), need at least 2")
        self.label = label
        self.count = count


class ShapeMismatchError(LarError):
    pass


class NonFiniteLossError(LarError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class EmptySplitError(LarError):
    pass


class BadAlphaError(LarError):
    pass


class ConfigError(LarError):
    pass


class DatasetError(LarError):
    pass
