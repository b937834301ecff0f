"""Exception hierarchy shared by every netadapt module."""


class NetAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ChannelMismatch(NetAdaptError):
    pass


class EmptySpatial(NetAdaptError):
    pass


class InvalidAlpha(NetAdaptError):
    pass


class ShapeMismatch(NetAdaptError):
    pass


class FormatError(NetAdaptError):
    """Malformed or unsupported file contents.

    ``offset`` is the byte offset (or ``None`` when not meaningful, e.g. for
    text formats where a key name is more useful).
    """

    def __init__(self, reason, offset=None):
        self.reason = reason
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{reason}{where}")


class NumericalFailure(NetAdaptError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class InsufficientSamples(NetAdaptError):
    def __init__(self, label, available, requested):
        self.label = label
        super().__init__(
            f"class {label} has {available} samples, need more than {requested}"
        )


class ClockFailure(NetAdaptError):
    pass


class UnknownFamily(NetAdaptError):
    pass


class CoverageError(NetAdaptError):
    pass


class NotPrunable(NetAdaptError):
    pass


class Inconsistent(NetAdaptError):
    pass


class NoFeasibleProposal(NetAdaptError):
    pass


class ConfigError(NetAdaptError):
    pass
