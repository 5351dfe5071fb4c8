"""Exception types raised across the package."""


class BsoLockError(Exception):
    """Base class for every error raised by bsolock."""


class StepTooCoarse(BsoLockError):
    pass


class NotNormalized(BsoLockError):
    pass


class TruncationTooSmall(BsoLockError):
    pass


class PerturbativeRegimeViolated(BsoLockError):
    pass


class RwaFlagMissing(BsoLockError):
    pass


class WrongStateShape(BsoLockError):
    pass


class EmptyPostSelection(BsoLockError):
    pass


class ChannelClosed(BsoLockError):
    pass


class BadLayout(BsoLockError):
    pass


class DegenerateProfile(BsoLockError):
    pass


class ConfigError(BsoLockError):
    """Invalid experiment configuration (bad value, out of range)."""


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass
