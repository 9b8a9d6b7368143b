class AdaptError(Exception):
    '''Base class of every failure raised by adaptrl'''


class ShapeError(AdaptError, ValueError):
    pass


class FormatError(AdaptError):
    '''Bad magic, unsupported version, truncated or trailing data in a binary container'''


class ConfigError(AdaptError):
    pass


class ActionError(AdaptError, ValueError):
    pass
