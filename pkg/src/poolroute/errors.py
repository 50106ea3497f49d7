"""Exception hierarchy shared across the package."""


class PoolRouteError(Exception):
    pass


class MalformedRecord(PoolRouteError, ValueError):
    """A row in an input file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateArc(MalformedRecord):
    pass


class SelfLoop(MalformedRecord):
    pass


class NonPositiveLength(MalformedRecord):
    pass


class NonPositiveSpeed(PoolRouteError, ValueError):
    pass


class BinNotCovered(PoolRouteError, ValueError):
    pass


class Unreachable(PoolRouteError):
    pass


class DegenerateProbability(PoolRouteError, ValueError):
    pass


class MissingArcPrize(PoolRouteError, KeyError):
    pass


class InstanceTooLarge(PoolRouteError):
    pass


class MalformedLog(PoolRouteError, ValueError):
    pass


class ConfigError(PoolRouteError, ValueError):
    pass
