"""Exception hierarchy shared by all ssnsim modules."""


class SSNError(Exception):
    pass


# proto
class EmptyAppSet(SSNError, ValueError):
    pass


class InvalidFirmwareId(SSNError, ValueError):
    pass


class NoPeriodicApps(SSNError, ValueError):
    pass


class ScheduleTooLarge(SSNError, ValueError):
    pass


class MalformedFrame(SSNError, ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed frame at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


# energy
class DegenerateConfig(SSNError, ValueError):
    pass


class InfiniteLifetime(SSNError, ArithmeticError):
    pass


# netsim
class TimeReversal(SSNError, ValueError):
    pass


class NoRoute(SSNError, LookupError):
    pass


class BufferOverflow(SSNError):
    pass


class TopologyError(SSNError, ValueError):
    pass


# node
class SdFull(SSNError):
    pass


class UnknownFirmware(SSNError, LookupError):
    pass


# controller
class NoEligibleNode(SSNError, LookupError):
    pass


class AckTimeout(SSNError):
    pass


# store
class ForeignKeyViolation(SSNError, LookupError):
    pass


class DuplicateSdEntry(SSNError, ValueError):
    pass


# cli / scenario
class ScenarioParseError(SSNError, ValueError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno
        self.reason = reason


class MissingData(SSNError, FileNotFoundError):
    pass
