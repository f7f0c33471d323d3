"""Exception hierarchy shared by every stage of the service."""


class ContextSecurityError(Exception):
    """Base class for domain failures."""


# ingestion / trust
class UnknownDevice(ContextSecurityError):
    pass


class BadSignature(ContextSecurityError):
    pass


class ReplayedSequence(ContextSecurityError):
    pass


class ClockSkewExceeded(ContextSecurityError):
    pass


class UnnormalizableValue(ContextSecurityError):
    pass


class InvalidWindow(ContextSecurityError):
    pass


class DuplicateDevice(ContextSecurityError):
    pass


class ContractViolation(ContextSecurityError):
    pass


# reasoning
class EmptyTrainingSet(ContextSecurityError):
    pass


# dissemination
class UnknownUser(ContextSecurityError):
    pass


# policy engine
class LintError(ContextSecurityError):
    """A policy document failed validation.

    ``location`` is a dotted path into the offending document, e.g.
    ``policies[2].match.risk``.
    """

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class CyclicConstraints(ContextSecurityError):
    pass


# mechanisms
class UnknownSubject(ContextSecurityError):
    pass


class UnknownToken(ContextSecurityError):
    pass


class UnknownPeer(ContextSecurityError):
    pass


class TamperDetected(ContextSecurityError):
    pass


class StaleEpoch(ContextSecurityError):
    pass


class NonceReuse(ContextSecurityError):
    pass


class InvalidTransform(ContextSecurityError):
    pass


# harness
class ParseError(ContextSecurityError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnresolvedReference(ContextSecurityError):
    pass
