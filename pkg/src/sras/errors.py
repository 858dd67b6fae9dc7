"""Exception hierarchy shared by all sras modules."""

from __future__ import annotations


class SrasError(Exception):
    """Base class for every error raised by this package."""


# -- policy -----------------------------------------------------------------


class ParseError(SrasError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class MissingField(ParseError):
    pass


class DuplicateId(ParseError):
    pass


class UnknownEntity(SrasError, LookupError):
    pass


class UnknownJob(SrasError, LookupError):
    pass


class InvalidPolicy(SrasError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors) or "invalid policy")


# -- tee --------------------------------------------------------------------


class DuplicateQeid(SrasError):
    pass


class BadReportDataLength(SrasError, ValueError):
    pass


class QuoteFormatError(SrasError, ValueError):
    pass


# -- vnet -------------------------------------------------------------------


class Missing(SrasError, LookupError):
    pass


class BoardTimeout(SrasError, TimeoutError):
    pass


class TransportFailure(SrasError):
    pass


# -- rpo / rpe --------------------------------------------------------------


class PhaseError(SrasError):
    pass


class NotAttested(SrasError):
    pass


class ChannelFailure(SrasError):
    pass


class QuotingFailure(SrasError):
    pass


class PeerNotVerified(SrasError):
    pass


class LocalVerificationFailed(SrasError):
    def __init__(self, reason, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else str(reason))


# -- pe ---------------------------------------------------------------------


class HandshakeError(SrasError):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class DecryptFailure(SrasError):
    pass


class CounterReplay(SrasError):
    pass


# -- harness ----------------------------------------------------------------


class ConfigError(SrasError):
    pass


class Deadlock(SrasError):
    def __init__(self, message: str, snapshot: dict | None = None):
        self.snapshot = snapshot or {}
        super().__init__(message)
