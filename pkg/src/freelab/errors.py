"""Exception hierarchy shared by the store, scheduler, identity and API layers."""

from __future__ import annotations


class FreelabError(Exception):
    """Base class; ``code`` is the machine-readable identifier the API exposes."""

    code = "error"


class NotFound(FreelabError):
    code = "not_found"


class Forbidden(FreelabError):
    code = "forbidden"


class Unauthorized(FreelabError):
    code = "unauthorized"


class IllegalTransition(FreelabError):
    code = "illegal_transition"

    def __init__(self, status, event):
        self.status = status
        self.event = event
        super().__init__(f"no transition from {status} on {event}")


class WrongState(FreelabError):
    """Operation requires the execution to be in a different lifecycle state."""

    code = "illegal_transition"


class DuplicateFinal(FreelabError):
    code = "illegal_transition"


class Busy(FreelabError):
    code = "busy"


class WrongApparatus(FreelabError):
    code = "wrong_apparatus"


class DeleteRefused(FreelabError):
    code = "delete_refused"


class QuotaExceeded(FreelabError):
    code = "quota_exceeded"


class MalformedRequest(FreelabError):
    code = "malformed_request"


class MissingReference(FreelabError):
    code = "malformed_request"


class InvariantViolation(FreelabError):
    code = "malformed_request"


class SchemaMalformed(FreelabError):
    code = "malformed_request"


class ValidationFailed(FreelabError):
    """Submit-time config validation failed; carries the full report."""

    code = "validation_failed"

    def __init__(self, report):
        self.report = report
        msgs = "; ".join(f"{e.field} {e.message}".strip() for e in report.errors)
        super().__init__(msgs or "validation failed")


class BadCredentials(FreelabError):
    code = "unauthorized"


class UnknownProvider(FreelabError):
    code = "not_found"


class BadAssertion(FreelabError):
    code = "unauthorized"


class UnknownConsumer(FreelabError):
    code = "unauthorized"


class BadSignature(FreelabError):
    code = "unauthorized"


class StaleTimestamp(FreelabError):
    code = "unauthorized"


class ReplayedNonce(FreelabError):
    code = "unauthorized"


class BindFailure(FreelabError):
    code = "error"
