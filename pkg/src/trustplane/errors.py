from __future__ import annotations

from typing import Any, Iterable


class EnforcementError(Exception):
    """A decision that blocks a request, tagged with the principles that fired.

    ``code`` is the wire-level error name placed in response envelopes.
    """

    code = "EnforcementError"
    default_principles: tuple[str, ...] = ()

    def __init__(self, message: str = "", principles: Iterable[str] | None = None, **data: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.principles = tuple(principles) if principles is not None else self.default_principles
        self.data = data

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "code": self.code,
            "message": self.message,
            "principles": list(self.principles),
        }
        if self.data:
            out["data"] = self.data
        return out


class SignatureInvalid(EnforcementError):
    code = "SignatureInvalid"
    default_principles = ("P1",)


class UnknownIssuer(EnforcementError):
    code = "UnknownIssuer"
    default_principles = ("P1",)


class OriginMismatch(EnforcementError):
    code = "OriginMismatch"
    default_principles = ("P1",)


class ReplayDetected(EnforcementError):
    code = "ReplayDetected"
    default_principles = ("P1",)


class SessionClosed(EnforcementError):
    code = "SessionClosed"
    default_principles = ("P1",)


class StaleVersion(EnforcementError):
    code = "StaleVersion"
    default_principles = ("P1",)


class CapabilityDenied(EnforcementError):
    code = "CapabilityDenied"
    default_principles = ("P2",)


class PhaseConflict(EnforcementError):
    code = "PhaseConflict"
    default_principles = ("P2",)


class HandoffDenied(EnforcementError):
    code = "HandoffDenied"
    default_principles = ("P2",)


class ConsensusEscalated(EnforcementError):
    code = "ConsensusEscalated"
    default_principles = ("P3",)


class UnknownTool(EnforcementError):
    code = "UnknownTool"


class MethodNotFound(EnforcementError):
    code = "MethodNotFound"


class BadRequest(EnforcementError):
    code = "BadRequest"


class ServerUnavailable(EnforcementError):
    code = "ServerUnavailable"
