"""Service error taxonomy shared by the engine, the HTTP layer, and clients.

Every engine-level failure maps onto a stable (code, HTTP status) pair so
clients and golden fixtures can rely on it.
"""

from __future__ import annotations

from typing import Any


class ServiceError(Exception):
    """Base class for all service errors carrying a stable wire code."""

    code = "Internal"
    http_status = 500

    def __init__(self, message: str = "", detail: dict[str, Any] | None = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail or {}

    def to_wire(self) -> dict[str, Any]:
        return {"error": {"code": self.code, "message": self.message, "detail": self.detail}}


class NotFoundError(ServiceError):
    code = "NotFound"
    http_status = 404


class ForbiddenError(ServiceError):
    code = "Forbidden"
    http_status = 403


class UnauthenticatedError(ServiceError):
    code = "Unauthenticated"
    http_status = 401


class InvalidParameterError(ServiceError):
    code = "InvalidParameter"
    http_status = 400


class EmptyIntervalError(ServiceError):
    code = "EmptyInterval"
    http_status = 422


class InsufficientSamplesError(ServiceError):
    code = "InsufficientSamples"
    http_status = 422


class PolicyUndecidableError(ServiceError):
    code = "PolicyUndecidable"
    http_status = 422


class MissingDecisionError(ServiceError):
    code = "MissingDecision"
    http_status = 422


class RateLimitedError(ServiceError):
    code = "RateLimited"
    http_status = 429

    def __init__(self, message: str = "", detail: dict[str, Any] | None = None, retry_after_s: float = 0.0):
        super().__init__(message, detail)
        self.retry_after_s = retry_after_s


class WaitTimeoutError(ServiceError):
    code = "WaitTimeout"
    http_status = 408


class ConflictError(ServiceError):
    code = "Conflict"
    http_status = 409


#: Errors a metric evaluation may raise that depend on the data in the
#: interval rather than on the request being malformed.  Policy evaluation
#: records these per-metric instead of failing the whole request.
DATA_DEPENDENT_METRIC_ERRORS = (EmptyIntervalError, InsufficientSamplesError)

ERROR_CLASSES = [
    NotFoundError,
    ForbiddenError,
    UnauthenticatedError,
    InvalidParameterError,
    EmptyIntervalError,
    InsufficientSamplesError,
    PolicyUndecidableError,
    MissingDecisionError,
    RateLimitedError,
    WaitTimeoutError,
    ConflictError,
]

CODE_TO_STATUS = {cls.code: cls.http_status for cls in ERROR_CLASSES}
