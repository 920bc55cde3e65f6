"""Exception hierarchy shared by every service.

Each error carries a stable ``code`` (sent over the wire) and a ``category``
that decides the CLI exit status.
"""

from __future__ import annotations

from typing import Any

EXIT_USAGE = 1
EXIT_AUTH = 2
EXIT_INTEGRITY = 3
EXIT_NOT_FOUND = 4
EXIT_IO = 5

_EXIT_BY_CATEGORY = {
    "usage": EXIT_USAGE,
    "auth": EXIT_AUTH,
    "integrity": EXIT_INTEGRITY,
    "not_found": EXIT_NOT_FOUND,
    "io": EXIT_IO,
}


class ScwError(Exception):
    code = "error"
    category = "usage"

    def __init__(self, message: str = "", **details: Any) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    @property
    def exit_code(self) -> int:
        return _EXIT_BY_CATEGORY[self.category]

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


class ValidationError(ScwError):
    code = "validation"


class ConflictError(ScwError):
    code = "conflict"


class WrongState(ScwError):
    code = "wrong_state"


class TaskError(ScwError):
    code = "task"


class TimeoutError_(ScwError):
    code = "timeout"


class AuthError(ScwError):
    code = "auth"
    category = "auth"


class PolicyError(AuthError):
    """Request was authenticated but violates a capability policy (e.g. SEV)."""

    code = "policy"


class IntegrityError(ScwError):
    """Authentication tag, MAC, unwrap or digest verification failed.

    ``chunk`` is set when the failure is attributable to one sealed chunk.
    """

    code = "integrity"
    category = "integrity"

    def __init__(self, message: str = "", chunk: int | None = None, **details: Any) -> None:
        if chunk is not None:
            details["chunk"] = chunk
        super().__init__(message, **details)
        self.chunk = chunk


class DigestMismatch(IntegrityError):
    code = "digest_mismatch"


class FormatError(IntegrityError):
    code = "format"


class CorruptionError(IntegrityError):
    code = "corruption"


class MigrationError(IntegrityError):
    code = "migration"


class NotFound(ScwError):
    code = "not_found"
    category = "not_found"


class StorageIOError(ScwError):
    code = "io"
    category = "io"


class RangeError(ScwError):
    code = "range"


class UseAfterClose(ScwError):
    code = "use_after_close"


class SpillRefused(PolicyError):
    code = "spill_refused"


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


ERRORS_BY_CODE: dict[str, type[ScwError]] = {
    c.code: c for c in [ScwError, *_all_subclasses(ScwError)]
}


def from_dict(payload: dict[str, Any]) -> ScwError:
    """Rebuild an error received over the wire."""
    cls = ERRORS_BY_CODE.get(payload.get("code", ""), ScwError)
    details = dict(payload.get("details") or {})
    if issubclass(cls, IntegrityError):
        chunk = details.pop("chunk", None)
        return cls(payload.get("message", ""), chunk=chunk, **details)
    return cls(payload.get("message", ""), **details)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ScwError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_USAGE
