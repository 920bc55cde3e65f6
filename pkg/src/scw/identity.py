"""Principals, roles and pre-shared credential derivation."""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass
from enum import Enum

from .errors import ValidationError

_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")


class Role(str, Enum):
    USER = "user"
    OPERATOR = "operator"
    NODE = "node"
    # internal service identity used by the scheduler daemon
    SCHEDULER = "scheduler"


@dataclass(frozen=True)
class Principal:
    name: str
    role: Role
    organisation: str

    def __post_init__(self) -> None:
        check_name(self.name, "principal name")
        check_name(self.organisation, "organisation")
        object.__setattr__(self, "role", Role(self.role))

    @property
    def identity(self) -> str:
        return identity(self.role, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role.value, "organisation": self.organisation}

    @classmethod
    def from_dict(cls, obj: dict) -> "Principal":
        return cls(obj["name"], Role(obj["role"]), obj["organisation"])


def check_name(value: str, what: str = "name") -> str:
    if not isinstance(value, str) or not _NAME.match(value):
        raise ValidationError(f"invalid {what} {value!r}")
    return value


def identity(role: Role | str, name: str) -> str:
    return f"{Role(role).value}:{name}"


KEYSVC = "keysvc"
SCHEDULER = "scheduler"
SCHEDULER_IDENTITY = "scheduler:scheduler"


def service_secret(control_secret: bytes, service: str) -> bytes:
    """Per-service root from which that service's channel credentials derive.

    The scheduler only ever receives its own root, so it cannot derive the
    credentials nodes use towards the key service.
    """
    return hmac.new(control_secret, b"scw-service|" + service.encode(), hashlib.sha256).digest()


def derive_credential(secret: bytes, ident: str) -> bytes:
    """Pre-shared channel key for one identity under a service root."""
    return hmac.new(secret, b"scw-credential|" + ident.encode(), hashlib.sha256).digest()


@dataclass(frozen=True)
class Credential:
    """Everything a principal needs to open channels to both services."""

    identity: str
    organisation: str
    keysvc: bytes
    scheduler: bytes

    @property
    def role(self) -> Role:
        return Role(self.identity.split(":", 1)[0])

    @property
    def name(self) -> str:
        return self.identity.split(":", 1)[1]

    def to_dict(self) -> dict:
        return {
            "identity": self.identity,
            "organisation": self.organisation,
            "keysvc": self.keysvc.hex(),
            "scheduler": self.scheduler.hex(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Credential":
        try:
            return cls(obj["identity"], obj["organisation"],
                       bytes.fromhex(obj["keysvc"]), bytes.fromhex(obj["scheduler"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed credential: {exc}") from None


def issue_credential(control_secret: bytes, principal: Principal) -> Credential:
    ident = principal.identity
    return Credential(
        ident,
        principal.organisation,
        derive_credential(service_secret(control_secret, KEYSVC), ident),
        derive_credential(service_secret(control_secret, SCHEDULER), ident),
    )
