"""Attribute server: handles, UUIDs, values, permissions and security gating.

The server owns a flat handle space (assigned sequentially from 0x0001)
grouped into GATT-style services. Access checks depend only on the
current link security state; denial is reported with the 0x05
Insufficient Authentication code, unknown handles with 0x01.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .model import SecurityError, SecurityErrorCode

ATT_INVALID_HANDLE = 0x01


class AttPermission(enum.Enum):
    OPEN = "open"
    ENCRYPTED = "encrypted"
    AUTHENTICATED = "authenticated"
    AUTHORIZED = "authorized"

    @classmethod
    def parse(cls, text: str) -> AttPermission:
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown permission: {text!r}")


class ServiceKind(enum.Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"


@dataclass(frozen=True)
class LinkSecurityState:
    encrypted: bool = False
    key_authenticated: bool = False

    def __post_init__(self) -> None:
        if self.key_authenticated and not self.encrypted:
            raise ValueError("an authenticated key implies an encrypted link")


PLAINTEXT_LINK = LinkSecurityState(False, False)
ENCRYPTED_LINK = LinkSecurityState(True, False)
AUTHENTICATED_LINK = LinkSecurityState(True, True)


@dataclass
class Attribute:
    handle: int
    uuid: int
    value: bytes
    permission: AttPermission


@dataclass
class Service:
    kind: ServiceKind
    uuid: int
    attributes: list[Attribute] = field(default_factory=list)

    @property
    def handle_range(self) -> tuple[int, int]:
        handles = [a.handle for a in self.attributes]
        return (min(handles), max(handles)) if handles else (0, 0)


class AttRequestRefused(Exception):
    """An ATT request the server refuses; carries the wire error code."""

    def __init__(self, code: int, handle: int):
        super().__init__(f"att error 0x{code:02x} on handle 0x{handle:04x}")
        self.code = code
        self.handle = handle


def check_permission(attr: Attribute, link: LinkSecurityState) -> SecurityError | None:
    """None when access is allowed, otherwise the 0x05 denial.

    Authorized attributes deny unconditionally: no authorization
    callback exists in this model, so the safe default applies.
    """
    if attr.permission is AttPermission.OPEN:
        return None
    if attr.permission is AttPermission.ENCRYPTED and link.encrypted:
        return None
    if attr.permission is AttPermission.AUTHENTICATED and link.key_authenticated:
        return None
    return SecurityError(
        SecurityErrorCode.INSUFFICIENT_AUTHENTICATION,
        f"{attr.permission.value} attribute 0x{attr.handle:04x} denied",
    )


class AttributeServer:
    def __init__(self) -> None:
        self.services: list[Service] = []
        self._by_handle: dict[int, Attribute] = {}
        self._next_handle = 0x0001
        # (client name, handle) pairs with notifications enabled
        self.subscriptions: set[tuple[str, int]] = set()

    def add_service(self, uuid: int, kind: ServiceKind = ServiceKind.PRIMARY) -> Service:
        service = Service(kind, uuid)
        self.services.append(service)
        return service

    def add_attribute(
        self, service: Service, uuid: int, permission: AttPermission, value: bytes = b""
    ) -> Attribute:
        attr = Attribute(self._next_handle, uuid, value, permission)
        self._next_handle += 1
        service.attributes.append(attr)
        self._by_handle[attr.handle] = attr
        return attr

    def attribute(self, handle: int) -> Attribute:
        attr = self._by_handle.get(handle)
        if attr is None:
            raise AttRequestRefused(ATT_INVALID_HANDLE, handle)
        return attr

    def find_by_uuid(self, uuid: int) -> Attribute | None:
        for attr in self._by_handle.values():
            if attr.uuid == uuid:
                return attr
        return None

    def read(self, handle: int, link: LinkSecurityState) -> bytes:
        attr = self.attribute(handle)
        denial = check_permission(attr, link)
        if denial is not None:
            raise AttRequestRefused(int(denial.code), handle)
        return attr.value

    def write(self, handle: int, value: bytes, link: LinkSecurityState) -> None:
        attr = self.attribute(handle)
        denial = check_permission(attr, link)
        if denial is not None:
            raise AttRequestRefused(int(denial.code), handle)
        attr.value = value

    def subscribe(self, client: str, handle: int, link: LinkSecurityState) -> None:
        attr = self.attribute(handle)
        denial = check_permission(attr, link)
        if denial is not None:
            raise AttRequestRefused(int(denial.code), handle)
        self.subscriptions.add((client, handle))

    def unsubscribe(self, client: str, handle: int) -> None:
        self.subscriptions.discard((client, handle))

    def is_subscribed(self, client: str, handle: int) -> bool:
        return (client, handle) in self.subscriptions


def _parse_int(text: str) -> int:
    return int(text, 16) if text.lower().startswith("0x") else int(text)


def _parse_value(text: str) -> bytes:
    if text.startswith("hex:"):
        return bytes.fromhex(text[4:])
    if text.startswith("text:"):
        return text[5:].encode()
    if text == "":
        return b""
    raise ValueError(f"unknown value form: {text!r}")


def load_attribute_table(lines: list[str], server: AttributeServer | None = None) -> AttributeServer:
    """Build a server from declarative `service:` / `attr:` lines.

    service: 0x1810 [primary|secondary]
    attr: uuid=0x2A35 perm=open value=hex:0000
    """
    server = server or AttributeServer()
    current: Service | None = None
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        rest = rest.strip()
        if key == "service":
            parts = rest.split()
            kind = ServiceKind(parts[1]) if len(parts) > 1 else ServiceKind.PRIMARY
            current = server.add_service(_parse_int(parts[0]), kind)
        elif key == "attr":
            if current is None:
                raise ValueError("attr line before any service line")
            fields = dict(item.split("=", 1) for item in rest.split())
            server.add_attribute(
                current,
                _parse_int(fields["uuid"]),
                AttPermission.parse(fields["perm"]),
                _parse_value(fields.get("value", "")),
            )
        else:
            raise ValueError(f"unknown attribute-table line: {raw!r}")
    return server
