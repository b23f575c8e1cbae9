"""Core domain types shared by every layer of the simulator.

Addresses, I/O capabilities, pairing feature sets, pairing methods, key
material, bonds and the security error codes that appear on the wire.
All types here are plain values; the only logic is the pairing-method
negotiation rule (`method_for`).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field


class AddressKind(enum.Enum):
    PUBLIC_IDENTITY = "public"
    RESOLVABLE_PRIVATE = "rpa"


@dataclass(frozen=True)
class DeviceAddress:
    """A 48-bit link-layer address, either a stable public identity or an RPA."""

    kind: AddressKind
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != 6:
            raise ValueError(f"address must be 6 bytes, got {len(self.value)}")
        if self.kind is AddressKind.RESOLVABLE_PRIVATE and (self.value[0] >> 6) != 0b01:
            raise ValueError("resolvable private address must have top bits 0b01")

    @classmethod
    def public(cls, value: bytes | str) -> DeviceAddress:
        if isinstance(value, str):
            value = bytes(int(part, 16) for part in value.split(":"))
        return cls(AddressKind.PUBLIC_IDENTITY, bytes(value))

    @property
    def is_rpa(self) -> bool:
        return self.kind is AddressKind.RESOLVABLE_PRIVATE

    def __str__(self) -> str:
        return ":".join(f"{b:02X}" for b in self.value)


class IoCapability(enum.Enum):
    NO_INPUT_NO_OUTPUT = "no-input-no-output"
    DISPLAY_ONLY = "display-only"
    DISPLAY_YES_NO = "display-yesno"
    KEYBOARD_ONLY = "keyboard-only"
    KEYBOARD_DISPLAY = "keyboard-display"

    @property
    def can_display(self) -> bool:
        return self in (
            IoCapability.DISPLAY_ONLY,
            IoCapability.DISPLAY_YES_NO,
            IoCapability.KEYBOARD_DISPLAY,
        )

    @property
    def can_input(self) -> bool:
        return self in (IoCapability.KEYBOARD_ONLY, IoCapability.KEYBOARD_DISPLAY)

    @property
    def can_confirm_display(self) -> bool:
        """Display plus a yes/no button: what numeric comparison needs."""
        return self in (IoCapability.DISPLAY_YES_NO, IoCapability.KEYBOARD_DISPLAY)

    @classmethod
    def parse(cls, text: str) -> IoCapability:
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown io capability: {text!r}")


@dataclass(frozen=True)
class PairingFeatures:
    """What one side announces during the pairing feature exchange."""

    io: IoCapability
    mitm: bool = False
    sc: bool = True
    bonding: bool = True
    oob: bool = False


class PairingMethod(enum.Enum):
    JUST_WORKS = "JustWorks"
    PASSKEY_ENTRY = "PasskeyEntry"
    NUMERIC_COMPARISON = "NumericComparison"
    OUT_OF_BAND = "OutOfBand"

    @property
    def authenticated(self) -> bool:
        """Whether keys from this method carry MITM protection."""
        return self is not PairingMethod.JUST_WORKS

    @classmethod
    def parse(cls, text: str) -> PairingMethod:
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown pairing method: {text!r}")


# Strength ranking used when several apps demand different methods for one
# device: the authenticated methods beat JustWorks, and numeric comparison
# wins ties because it survives physical-access passkey capture.
METHOD_STRENGTH = {
    PairingMethod.JUST_WORKS: 0,
    PairingMethod.PASSKEY_ENTRY: 1,
    PairingMethod.OUT_OF_BAND: 1,
    PairingMethod.NUMERIC_COMPARISON: 2,
}


def strongest_method(methods: "list[PairingMethod]") -> PairingMethod | None:
    if not methods:
        return None
    return max(methods, key=lambda m: (METHOD_STRENGTH[m], m is PairingMethod.NUMERIC_COMPARISON))


class SecurityErrorCode(enum.IntEnum):
    AUTHENTICATION_REQUIREMENTS = 0x03
    INSUFFICIENT_AUTHENTICATION = 0x05
    PIN_OR_KEY_MISSING = 0x06
    PAIRING_AUTH_FAIL = 0x0C


@dataclass(frozen=True)
class SecurityError:
    code: SecurityErrorCode
    detail: str = ""

    def wire_byte(self) -> bytes:
        return bytes([int(self.code)])

    def __str__(self) -> str:
        text = f"{self.code.name}(0x{int(self.code):02x})"
        return f"{text}: {self.detail}" if self.detail else text


@dataclass(frozen=True)
class KeySet:
    """Key material produced by one completed pairing."""

    dh_key: bytes
    mac_key: bytes
    ltk: bytes
    authenticated: bool


@dataclass
class Bond:
    """A persisted pairing record for one peer identity.

    owner_apps / refcount implement the hard-link-style ownership model:
    the bond survives until the last owning app removes it.
    """

    peer_identity: DeviceAddress
    ltk: bytes
    authenticated: bool
    peer_irk: bytes | None = None
    owner_apps: set[str] = field(default_factory=set)
    refcount: int = 0

    def __post_init__(self) -> None:
        if not self.owner_apps:
            self.owner_apps = {"system"}
        self.refcount = len(self.owner_apps)

    def add_owner(self, app_id: str) -> None:
        if app_id not in self.owner_apps:
            self.owner_apps.add(app_id)
            self.refcount += 1

    def remove_owner(self, app_id: str) -> None:
        self.owner_apps.discard(app_id)
        self.refcount = len(self.owner_apps)


def method_for(
    initiator: PairingFeatures, responder: PairingFeatures
) -> PairingMethod | SecurityError:
    """Negotiate the pairing method from two announced feature sets.

    OOB on both sides takes precedence. Without a MITM requirement the
    result is always JustWorks. With one, the I/O capabilities must
    support an authenticated method; if they cannot, the pairing is
    refused outright rather than silently downgraded.
    """
    if not (initiator.sc and responder.sc):
        raise ValueError("legacy (non secure-connections) pairing is not modelled")
    if initiator.oob and responder.oob:
        return PairingMethod.OUT_OF_BAND
    if not (initiator.mitm or responder.mitm):
        return PairingMethod.JUST_WORKS
    if initiator.io.can_confirm_display and responder.io.can_confirm_display:
        return PairingMethod.NUMERIC_COMPARISON
    if (initiator.io.can_input and responder.io.can_display) or (
        responder.io.can_input and initiator.io.can_display
    ):
        return PairingMethod.PASSKEY_ENTRY
    return SecurityError(
        SecurityErrorCode.AUTHENTICATION_REQUIREMENTS,
        "MITM protection requested but I/O capabilities only allow JustWorks",
    )
