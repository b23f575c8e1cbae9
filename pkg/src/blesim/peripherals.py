"""Peer-device and attacker agents.

Profiles describe a device declaratively (I/O, policy, attribute table,
whitelist, behavior); `PeripheralDevice` animates one on the medium.
The attacker toolkit is a spoofing peripheral (cloned address/name with
attacker-chosen permissions), a spoofing mobile (optionally armed with
a stolen identity and IRK), connection-slot blockers and the medium's
sniffer tap.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

from . import crypto, smp
from .att import AttPermission, AttributeServer, AttRequestRefused, load_attribute_table
from .link import (
    Advertisement,
    ConnectFailure,
    Connection,
    Message,
    SimNode,
    Simulation,
    resolve_peer_identity,
)
from .model import (
    Bond,
    DeviceAddress,
    IoCapability,
    PairingFeatures,
    PairingMethod,
)
from .smp import SC_ONLY_OFF, SecureConnectionsOnlyPolicy

logger = logging.getLogger(__name__)

# Well-known attribute UUIDs used by the bundled device profiles.
BP_SERVICE_UUID = 0x1810
BP_READING_UUID = 0x2A35
LIGHT_SERVICE_UUID = 0xFF00
LIGHT_PASSWORD_UUID = 0xFF01
LIGHT_COMMAND_UUID = 0xFF02
HID_SERVICE_UUID = 0x1812
KB_REPORT_UUID = 0x2A4D
GENERIC_SERVICE_UUID = 0xFFF0
GENERIC_ENC_UUID = 0xFFF1
GENERIC_AUTH_UUID = 0xFFF2


@dataclass
class DeviceProfile:
    name: str
    io: IoCapability = IoCapability.NO_INPUT_NO_OUTPUT
    mitm: bool = False
    bonding: bool = True
    oob: bool = False
    address: DeviceAddress | None = None
    sc_only: SecureConnectionsOnlyPolicy = SC_ONLY_OFF
    slot_limit: int = 1
    adv_frequency: float = 10.0
    ltk_property_caching: bool = False
    whitelist_enabled: bool = False
    behavior: str = "generic"
    attribute_lines: list[str] = field(default_factory=list)

    def features(self) -> PairingFeatures:
        return PairingFeatures(
            io=self.io, mitm=self.mitm, sc=True, bonding=self.bonding, oob=self.oob
        )

    @classmethod
    def parse(cls, text: str) -> DeviceProfile:
        profile = cls(name="unnamed")
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if key == "device":
                profile.name = value
            elif key == "address":
                profile.address = DeviceAddress.public(value)
            elif key == "io":
                profile.io = IoCapability.parse(value)
            elif key == "mitm":
                profile.mitm = value in ("yes", "true", "1")
            elif key == "bonding":
                profile.bonding = value in ("yes", "true", "1")
            elif key == "sc-only":
                profile.sc_only = SecureConnectionsOnlyPolicy.parse(value)
            elif key == "slot-limit":
                profile.slot_limit = int(value)
            elif key == "adv-frequency":
                profile.adv_frequency = float(value)
            elif key == "ltk-property-caching":
                profile.ltk_property_caching = value in ("yes", "true", "1")
            elif key == "whitelist":
                profile.whitelist_enabled = value in ("yes", "true", "1")
            elif key == "behavior":
                profile.behavior = value
            elif key in ("service", "attr"):
                profile.attribute_lines.append(line)
            else:
                raise ValueError(f"unknown profile line: {raw!r}")
        return profile

    @classmethod
    def load(cls, path: str | Path) -> DeviceProfile:
        return cls.parse(Path(path).read_text())

    def attack_clone(
        self,
        io: IoCapability = IoCapability.NO_INPUT_NO_OUTPUT,
        mitm: bool = False,
        permission: AttPermission | None = None,
        adv_frequency: float | None = None,
    ) -> DeviceProfile:
        """A spoofing copy: same address, name and attribute layout, but
        attacker-chosen I/O capabilities and permissions, and no policy,
        whitelist or caching quirks of its own."""
        lines = self.attribute_lines
        if permission is not None:
            lines = [_override_permission(line, permission) for line in lines]
        return dataclasses.replace(
            self,
            io=io,
            mitm=mitm,
            oob=False,
            sc_only=SC_ONLY_OFF,
            ltk_property_caching=False,
            whitelist_enabled=False,
            adv_frequency=adv_frequency or self.adv_frequency,
            attribute_lines=lines,
        )


def _override_permission(line: str, permission: AttPermission) -> str:
    if not line.startswith("attr"):
        return line
    parts = []
    for token in line.split():
        if token.startswith("perm="):
            token = f"perm={permission.value}"
        parts.append(token)
    return " ".join(parts)


def load_bundled_profile(name: str) -> DeviceProfile:
    text = resources.files("blesim.profiles").joinpath(f"{name}.profile").read_text()
    return DeviceProfile.parse(text)


class PeripheralDevice(SimNode):
    """A scripted slave device driven entirely by medium events."""

    def __init__(
        self,
        sim: Simulation,
        profile: DeviceProfile,
        name: str | None = None,
        capture: bool = False,
    ):
        super().__init__(sim, name or profile.name, profile.address)
        self.profile = profile
        self.att = load_attribute_table(profile.attribute_lines)
        self.slot_limit = profile.slot_limit
        self.capture = capture
        self.captured: dict[str, list] = {"writes": [], "irk": [], "identity": []}
        # whitelist state: enrolled identities plus their IRKs
        self.whitelist_identities: set[bytes] = set()
        self.whitelist_irks: list[bytes] = []
        self.pairing_mode = False
        # smart-light application state
        self.light_password: bytes | None = None
        self.light_commands: list[bytes] = []
        self._authorized_conns: set[int] = set()
        # keyboard state: the passkey physically typed on this device
        self._local_passkey: int | None = None
        # pairing UI hooks, overridable by scenarios
        self.ui_show_number: Callable[[int], None] = lambda n: None
        self.ui_confirm_numeric: Callable[[], bool] = lambda: True
        self.ui_show_passkey: Callable[[int], None] = lambda p: None
        self.ui_provide_passkey: Callable[[], Optional[int]] = self.take_local_passkey
        self.passkey_override: int | None = None

    # -- advertising --------------------------------------------------------
    def advertise(self, frequency: float | None = None) -> None:
        adv = Advertisement(
            address=self.profile.address or self.identity,
            name=self.profile.name,
            services=tuple(s.uuid for s in self.att.services),
            frequency=frequency or self.profile.adv_frequency,
        )
        self.sim.medium.advertise(self, adv)

    def stop_advertising(self) -> None:
        self.sim.medium.stop_advertising(self)

    def go_offline(self) -> None:
        self.stop_advertising()
        for conn in self.sim.medium.live_connections(self):
            self.sim.medium.disconnect(conn, f"{self.name} offline")

    # -- whitelist -----------------------------------------------------------
    def accepts_connection(self, source: DeviceAddress) -> bool:
        if not self.profile.whitelist_enabled or self.pairing_mode:
            return True
        if not self.whitelist_identities and not self.whitelist_irks:
            return True  # never provisioned: factory-open
        if source.value in self.whitelist_identities:
            return True
        return any(crypto.rpa_resolve(irk, source) for irk in self.whitelist_irks)

    def enter_pairing_mode(self) -> None:
        """Physical-access hook: the pairing button on the device."""
        self.pairing_mode = True
        self.sim.log("device", f"{self.name} entered pairing mode")

    # -- pairing -------------------------------------------------------------
    def pairing_party(self, conn: Connection) -> smp.Party:
        peer_identity = resolve_peer_identity(self, conn.master_address)
        if peer_identity is None:
            peer_identity = self._whitelist_resolve(conn.master_address)
        return smp.Party(
            name=self.name,
            node=self,
            address=conn.slave_address,
            features=self.profile.features(),
            identity=self.identity,
            privacy_required=False,
            show_number=self.ui_show_number,
            confirm_numeric=self.ui_confirm_numeric,
            show_passkey=self.ui_show_passkey,
            provide_passkey=self.ui_provide_passkey,
            passkey_override=self.passkey_override,
            policy=self.profile.sc_only,
            ltk_property_caching=self.profile.ltk_property_caching,
            cached_bond=self.lookup_bond(peer_identity),
        )

    def _whitelist_resolve(self, addr: DeviceAddress) -> DeviceAddress | None:
        for bond in self.bonds.values():
            if bond.peer_irk is not None and crypto.rpa_resolve(bond.peer_irk, addr):
                return bond.peer_identity
        return None

    def store_pairing_result(self, conn: Connection, outcome: smp.PairingOutcome) -> None:
        identity = (
            outcome.responder_learned_identity
            or resolve_peer_identity(self, conn.master_address)
            or conn.master_address
        )
        old = self.lookup_bond(identity)
        authenticated = outcome.responder_keys.authenticated
        if self.profile.ltk_property_caching and old is not None:
            # Stale key-property reuse: the new LTK inherits the old flag,
            # and the live link immediately counts as that secure.
            authenticated = old.authenticated
            conn._auth_view[self.name] = authenticated
            self.sim.log("device", f"{self.name} cached key property reused for {identity}")
        irk = outcome.responder_learned_irk or (old.peer_irk if old else None)
        self.store_bond(Bond(identity, outcome.responder_keys.ltk, authenticated, peer_irk=irk))
        if self.profile.whitelist_enabled:
            self.whitelist_identities.add(identity.value)
            if irk is not None and irk not in self.whitelist_irks:
                self.whitelist_irks.append(irk)
        self.pairing_mode = False

    def send_security_request(self, conn: Connection) -> None:
        smp.send_security_request(self.sim, conn)

    def take_local_passkey(self) -> int | None:
        return self._local_passkey

    # -- application behaviors -------------------------------------------------
    def notify_subscribers(self, uuid: int, value: bytes) -> None:
        attr = self.att.find_by_uuid(uuid)
        if attr is None:
            return
        for conn in self.sim.medium.live_connections(self):
            client = conn.peer(self).name
            if self.att.is_subscribed(client, attr.handle):
                self.sim.medium.send(
                    conn, self, Message.make("att_notify", handle=attr.handle, value=value)
                )

    def publish_reading(self, value: bytes) -> None:
        self.notify_subscribers(BP_READING_UUID, value)

    def type_text(self, text: str) -> None:
        """Physical keystrokes: forwarded to whoever is subscribed right now."""
        for char in text:
            self.notify_subscribers(KB_REPORT_UUID, char.encode())

    def type_passkey(self, passkey: int) -> None:
        self._local_passkey = passkey
        self.type_text(f"{passkey:06d}")

    # -- inbound requests ---------------------------------------------------------
    def on_message(self, conn: Connection, msg: Message) -> None:
        if msg.kind == "att_read_req":
            self._handle_read(conn, int(msg.get("handle")))
        elif msg.kind == "att_write_req":
            self._handle_write(conn, int(msg.get("handle")), msg.get_bytes("value"))
        elif msg.kind == "att_subscribe_req":
            self._handle_subscribe(conn, int(msg.get("handle")))
        elif msg.kind == "identity_info" and self.capture:
            self.captured["irk"].append(msg.get_bytes("irk"))
            self.captured["identity"].append(msg.get("identity"))
            self.sim.log("attack", f"{self.name} captured IRK and identity {msg.get('identity')}")

    def _respond(self, conn: Connection, msg: Message) -> None:
        self.sim.medium.send(conn, self, msg)

    def _handle_read(self, conn: Connection, handle: int) -> None:
        try:
            value = self.att.read(handle, conn.security_state(self))
        except AttRequestRefused as refused:
            self._respond(conn, Message.make("att_error", code=f"0x{refused.code:02x}", handle=handle))
            return
        self._respond(conn, Message.make("att_read_rsp", handle=handle, value=value))

    def _handle_write(self, conn: Connection, handle: int, value: bytes) -> None:
        try:
            attr = self.att.attribute(handle)
            self.att.write(handle, value, conn.security_state(self))
        except AttRequestRefused as refused:
            self._respond(conn, Message.make("att_error", code=f"0x{refused.code:02x}", handle=handle))
            return
        if self.capture:
            self.captured["writes"].append((attr.uuid, value))
        status = self._app_layer_write(conn, attr.uuid, value)
        self._respond(conn, Message.make("att_write_rsp", handle=handle, status=status))

    def _app_layer_write(self, conn: Connection, uuid: int, value: bytes) -> str:
        if self.profile.behavior != "smart-light":
            return "ok"
        if uuid == LIGHT_PASSWORD_UUID:
            if self.light_password is None:
                self.light_password = value  # provisioning write
                self._authorized_conns.add(conn.conn_id)
                return "ok"
            if value == self.light_password:
                self._authorized_conns.add(conn.conn_id)
                return "ok"
            return "rejected"
        if uuid == LIGHT_COMMAND_UUID:
            if conn.conn_id in self._authorized_conns:
                self.light_commands.append(value)
                return "ok"
            return "rejected"
        return "ok"

    def _handle_subscribe(self, conn: Connection, handle: int) -> None:
        try:
            self.att.subscribe(conn.peer(self).name, handle, conn.security_state(self))
        except AttRequestRefused as refused:
            self._respond(conn, Message.make("att_error", code=f"0x{refused.code:02x}", handle=handle))
            return
        self._respond(conn, Message.make("att_subscribe_rsp", handle=handle))

    def on_disconnect(self, conn: Connection) -> None:
        self._authorized_conns.discard(conn.conn_id)
        for client, handle in list(self.att.subscriptions):
            if client == conn.peer(self).name:
                self.att.unsubscribe(client, handle)


class AttackerMobile(SimNode):
    """Spoofing master: pairs, reads and listens with chosen parameters.

    With a stolen identity and IRK it impersonates the victim mobile;
    without them it is just an anonymous central.
    """

    def __init__(
        self,
        sim: Simulation,
        name: str = "fake-mobile",
        claimed_identity: DeviceAddress | None = None,
        stolen_irk: bytes | None = None,
    ):
        super().__init__(sim, name)
        self.claimed_identity = claimed_identity
        self.stolen_irk = stolen_irk
        self.captured_notifications: list[bytes] = []
        self.keystroke_sink: Callable[[bytes], None] | None = None
        self.known_passkey: int | None = None
        self._pending_response: Message | None = None

    def spoofed_source(self) -> DeviceAddress:
        if self.stolen_irk is not None:
            return crypto.random_rpa(self.stolen_irk, self.sim.rng)
        if self.claimed_identity is not None:
            return self.claimed_identity
        return self.identity

    def connect(self, target: DeviceAddress) -> Connection | ConnectFailure:
        return self.sim.medium.connect(self, target, self.spoofed_source())

    def pair(
        self,
        conn: Connection,
        io: IoCapability = IoCapability.NO_INPUT_NO_OUTPUT,
        mitm: bool = False,
        passkey_override: int | None = None,
        provide_passkey: Callable[[], Optional[int]] | None = None,
        show_passkey: Callable[[int], None] | None = None,
    ) -> smp.PairingOutcome:
        """Run a pairing toward the connected slave with attacker-chosen features."""
        identity = self.claimed_identity or self.identity
        initiator = smp.Party(
            name=self.name,
            node=self,
            address=conn.master_address,
            features=PairingFeatures(io=io, mitm=mitm, sc=True, bonding=True),
            identity=identity,
            irk=self.stolen_irk,
            privacy_required=self.stolen_irk is not None,
            confirm_numeric=smp.attacker_confirm,
            passkey_override=passkey_override,
            provide_passkey=provide_passkey or (lambda: self.known_passkey),
            show_passkey=show_passkey or (lambda p: None),
        )
        peer = conn.peer(self)
        run = smp.PairingRun(self.sim, conn, initiator, peer.pairing_party(conn))
        outcome = run.run()
        if outcome.success:
            self.store_bond(
                Bond(
                    peer_identity=conn.slave_address,
                    ltk=outcome.initiator_keys.ltk,
                    authenticated=outcome.initiator_keys.authenticated,
                    peer_irk=outcome.initiator_learned_irk,
                )
            )
            peer.store_pairing_result(conn, outcome)
        return outcome

    # minimal GATT client surface
    def gatt_read(self, conn: Connection, handle: int) -> tuple[bytes | None, int | None]:
        self.sim.medium.send(conn, self, Message.make("att_read_req", handle=handle))
        return self._take_response()

    def gatt_write(self, conn: Connection, handle: int, value: bytes) -> tuple[bytes | None, int | None]:
        self.sim.medium.send(conn, self, Message.make("att_write_req", handle=handle, value=value))
        return self._take_response()

    def gatt_subscribe(self, conn: Connection, handle: int) -> tuple[bytes | None, int | None]:
        self.sim.medium.send(conn, self, Message.make("att_subscribe_req", handle=handle))
        return self._take_response()

    def _take_response(self) -> tuple[bytes | None, int | None]:
        response, self._pending_response = self._pending_response, None
        if response is None:
            return None, None
        if response.kind == "att_error":
            return None, int(response.get("code"), 16)
        if response.kind == "att_read_rsp":
            return response.get_bytes("value"), None
        if response.kind == "att_write_rsp":
            return response.get("status").encode(), None
        return b"", None

    def on_message(self, conn: Connection, msg: Message) -> None:
        if msg.kind in ("att_read_rsp", "att_write_rsp", "att_subscribe_rsp", "att_error"):
            self._pending_response = msg
        elif msg.kind == "att_notify":
            value = msg.get_bytes("value")
            self.captured_notifications.append(value)
            if self.keystroke_sink is not None:
                self.keystroke_sink(value)


class Blocker(SimNode):
    """Attacker agent that occupies one connection slot on a victim slave."""

    def __init__(self, sim: Simulation, name: str):
        super().__init__(sim, name)
        self.held: Connection | None = None

    def occupy(self, target: DeviceAddress) -> bool:
        result = self.sim.medium.connect(self, target)
        if isinstance(result, ConnectFailure):
            return False
        self.held = result
        return True

    def release(self) -> None:
        if self.held is not None:
            self.sim.medium.disconnect(self.held, "blocker released")
            self.held = None


@dataclass
class AttackerKit:
    """The four attacker roles of one campaign, plus the loot collected."""

    sim: Simulation
    fake_device: PeripheralDevice | None = None
    fake_mobile: AttackerMobile | None = None
    blockers: list[Blocker] = field(default_factory=list)

    def deploy_blockers(self, count: int, target: DeviceAddress) -> int:
        held = 0
        for i in range(count):
            blocker = Blocker(self.sim, f"blocker-{len(self.blockers) + 1}")
            self.blockers.append(blocker)
            if blocker.occupy(target):
                held += 1
        return held

    def release_blockers(self) -> None:
        for blocker in self.blockers:
            blocker.release()

    def sniffer_lines(self) -> list[str]:
        return self.sim.medium.sniffer.export_lines()

    def stolen_irk(self) -> bytes | None:
        if self.fake_device is not None and self.fake_device.captured["irk"]:
            return self.fake_device.captured["irk"][-1]
        return None

    def stolen_identity(self) -> DeviceAddress | None:
        if self.fake_device is not None and self.fake_device.captured["identity"]:
            return DeviceAddress.public(self.fake_device.captured["identity"][-1])
        return None
