"""Simulated link layer: advertising, connections, encryption start, sniffing.

A single-threaded, seeded scheduler owns every device and the shared
radio medium. The medium is lossless and instantaneous; time is a
logical tick counter that advances once per observable event, which
makes every run byte-for-byte reproducible for a given seed.
"""
from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field

from . import crypto
from .att import LinkSecurityState
from .model import AddressKind, Bond, DeviceAddress

logger = logging.getLogger(__name__)

MAX_ADV_FREQUENCY_HZ = 50.0


@dataclass(frozen=True)
class Advertisement:
    address: DeviceAddress
    name: str
    services: tuple[int, ...] = ()
    frequency: float = 10.0

    def __post_init__(self) -> None:
        if not 0 < self.frequency <= MAX_ADV_FREQUENCY_HZ:
            raise ValueError(f"advertising frequency must be in (0, {MAX_ADV_FREQUENCY_HZ}] Hz")


@dataclass(frozen=True)
class Message:
    """One over-the-air protocol message; encodes to a stable byte string."""

    kind: str
    fields: tuple[tuple[str, str], ...]

    @classmethod
    def make(cls, kind: str, **fields: object) -> Message:
        rendered = []
        for key, value in fields.items():
            if isinstance(value, bytes):
                rendered.append((key, value.hex()))
            else:
                rendered.append((key, str(value)))
        return cls(kind, tuple(rendered))

    def get(self, key: str) -> str:
        for k, v in self.fields:
            if k == key:
                return v
        raise KeyError(key)

    def get_bytes(self, key: str) -> bytes:
        return bytes.fromhex(self.get(key))

    def encode(self) -> bytes:
        body = " ".join(f"{k}={v}" for k, v in self.fields)
        return f"{self.kind} {body}".strip().encode()

    def __str__(self) -> str:
        return self.encode().decode()


@dataclass(frozen=True)
class SnifferRecord:
    timestamp: int
    source: str
    destination: str
    encrypted: bool
    payload: bytes

    def render(self) -> str:
        return (
            f"t={self.timestamp:05d} {self.source}->{self.destination} "
            f"enc={int(self.encrypted)} x={self.payload.hex()}"
        )


class SnifferLog:
    """Promiscuous tap on the medium; one record per delivered message."""

    def __init__(self) -> None:
        self.records: list[SnifferRecord] = []

    def append(self, record: SnifferRecord) -> None:
        self.records.append(record)

    def export_lines(self) -> list[str]:
        return [r.render() for r in self.records]

    def plaintext_payloads(self) -> list[bytes]:
        return [r.payload for r in self.records if not r.encrypted]


class EncryptionStatus(enum.Enum):
    ENCRYPTED = "encrypted"
    KEY_MISSING = "key-missing"  # slave has no LTK: 0x06 on the wire
    FAILED = "failed"  # mismatched keys: handshake dies, link terminated


@dataclass
class EncryptionOutcome:
    status: EncryptionStatus


class Connection:
    def __init__(
        self,
        conn_id: int,
        master: "SimNode",
        slave: "SimNode",
        master_address: DeviceAddress,
        slave_address: DeviceAddress,
    ):
        self.conn_id = conn_id
        self.master = master
        self.slave = slave
        # the on-air addresses; a spoofing device's slave_address is not its identity
        self.master_address = master_address
        self.slave_address = slave_address
        self.alive = True
        self.encrypted = False
        self.session_key: bytes | None = None
        self._counters = {0: 0, 1: 0}  # per-direction message counters
        self._auth_view: dict[str, bool] = {master.name: False, slave.name: False}

    def peer(self, node: "SimNode") -> "SimNode":
        return self.slave if node is self.master else self.master

    def direction(self, sender: "SimNode") -> int:
        return 0 if sender is self.master else 1

    def security_state(self, node: "SimNode") -> LinkSecurityState:
        if not self.encrypted:
            return LinkSecurityState(False, False)
        return LinkSecurityState(True, self._auth_view[node.name])

    def enable_encryption(self, session_key: bytes, master_auth: bool, slave_auth: bool) -> None:
        self.encrypted = True
        self.session_key = session_key
        self._counters = {0: 0, 1: 0}
        self._auth_view[self.master.name] = master_auth
        self._auth_view[self.slave.name] = slave_auth

    def disable_encryption(self) -> None:
        self.encrypted = False
        self.session_key = None


class ConnectFailure(enum.Enum):
    NO_ADVERTISER = "no-advertiser"
    BUSY = "busy"
    REJECTED = "rejected"


@dataclass(frozen=True)
class ScanResult:
    address: DeviceAddress
    name: str
    services: tuple[int, ...]


class Simulation:
    """Owner of the clock, the seeded RNG, the medium and all devices."""

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0
        self.nodes: dict[str, SimNode] = {}
        self.medium = Medium(self)
        self.events: list[str] = []
        self.security_events: list[str] = []
        self._addr_counter = 0

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def log(self, category: str, text: str) -> None:
        self.events.append(f"t={self.tick():05d} [{category}] {text}")

    def log_security(self, text: str) -> None:
        self.security_events.append(f"t={self.clock:05d} {text}")
        self.events.append(f"t={self.clock:05d} [security] {text}")

    def register(self, node: "SimNode") -> None:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node name: {node.name}")
        self.nodes[node.name] = node

    def new_public_address(self) -> DeviceAddress:
        self._addr_counter += 1
        value = bytes([0x02, 0x00]) + self._addr_counter.to_bytes(4, "big")
        return DeviceAddress.public(value)


class SimNode:
    """Base for every agent on the medium: hosts, devices, attackers."""

    def __init__(self, sim: Simulation, name: str, identity: DeviceAddress | None = None):
        self.sim = sim
        self.name = name
        self.identity = identity or sim.new_public_address()
        self.bonds: dict[bytes, Bond] = {}
        self.slot_limit = 1
        sim.register(self)

    # -- bond store -------------------------------------------------------
    def lookup_bond(self, identity: DeviceAddress | None) -> Bond | None:
        if identity is None:
            return None
        return self.bonds.get(identity.value)

    def store_bond(self, bond: Bond) -> None:
        self.bonds[bond.peer_identity.value] = bond

    def drop_bond(self, identity: DeviceAddress) -> None:
        self.bonds.pop(identity.value, None)

    # -- medium hooks ------------------------------------------------------
    def accepts_connection(self, source: DeviceAddress) -> bool:
        return True

    def on_message(self, conn: Connection, msg: Message) -> None:
        pass

    def on_disconnect(self, conn: Connection) -> None:
        pass


def resolve_peer_identity(observer: SimNode, addr: DeviceAddress) -> DeviceAddress | None:
    """Map an on-air address to a known identity, or None when unresolvable."""
    if addr.kind is AddressKind.PUBLIC_IDENTITY:
        return addr
    for bond in observer.bonds.values():
        if bond.peer_irk is not None and crypto.rpa_resolve(bond.peer_irk, addr):
            return bond.peer_identity
    return None


class Medium:
    def __init__(self, sim: Simulation):
        self.sim = sim
        self.sniffer = SnifferLog()
        self.advertisers: list[tuple[SimNode, Advertisement]] = []
        self.connections: list[Connection] = []
        self._conn_counter = 0

    # -- advertising / scanning -------------------------------------------
    def advertise(self, node: SimNode, adv: Advertisement) -> None:
        self.stop_advertising(node)
        self.advertisers.append((node, adv))
        self.sim.log("adv", f"{node.name} advertising as {adv.address} name={adv.name!r} f={adv.frequency}Hz")

    def stop_advertising(self, node: SimNode) -> None:
        self.advertisers = [(n, a) for n, a in self.advertisers if n is not node]

    def _first_event_order(self) -> list[tuple[float, SimNode, Advertisement]]:
        # Periodic advertisers with uniformly random phase: the first event
        # after scan start lands within one period.
        order = []
        for node, adv in self.advertisers:
            phase = self.sim.rng.uniform(0.0, 1.0 / adv.frequency)
            order.append((phase, node, adv))
        order.sort(key=lambda item: item[0])
        return order

    def scan(self, observer: SimNode) -> list[ScanResult]:
        results = []
        t = self.sim.tick()
        for _, node, adv in self._first_event_order():
            payload = Message.make(
                "adv_ind", addr=str(adv.address), name=adv.name,
                services=",".join(f"0x{u:04x}" for u in adv.services),
            ).encode()
            self.sniffer.append(SnifferRecord(t, node.name, "*", False, payload))
            scan_req = Message.make("scan_req", scanner=observer.name, target=str(adv.address))
            self.sniffer.append(SnifferRecord(t, observer.name, node.name, False, scan_req.encode()))
            scan_rsp = Message.make("scan_rsp", addr=str(adv.address), name=adv.name)
            self.sniffer.append(SnifferRecord(t, node.name, observer.name, False, scan_rsp.encode()))
            results.append(ScanResult(adv.address, adv.name, adv.services))
        self.sim.log("scan", f"{observer.name} scanned, {len(results)} advertiser(s) seen")
        return results

    # -- connections -------------------------------------------------------
    def live_connections(self, node: SimNode) -> list[Connection]:
        return [c for c in self.connections if c.alive and (c.master is node or c.slave is node)]

    def slave_load(self, node: SimNode) -> int:
        return sum(1 for c in self.connections if c.alive and c.slave is node)

    def connect(
        self,
        master: SimNode,
        target: DeviceAddress,
        source: DeviceAddress | None = None,
    ) -> Connection | ConnectFailure:
        source = source or master.identity
        candidates = [
            (phase, node, adv)
            for phase, node, adv in self._first_event_order()
            if adv.address == target
        ]
        if not candidates:
            self.sim.log("link", f"{master.name} connect to {target}: no advertiser")
            return ConnectFailure.NO_ADVERTISER
        # Whoever's advertising event arrives first wins the connection.
        _, slave, adv = candidates[0]
        req = Message.make("connect_req", source=str(source), target=str(target))
        self.sniffer.append(SnifferRecord(self.sim.tick(), master.name, slave.name, False, req.encode()))
        if not slave.accepts_connection(source):
            self.sim.log("link", f"{slave.name} rejected connection from {source}")
            return ConnectFailure.REJECTED
        if self.slave_load(slave) >= slave.slot_limit:
            self.sim.log("link", f"{slave.name} busy: all {slave.slot_limit} slot(s) in use")
            return ConnectFailure.BUSY
        self._conn_counter += 1
        conn = Connection(self._conn_counter, master, slave, source, adv.address)
        self.connections.append(conn)
        assert self.slave_load(slave) <= slave.slot_limit, "slot accounting violated"
        self.sim.log("link", f"{master.name} connected to {slave.name} (conn {conn.conn_id}, src {source})")
        return conn

    def disconnect(self, conn: Connection, reason: str = "") -> None:
        if not conn.alive:
            return
        conn.alive = False
        suffix = f" ({reason})" if reason else ""
        self.sim.log("link", f"conn {conn.conn_id} {conn.master.name}<->{conn.slave.name} closed{suffix}")
        conn.master.on_disconnect(conn)
        conn.slave.on_disconnect(conn)

    # -- data transfer -----------------------------------------------------
    def send(self, conn: Connection, sender: SimNode, msg: Message) -> None:
        """Deliver one message and record exactly one sniffer entry for it."""
        if not conn.alive:
            raise RuntimeError(f"send on dead connection {conn.conn_id}")
        receiver = conn.peer(sender)
        wire = msg.encode()
        t = self.sim.tick()
        if conn.encrypted:
            direction = conn.direction(sender)
            counter = conn._counters[direction]
            conn._counters[direction] += 1
            ciphertext = crypto.session_encrypt(conn.session_key, counter, wire, direction)
            self.sniffer.append(SnifferRecord(t, sender.name, receiver.name, True, ciphertext))
            # Receiver-side authenticated decrypt; both ends hold the same
            # session key once encryption is up, so this must round-trip.
            plain = crypto.session_decrypt(conn.session_key, counter, ciphertext, direction)
            assert plain == wire
        else:
            self.sniffer.append(SnifferRecord(t, sender.name, receiver.name, False, wire))
        self.sim.events.append(f"t={t:05d} [msg] {sender.name}->{receiver.name} {msg}")
        receiver.on_message(conn, msg)


def start_encryption(sim: Simulation, conn: Connection, master_bond: Bond) -> EncryptionOutcome:
    """Bring the link up encrypted from bonded LTKs, or fail like the radio does.

    A slave without any LTK for the master's identity answers
    PIN_OR_KEY_MISSING (0x06) and the link stays up in plaintext. A slave
    whose stored LTK differs cannot decrypt the key-confirmation message;
    that handshake failure terminates the connection.
    """
    master, slave = conn.master, conn.slave
    salt = conn.conn_id.to_bytes(4, "big") + sim.rng.randbytes(8)
    sim.medium.send(conn, master, Message.make("enc_req", salt=salt, initiator=str(conn.master_address)))

    slave_identity_view = resolve_peer_identity(slave, conn.master_address)
    slave_bond = slave.lookup_bond(slave_identity_view)
    if slave_bond is None:
        sim.medium.send(conn, slave, Message.make("enc_rsp", error="0x06"))
        sim.log("link", f"{slave.name} has no LTK for {conn.master_address}: 0x06")
        return EncryptionOutcome(EncryptionStatus.KEY_MISSING)

    master_key = crypto.session_key(master_bond.ltk, salt)
    slave_key = crypto.session_key(slave_bond.ltk, salt)
    confirm = crypto.session_encrypt(master_key, 0, b"enc-start", 0)
    sim.medium.send(conn, master, Message.make("enc_confirm", blob=confirm))
    try:
        crypto.session_decrypt(slave_key, 0, confirm, 0)
    except crypto.DecryptError:
        sim.log("link", f"encryption handshake failed on conn {conn.conn_id}: key mismatch")
        sim.medium.disconnect(conn, "encryption failure")
        return EncryptionOutcome(EncryptionStatus.FAILED)

    sim.medium.send(conn, slave, Message.make("enc_ack", ok=1))
    conn.enable_encryption(master_key, master_bond.authenticated, slave_bond.authenticated)
    sim.log("link", f"conn {conn.conn_id} encrypted (authenticated={master_bond.authenticated})")
    return EncryptionOutcome(EncryptionStatus.ENCRYPTED)


def race(victim_freq: float, fake_freq: float, trials: int, seed: int | random.Random) -> float:
    """Fraction of connection races won by the fake advertiser.

    Both advertisers share one address; the scanner takes whichever
    advertising event arrives first. Each trial draws independent
    uniform phases for the two periodic advertisers.
    """
    for freq in (victim_freq, fake_freq):
        if not 0 < freq <= MAX_ADV_FREQUENCY_HZ:
            raise ValueError(f"frequency out of range: {freq}")
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    wins = 0
    for _ in range(trials):
        fake_first = rng.uniform(0.0, 1.0 / fake_freq)
        victim_first = rng.uniform(0.0, 1.0 / victim_freq)
        if fake_first < victim_first:
            wins += 1
    return wins / trials
