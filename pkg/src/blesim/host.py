"""The mobile-side host stack in two configurations.

The flawed variant mirrors a stock mobile BLE framework: apps cannot
pick a pairing method, learn the negotiated method only after the fact,
encryption errors are swallowed (key-missing silently falls back to
plaintext, attribute-permission errors silently trigger re-pairing),
and apps cannot remove bonds. The patched variant enforces an app's
registered pairing method right after the feature exchange, prompts the
user on every pairing-related error, and gives apps scoped bond removal
with hard-link style ownership counting.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import crypto, smp
from .link import (
    ConnectFailure,
    Connection,
    EncryptionStatus,
    Message,
    SimNode,
    Simulation,
    resolve_peer_identity,
    start_encryption,
)
from .model import (
    Bond,
    DeviceAddress,
    IoCapability,
    PairingFeatures,
    PairingMethod,
    SecurityError,
    SecurityErrorCode,
    strongest_method,
)

logger = logging.getLogger(__name__)


class HostVariant(enum.Enum):
    FLAWED = "flawed"
    PATCHED = "patched"


class AppEventKind(enum.Enum):
    BOND_STATE_CHANGED = "bond-state-changed"
    PAIRING_VARIANT_OBSERVED = "pairing-variant-observed"
    ERROR = "error"
    USER_PROMPT_REQUIRED = "user-prompt-required"


@dataclass(frozen=True)
class AppEvent:
    kind: AppEventKind
    detail: str


class RemoveBondResult(enum.Enum):
    REMOVED = "removed"
    NOT_OWNER = "not-owner"
    UNAVAILABLE = "unavailable"


class ConnectStatus(enum.Enum):
    PLAINTEXT_NO_BOND = "plaintext-no-bond"
    ENCRYPTED = "encrypted"
    PLAINTEXT_FALLBACK = "plaintext-fallback"
    ENCRYPTION_FAILED = "encryption-failed"
    LINK_FAILED = "link-failed"
    PROMPT_DECLINED = "prompt-declined"
    REPAIRED = "re-paired"
    REPAIR_FAILED = "re-pair-failed"


@dataclass
class MobileUi:
    """The scripted human at the mobile: displays, confirmations, consent."""

    show_number: Callable[[int], None] = lambda n: None
    confirm_numeric: Callable[[], bool] = lambda: True
    show_passkey: Callable[[int], None] = lambda p: None
    provide_passkey: Callable[[], Optional[int]] = lambda: None
    consent: Callable[[str], bool] = lambda reason: False


class MobileHost(SimNode):
    def __init__(
        self,
        sim: Simulation,
        name: str = "mobile",
        variant: HostVariant = HostVariant.FLAWED,
        io: IoCapability = IoCapability.KEYBOARD_DISPLAY,
        config_path: str | Path | None = None,
    ):
        super().__init__(sim, name)
        self.variant = variant
        self.io = io
        self.irk = crypto.new_irk(sim.rng)
        self.ui = MobileUi()
        self.app_registry: dict[str, PairingMethod] = {}
        self.prompt_log: list[str] = []
        self.app_events: dict[str, list[AppEvent]] = {}
        self.app_notifications: dict[str, list[bytes]] = {}
        # peers that hit a key-missing error: the flawed host stops trying
        # to encrypt to them until a pairing succeeds again
        self._plaintext_fallback: set[bytes] = set()
        self._conn_app: dict[int, str] = {}
        self._pairing_conns: set[int] = set()
        self._pending_response: Message | None = None
        self._config_path = Path(config_path) if config_path else None
        if self._config_path is not None and self._config_path.exists():
            self._load_config()

    # -- feature surface -----------------------------------------------------
    def features(self) -> PairingFeatures:
        return PairingFeatures(io=self.io, mitm=False, sc=True, bonding=True)

    def _app_event(self, app_id: str, kind: AppEventKind, detail: str) -> None:
        self.app_events.setdefault(app_id, []).append(AppEvent(kind, detail))

    def events_for(self, app_id: str) -> list[AppEvent]:
        return self.app_events.get(app_id, [])

    # -- per-app pairing config (hardened host only) ---------------------------
    def specify_pairing(self, app_id: str, method: PairingMethod) -> bool:
        """Register the pairing method this app insists on. Patched only."""
        if self.variant is not HostVariant.PATCHED:
            return False
        self.app_registry[app_id] = method
        self._save_config()
        self.sim.log("host", f"{self.name}: {app_id} requires {method.value}")
        return True

    def _load_config(self) -> None:
        for line in self._config_path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            app_id, _, method = line.partition("\t")
            self.app_registry[app_id] = PairingMethod.parse(method)

    def _save_config(self) -> None:
        if self._config_path is None:
            return
        lines = [f"{app}\t{method.value}" for app, method in sorted(self.app_registry.items())]
        self._config_path.write_text("\n".join(lines) + "\n")

    def _required_method(self, app_id: str, identity: DeviceAddress | None) -> PairingMethod | None:
        if self.variant is not HostVariant.PATCHED:
            return None
        engaged = {app_id}
        bond = self.lookup_bond(identity)
        if bond is not None:
            engaged |= bond.owner_apps
        methods = [self.app_registry[a] for a in sorted(engaged) if a in self.app_registry]
        return strongest_method(methods)

    # -- connections -----------------------------------------------------------
    def connect(self, app_id: str, target: DeviceAddress) -> tuple[Connection | None, ConnectStatus]:
        source = crypto.random_rpa(self.irk, self.sim.rng)
        result = self.sim.medium.connect(self, target, source)
        if isinstance(result, ConnectFailure):
            return None, ConnectStatus.LINK_FAILED
        conn = result
        self._conn_app[conn.conn_id] = app_id
        identity = resolve_peer_identity(self, target) or target
        bond = self.lookup_bond(identity)
        if bond is None:
            return conn, ConnectStatus.PLAINTEXT_NO_BOND
        if identity.value in self._plaintext_fallback and self.variant is HostVariant.FLAWED:
            # Already downgraded once; the flawed host keeps talking plaintext.
            return conn, ConnectStatus.PLAINTEXT_FALLBACK
        outcome = start_encryption(self.sim, conn, bond)
        if outcome.status is EncryptionStatus.ENCRYPTED:
            return conn, ConnectStatus.ENCRYPTED
        if outcome.status is EncryptionStatus.KEY_MISSING:
            return conn, self.on_encryption_error_0x06(conn, app_id, identity)
        return conn, self._on_encryption_failed(conn, app_id, identity)

    def disconnect(self, conn: Connection) -> None:
        self.sim.medium.disconnect(conn)

    def on_disconnect(self, conn: Connection) -> None:
        self._pairing_conns.discard(conn.conn_id)

    # -- error handling ----------------------------------------------------------
    def on_encryption_error_0x06(
        self, conn: Connection, app_id: str, identity: DeviceAddress
    ) -> ConnectStatus:
        """Peer claims it has no LTK although we hold a bond for it."""
        if self.variant is HostVariant.FLAWED:
            # No app event, no prompt, bond kept: just keep talking in the clear.
            self._plaintext_fallback.add(identity.value)
            self.sim.log("host", f"{self.name}: 0x06 from {identity}, continuing in plaintext")
            return ConnectStatus.PLAINTEXT_FALLBACK
        if not self._prompt(app_id, f"key missing at {identity}; pair again?"):
            self.disconnect(conn)
            return ConnectStatus.PROMPT_DECLINED
        outcome = self._start_pairing(conn, app_id)
        if outcome is not None and outcome.success:
            return ConnectStatus.REPAIRED
        return ConnectStatus.REPAIR_FAILED

    def _on_encryption_failed(
        self, conn: Connection, app_id: str, identity: DeviceAddress
    ) -> ConnectStatus:
        # Link already terminated by the failed handshake.
        if self.variant is HostVariant.FLAWED:
            self.sim.log("host", f"{self.name}: encryption to {identity} failed; no notification")
        else:
            self.prompt_log.append(f"encryption failure with {identity}")
            self._app_event(app_id, AppEventKind.USER_PROMPT_REQUIRED, f"encryption failure with {identity}")
            self.sim.log_security(f"{self.name}: encryption failure with bonded device {identity}")
        return ConnectStatus.ENCRYPTION_FAILED

    def on_att_error_0x05(self, conn: Connection, app_id: str) -> None:
        """An attribute access was denied with Insufficient Authentication."""
        self._app_event(app_id, AppEventKind.ERROR, "GATT_INSUFFICIENT_AUTHENTICATION")
        if self.variant is HostVariant.FLAWED:
            # The framework re-pairs on the app's behalf; the app cannot stop it.
            self.sim.log("host", f"{self.name}: 0x05 on conn {conn.conn_id}, auto-starting pairing")
            self._start_pairing(conn, app_id)
            return
        if self._prompt(app_id, "attribute access denied; pair with this device?"):
            self._start_pairing(conn, app_id)
        else:
            self.disconnect(conn)

    def on_security_request(self, conn: Connection, app_id: str) -> None:
        if conn.conn_id in self._pairing_conns:
            return  # already pairing: ignore the poke
        if self.variant is HostVariant.FLAWED:
            self.sim.log("host", f"{self.name}: security request, auto-starting pairing")
            self._start_pairing(conn, app_id)
        elif self._prompt(app_id, "peer requests pairing; accept?"):
            self._start_pairing(conn, app_id)

    def _prompt(self, app_id: str, reason: str) -> bool:
        self.prompt_log.append(reason)
        self._app_event(app_id, AppEventKind.USER_PROMPT_REQUIRED, reason)
        self.sim.log_security(f"{self.name}: user prompt: {reason}")
        return self.ui.consent(reason)

    # -- bonding -----------------------------------------------------------------
    def create_bond(self, app_id: str, target: DeviceAddress) -> bool:
        """Start pairing with a peer unless a bond already exists.

        Mirrors the one-shot framework call: no method parameter, no
        cancellation, false when the peer is already bonded.
        """
        identity = resolve_peer_identity(self, target) or target
        bond = self.lookup_bond(identity)
        if bond is not None:
            return False
        conn = self._live_conn_to(target)
        if conn is None:
            conn, status = self.connect(app_id, target)
            if conn is None:
                return False
        else:
            self._conn_app.setdefault(conn.conn_id, app_id)
        self._start_pairing(conn, app_id)
        return True

    def _live_conn_to(self, target: DeviceAddress) -> Connection | None:
        for conn in self.sim.medium.live_connections(self):
            if conn.master is self and conn.slave_address == target:
                return conn
        return None

    def remove_bond(self, app_id: str, identity: DeviceAddress) -> RemoveBondResult:
        if self.variant is HostVariant.FLAWED:
            return RemoveBondResult.UNAVAILABLE
        bond = self.lookup_bond(identity)
        if bond is None or app_id not in bond.owner_apps:
            return RemoveBondResult.NOT_OWNER
        bond.remove_owner(app_id)
        if bond.refcount == 0:
            self.drop_bond(identity)
            self._plaintext_fallback.discard(identity.value)
            self.sim.log("host", f"{self.name}: bond with {identity} removed by {app_id}")
        return RemoveBondResult.REMOVED

    def settings_pair(self, app_id: str, target: DeviceAddress) -> smp.PairingOutcome | None:
        """User-driven pairing through the system settings app.

        Unlike the silent framework paths this one announces a MITM
        requirement, the way hosts do when the user deliberately pairs
        an input device.
        """
        conn = self._live_conn_to(target)
        if conn is None:
            conn, status = self.connect(app_id, target)
            if conn is None or not conn.alive:
                return None
        else:
            self._conn_app.setdefault(conn.conn_id, app_id)
        features = PairingFeatures(io=self.io, mitm=True, sc=True, bonding=True)
        return self._start_pairing(conn, app_id, features=features)

    def user_settings_remove_bond(self, identity: DeviceAddress) -> bool:
        """The manual path through the system settings app; always available."""
        if self.lookup_bond(identity) is None:
            return False
        self.drop_bond(identity)
        self._plaintext_fallback.discard(identity.value)
        self.sim.log("host", f"{self.name}: bond with {identity} removed via system settings")
        return True

    def factory_reset(self) -> None:
        self.irk = crypto.new_irk(self.sim.rng)
        self.bonds.clear()
        self._plaintext_fallback.clear()
        self.sim.log("host", f"{self.name}: factory reset, fresh IRK")

    # -- pairing -------------------------------------------------------------------
    def _start_pairing(
        self,
        conn: Connection,
        app_id: str,
        features: PairingFeatures | None = None,
    ) -> smp.PairingOutcome | None:
        if conn.conn_id in self._pairing_conns or not conn.alive:
            return None
        self._pairing_conns.add(conn.conn_id)
        try:
            peer = conn.peer(self)
            # The host only knows the address it connected to; a spoofed
            # address therefore clobbers the real device's bond entry.
            identity = resolve_peer_identity(self, conn.slave_address) or conn.slave_address
            initiator = self.pairing_party(conn, app_id, features)
            responder = peer.pairing_party(conn)
            enforcer = self.enforcer_for(conn, app_id)
            self._app_event(app_id, AppEventKind.BOND_STATE_CHANGED, "Bonding")
            run = smp.PairingRun(self.sim, conn, initiator, responder, enforcer)
            outcome = run.run()
            if outcome.success:
                self._store_bond_from(outcome, identity, app_id)
                if hasattr(peer, "store_pairing_result"):
                    peer.store_pairing_result(conn, outcome)
                self._app_event(app_id, AppEventKind.BOND_STATE_CHANGED, "Bonded")
            else:
                self._app_event(app_id, AppEventKind.BOND_STATE_CHANGED, "None")
                if (
                    self.variant is HostVariant.PATCHED
                    and outcome.error is not None
                    and outcome.error.code is SecurityErrorCode.PAIRING_AUTH_FAIL
                    and conn.alive
                ):
                    self.sim.log_security(f"{self.name}: warning shown to user: {outcome.error.detail}")
                    self.disconnect(conn)
            return outcome
        finally:
            self._pairing_conns.discard(conn.conn_id)

    def pairing_party(
        self, conn: Connection, app_id: str, features: PairingFeatures | None = None
    ) -> smp.Party:
        return smp.Party(
            name=self.name,
            node=self,
            address=conn.master_address,
            features=features or self.features(),
            identity=self.identity,
            irk=self.irk,
            privacy_required=True,
            show_number=self.ui.show_number,
            confirm_numeric=self.ui.confirm_numeric,
            show_passkey=self.ui.show_passkey,
            provide_passkey=self.ui.provide_passkey,
            notify_variant=lambda v: self._app_event(
                app_id, AppEventKind.PAIRING_VARIANT_OBSERVED, v
            ),
        )

    def enforcer_for(self, conn: Connection, app_id: str):
        if self.variant is not HostVariant.PATCHED:
            return None
        identity = resolve_peer_identity(self, conn.slave_address) or conn.slave_address
        required = self._required_method(app_id, identity)
        if required is None:
            return None
        return self._make_enforcer(app_id, required)

    def _make_enforcer(self, app_id: str, required: PairingMethod):
        def enforce(negotiated: PairingMethod) -> SecurityError | None:
            if negotiated is required:
                return None
            self._app_event(app_id, AppEventKind.ERROR, "PAIRING_AUTH_FAIL")
            return SecurityError(
                SecurityErrorCode.PAIRING_AUTH_FAIL,
                f"negotiated {negotiated.value} but {required.value} is required",
            )

        return enforce

    def _store_bond_from(
        self, outcome: smp.PairingOutcome, identity: DeviceAddress, app_id: str
    ) -> None:
        existing = self.lookup_bond(identity)
        owners = {app_id}
        if existing is not None:
            owners |= existing.owner_apps
        self.store_bond(
            Bond(
                peer_identity=identity,
                ltk=outcome.initiator_keys.ltk,
                authenticated=outcome.initiator_keys.authenticated,
                peer_irk=outcome.initiator_learned_irk,
                owner_apps=owners,
            )
        )
        self._plaintext_fallback.discard(identity.value)

    # -- GATT client ------------------------------------------------------------------
    def gatt_read(self, app_id: str, conn: Connection, handle: int) -> tuple[bytes | None, int | None]:
        self.sim.medium.send(conn, self, Message.make("att_read_req", handle=handle))
        return self._finish_att_op(app_id, conn)

    def gatt_write(
        self, app_id: str, conn: Connection, handle: int, value: bytes
    ) -> tuple[bytes | None, int | None]:
        self.sim.medium.send(conn, self, Message.make("att_write_req", handle=handle, value=value))
        return self._finish_att_op(app_id, conn)

    def gatt_subscribe(self, app_id: str, conn: Connection, handle: int) -> tuple[bytes | None, int | None]:
        self.sim.medium.send(conn, self, Message.make("att_subscribe_req", handle=handle))
        return self._finish_att_op(app_id, conn)

    def _finish_att_op(self, app_id: str, conn: Connection) -> tuple[bytes | None, int | None]:
        response = self._pending_response
        self._pending_response = None
        if response is None:
            return None, None
        if response.kind == "att_error":
            code = int(response.get("code"), 16)
            if code == int(SecurityErrorCode.INSUFFICIENT_AUTHENTICATION):
                self.on_att_error_0x05(conn, app_id)
            return None, code
        if response.kind == "att_read_rsp":
            return response.get_bytes("value"), None
        return b"", None

    # -- inbound messages -----------------------------------------------------------
    def on_message(self, conn: Connection, msg: Message) -> None:
        if msg.kind in ("att_read_rsp", "att_write_rsp", "att_subscribe_rsp", "att_error"):
            self._pending_response = msg
        elif msg.kind == "att_notify":
            app_id = self._conn_app.get(conn.conn_id, "system")
            self.app_notifications.setdefault(app_id, []).append(msg.get_bytes("value"))
        elif msg.kind == "security_request":
            app_id = self._conn_app.get(conn.conn_id, "system")
            self.on_security_request(conn, app_id)
