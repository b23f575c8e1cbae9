"""The pairing state machine: feature exchange, authentication, key distribution.

One `PairingRun` drives both ends of a single pairing over a live
connection. The phases are exposed individually so attack scripts can
interleave two concurrent runs (the man-in-the-middle topology needs a
user who compares numbers across two sessions); `run()` is the
straight-through path everything else uses.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .link import Connection, Message, Simulation, SimNode
from .model import (
    Bond,
    DeviceAddress,
    KeySet,
    PairingFeatures,
    PairingMethod,
    SecurityError,
    SecurityErrorCode,
    method_for,
)

logger = logging.getLogger(__name__)


class Role(enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class SessionState(enum.Enum):
    IDLE = 0
    FEATURES_EXCHANGED = 1
    PUBLIC_KEYS_EXCHANGED = 2
    AUTH1_DONE = 3
    AUTH2_DONE = 4
    KEYS_DISTRIBUTED = 5
    FAILED = 6


@dataclass
class PairingSession:
    role: Role
    state: SessionState = SessionState.IDLE
    negotiated: PairingMethod | None = None
    keys: KeySet | None = None
    failure: SecurityError | None = None

    def advance(self, state: SessionState) -> None:
        if self.state is SessionState.FAILED:
            raise RuntimeError("session already failed")
        if state.value != self.state.value + 1:
            raise RuntimeError(f"illegal transition {self.state.name} -> {state.name}")
        self.state = state

    def fail(self, error: SecurityError) -> None:
        self.state = SessionState.FAILED
        self.failure = error


class ScEnforcement(enum.Enum):
    CORRECT = "correct"
    TI_SC_BIT_ONLY = "sc-bit-only"


@dataclass(frozen=True)
class SecureConnectionsOnlyPolicy:
    """Peripheral-side gate on incoming pairing requests.

    CORRECT enforcement refuses any pairing that would produce an
    unauthenticated key. The TI_SC_BIT_ONLY variant reproduces the
    broken stack that looks at the Secure Connections bit and nothing
    else, so JustWorks sails through.
    """

    enabled: bool = False
    enforcement: ScEnforcement = ScEnforcement.CORRECT

    @classmethod
    def parse(cls, text: str) -> SecureConnectionsOnlyPolicy:
        if text == "off":
            return cls(False)
        return cls(True, ScEnforcement(text))


SC_ONLY_OFF = SecureConnectionsOnlyPolicy(False)


# ---------------------------------------------------------------------------
# User agents
# ---------------------------------------------------------------------------

class HonestComparator:
    """The attentive user: confirms iff both watched displays show one number."""

    def __init__(self, watching: tuple[str, str]):
        self.watching = watching
        self.seen: dict[str, int] = {}

    def observe(self, device: str, number: int) -> None:
        if device in self.watching:
            self.seen[device] = number

    def decide(self) -> bool:
        values = [self.seen.get(d) for d in self.watching]
        return None not in values and values[0] == values[1]


class HonestTypist:
    """Types exactly the passkey shown to them, on the device they operate."""

    def __init__(self, types_on: Callable[[int], None]):
        self.types_on = types_on
        self.saw: int | None = None

    def observe(self, device: str, passkey: int) -> None:
        self.saw = passkey
        self.types_on(passkey)


def absent_user_confirm() -> bool:
    return False


def attacker_confirm() -> bool:
    return True


@dataclass
class Party:
    """One end of a pairing: its identity, features, and user-facing hooks."""

    name: str
    node: SimNode
    address: DeviceAddress
    features: PairingFeatures
    identity: DeviceAddress | None = None
    irk: bytes | None = None
    privacy_required: bool = False
    oob_secret: bytes | None = None
    # numeric comparison hooks
    show_number: Callable[[int], None] = lambda n: None
    confirm_numeric: Callable[[], bool] = attacker_confirm
    # passkey entry hooks
    show_passkey: Callable[[int], None] = lambda p: None
    provide_passkey: Callable[[], Optional[int]] = lambda: None
    passkey_override: int | None = None
    # host-side event hook: fired when the pairing variant becomes user-visible
    notify_variant: Callable[[str], None] = lambda v: None
    # responder-side policy context
    policy: SecureConnectionsOnlyPolicy = SC_ONLY_OFF
    ltk_property_caching: bool = False
    cached_bond: Bond | None = None


@dataclass
class PairingOutcome:
    method: PairingMethod | None = None
    error: SecurityError | None = None
    initiator_keys: KeySet | None = None
    responder_keys: KeySet | None = None
    # identity information learned in phase 3
    initiator_learned_irk: bytes | None = None
    initiator_learned_identity: DeviceAddress | None = None
    responder_learned_irk: bytes | None = None
    responder_learned_identity: DeviceAddress | None = None
    displayed_passkey: int | None = None
    numeric_values: tuple[int, int] | None = None

    @property
    def success(self) -> bool:
        return self.error is None and self.initiator_keys is not None


def send_security_request(sim: Simulation, conn: Connection) -> None:
    """Slave asks the master to start pairing (Fig.-2 step 5 style poke)."""
    sim.medium.send(conn, conn.slave, Message.make("security_request", slave=conn.slave.name))


class PairingRun:
    def __init__(
        self,
        sim: Simulation,
        conn: Connection,
        initiator: Party,
        responder: Party,
        method_enforcer: Callable[[PairingMethod], SecurityError | None] | None = None,
    ):
        self.sim = sim
        self.conn = conn
        self.initiator = initiator
        self.responder = responder
        self.method_enforcer = method_enforcer
        self.sessions = {
            Role.INITIATOR: PairingSession(Role.INITIATOR),
            Role.RESPONDER: PairingSession(Role.RESPONDER),
        }
        self.method: PairingMethod | None = None
        self.outcome = PairingOutcome()
        # per-side views of the ordered phase 1-2 transcript
        self.initiator_view: list[bytes] = []
        self.responder_view: list[bytes] = []
        self._keypairs: dict[Role, crypto.KeyPair] = {}
        self._nonces: dict[Role, bytes] = {}
        self._dh: dict[Role, bytes] = {}
        self._stage1_pending: dict | None = None

    # -- plumbing -----------------------------------------------------------
    def _party(self, role: Role) -> Party:
        return self.initiator if role is Role.INITIATOR else self.responder

    def _send(self, role: Role, kind: str, **fields: object) -> Message:
        msg = Message.make(kind, **fields)
        self.sim.medium.send(self.conn, self._party(role).node, msg)
        encoded = msg.encode()
        self.initiator_view.append(encoded)
        self.responder_view.append(encoded)
        return msg

    def _fail(self, error: SecurityError, sender: Role = Role.INITIATOR) -> SecurityError:
        for session in self.sessions.values():
            if session.state is not SessionState.FAILED:
                session.fail(error)
        if self.conn.alive:
            msg = Message.make("pairing_failed", code=error.wire_byte(), reason=error.code.name)
            self.sim.medium.send(self.conn, self._party(sender).node, msg)
        self.outcome.error = error
        self.sim.log_security(f"pairing failed: {error}")
        return error

    # -- phase 1 ------------------------------------------------------------
    def exchange_features(self) -> PairingMethod | SecurityError:
        i, r = self.initiator, self.responder
        self._send(
            Role.INITIATOR, "pairing_request",
            io=i.features.io.value, mitm=int(i.features.mitm), sc=int(i.features.sc),
            bonding=int(i.features.bonding), oob=int(i.features.oob), addr=str(i.address),
        )
        # The responder can evaluate everything as soon as the request is in:
        # it refuses with a pairing-failed packet instead of responding.
        gate = self._responder_policy_gate(i.features)
        if gate is not None:
            return self._fail(gate, Role.RESPONDER)
        method = method_for(i.features, r.features)
        if isinstance(method, SecurityError):
            return self._fail(method, Role.RESPONDER)
        gate = self._responder_method_gate(method)
        if gate is not None:
            return self._fail(gate, Role.RESPONDER)
        self._send(
            Role.RESPONDER, "pairing_response",
            io=r.features.io.value, mitm=int(r.features.mitm), sc=int(r.features.sc),
            bonding=int(r.features.bonding), oob=int(r.features.oob), addr=str(r.address),
        )
        # Initiator-side enforcement hook: fires once the negotiated method
        # is known, before any key material moves.
        if self.method_enforcer is not None:
            veto = self.method_enforcer(method)
            if veto is not None:
                return self._fail(veto, Role.INITIATOR)
        self.method = method
        self.outcome.method = method
        for session in self.sessions.values():
            session.advance(SessionState.FEATURES_EXCHANGED)
            session.negotiated = method
        self.sim.log("smp", f"{i.name}<->{r.name} negotiated {method.value}")
        return method

    def _responder_policy_gate(self, initiator_features: PairingFeatures) -> SecurityError | None:
        policy = self.responder.policy
        if not policy.enabled:
            return None
        if policy.enforcement is ScEnforcement.TI_SC_BIT_ONLY:
            # The broken check: SC bit present? Then anything goes.
            if not initiator_features.sc:
                return SecurityError(
                    SecurityErrorCode.AUTHENTICATION_REQUIREMENTS, "secure connections bit required"
                )
        return None

    def _responder_method_gate(self, method: PairingMethod) -> SecurityError | None:
        policy = self.responder.policy
        if not policy.enabled or policy.enforcement is not ScEnforcement.CORRECT:
            return None
        if method.authenticated:
            return None
        cached = self.responder.cached_bond
        if self.responder.ltk_property_caching and cached is not None and cached.authenticated:
            # Key-property caching bug: a bonded identity's old
            # authenticated flag stands in for the new pairing's, so the
            # level-4 check passes even for JustWorks.
            self.sim.log("smp", f"{self.responder.name} reused cached key property for {self.initiator.address}")
            return None
        return SecurityError(
            SecurityErrorCode.AUTHENTICATION_REQUIREMENTS,
            f"secure-connections-only mode refuses {method.value}",
        )

    # -- phase 2 ------------------------------------------------------------
    def exchange_public_keys(self) -> None:
        rng = self.sim.rng
        for role in (Role.INITIATOR, Role.RESPONDER):
            self._keypairs[role] = crypto.KeyPair.generate(rng)
            self._nonces[role] = crypto.new_nonce(rng)
        self._send(Role.INITIATOR, "public_key", key=self._keypairs[Role.INITIATOR].public)
        self._send(Role.RESPONDER, "public_key", key=self._keypairs[Role.RESPONDER].public)
        self._dh[Role.INITIATOR] = crypto.key_agreement(
            self._keypairs[Role.INITIATOR].private, self._keypairs[Role.RESPONDER].public
        )
        self._dh[Role.RESPONDER] = crypto.key_agreement(
            self._keypairs[Role.RESPONDER].private, self._keypairs[Role.INITIATOR].public
        )
        for session in self.sessions.values():
            session.advance(SessionState.PUBLIC_KEYS_EXCHANGED)

    def auth_stage1(self) -> SecurityError | None:
        self.stage1_display()
        return self.stage1_decide()

    def stage1_display(self) -> None:
        """Run stage 1 up to the point where user decisions are needed."""
        method = self.method
        if method is None:
            raise RuntimeError("stage 1 before feature exchange")
        pk_i = self._keypairs[Role.INITIATOR].public
        pk_r = self._keypairs[Role.RESPONDER].public
        pending: dict = {"method": method}

        if method is PairingMethod.PASSKEY_ENTRY:
            display, entry = self._passkey_sides()
            passkey = display.passkey_override
            if passkey is None:
                passkey = self.sim.rng.randrange(crypto.PASSKEY_SPACE)
            self.outcome.displayed_passkey = passkey
            self.sim.log("smp", f"{display.name} displays passkey {passkey:06d}")
            for party in (self.initiator, self.responder):
                party.notify_variant("Pin")
            display.show_passkey(passkey)
            typed = entry.provide_passkey()
            pending.update(display=display, entry=entry, passkey=passkey, typed=typed)
            # commitments are exchanged before the nonces are revealed
            p_i = passkey if display is self.initiator else typed
            p_r = passkey if display is self.responder else typed
            c_i = crypto.passkey_commit(pk_i, pk_r, p_i or 0, self._nonces[Role.INITIATOR])
            c_r = crypto.passkey_commit(pk_i, pk_r, p_r or 0, self._nonces[Role.RESPONDER])
            self._send(Role.INITIATOR, "passkey_commit", value=c_i)
            self._send(Role.RESPONDER, "passkey_commit", value=c_r)
            pending.update(p_i=p_i, p_r=p_r, c_i=c_i, c_r=c_r)

        self._send(Role.INITIATOR, "nonce", value=self._nonces[Role.INITIATOR])
        self._send(Role.RESPONDER, "nonce", value=self._nonces[Role.RESPONDER])

        if method is PairingMethod.NUMERIC_COMPARISON:
            value = crypto.numeric_value(
                pk_i, pk_r, self._nonces[Role.INITIATOR], self._nonces[Role.RESPONDER]
            )
            self.outcome.numeric_values = (value, value)
            self.sim.log("smp", f"displays show {value:06d} on {self.initiator.name} and {self.responder.name}")
            for party in (self.initiator, self.responder):
                party.notify_variant("PasskeyConfirmation")
                party.show_number(value)
        elif method is PairingMethod.OUT_OF_BAND:
            checks = {}
            for role in (Role.INITIATOR, Role.RESPONDER):
                secret = self._party(role).oob_secret or b""
                checks[role] = crypto.oob_check(
                    secret, self._nonces[Role.INITIATOR], self._nonces[Role.RESPONDER]
                )
                self._send(role, "oob_check", value=checks[role])
            pending["oob_checks"] = checks
        self._stage1_pending = pending

    def stage1_decide(self) -> SecurityError | None:
        pending = self._stage1_pending
        if pending is None:
            raise RuntimeError("stage1_decide without stage1_display")
        self._stage1_pending = None
        method = pending["method"]

        if method is PairingMethod.NUMERIC_COMPARISON:
            for party in (self.initiator, self.responder):
                if not party.confirm_numeric():
                    self.sim.log_security(f"{party.name}: numeric comparison rejected by user")
                    return self._fail(
                        SecurityError(SecurityErrorCode.PAIRING_AUTH_FAIL, "numeric comparison rejected")
                    )
        elif method is PairingMethod.PASSKEY_ENTRY:
            if pending["typed"] is None:
                return self._fail(
                    SecurityError(SecurityErrorCode.PAIRING_AUTH_FAIL, "no passkey entered")
                )
            pk_i = self._keypairs[Role.INITIATOR].public
            pk_r = self._keypairs[Role.RESPONDER].public
            # each side rechecks the peer's commitment against its own passkey
            ok_r = pending["c_i"] == crypto.passkey_commit(
                pk_i, pk_r, pending["p_r"], self._nonces[Role.INITIATOR]
            )
            ok_i = pending["c_r"] == crypto.passkey_commit(
                pk_i, pk_r, pending["p_i"], self._nonces[Role.RESPONDER]
            )
            if not (ok_i and ok_r):
                return self._fail(
                    SecurityError(SecurityErrorCode.PAIRING_AUTH_FAIL, "passkey commitment mismatch")
                )
        elif method is PairingMethod.OUT_OF_BAND:
            checks = pending["oob_checks"]
            if checks[Role.INITIATOR] != checks[Role.RESPONDER]:
                return self._fail(
                    SecurityError(SecurityErrorCode.PAIRING_AUTH_FAIL, "out-of-band secret mismatch")
                )

        for session in self.sessions.values():
            session.advance(SessionState.AUTH1_DONE)
        return None

    def _passkey_sides(self) -> tuple[Party, Party]:
        """Returns (display side, entry side) for passkey entry."""
        i, r = self.initiator, self.responder
        if i.features.io.can_input and r.features.io.can_display:
            return r, i
        if r.features.io.can_input and i.features.io.can_display:
            return i, r
        raise RuntimeError("passkey entry negotiated without a display/keyboard split")

    # -- stage 2 ------------------------------------------------------------
    def auth_stage2(self) -> SecurityError | None:
        digest_i = crypto.transcript_digest(self.initiator_view)
        digest_r = crypto.transcript_digest(self.responder_view)
        addr_i, addr_r = self.initiator.address, self.responder.address
        n_i, n_r = self._nonces[Role.INITIATOR], self._nonces[Role.RESPONDER]
        mac_i, ltk_i = crypto.derive_keys(self._dh[Role.INITIATOR], n_i, n_r, addr_i, addr_r)
        mac_r, ltk_r = crypto.derive_keys(self._dh[Role.RESPONDER], n_i, n_r, addr_i, addr_r)

        check_i = crypto.dhkey_check(mac_i, b"I" + digest_i)
        check_r = crypto.dhkey_check(mac_r, b"R" + digest_r)
        self._send(Role.INITIATOR, "dhkey_check", value=check_i)
        self._send(Role.RESPONDER, "dhkey_check", value=check_r)
        ok_at_r = check_i == crypto.dhkey_check(mac_r, b"I" + digest_r)
        ok_at_i = check_r == crypto.dhkey_check(mac_i, b"R" + digest_i)
        if not (ok_at_i and ok_at_r):
            return self._fail(
                SecurityError(SecurityErrorCode.PAIRING_AUTH_FAIL, "key confirmation failed")
            )

        authenticated = self.method.authenticated
        self.outcome.initiator_keys = KeySet(self._dh[Role.INITIATOR], mac_i, ltk_i, authenticated)
        self.outcome.responder_keys = KeySet(self._dh[Role.RESPONDER], mac_r, ltk_r, authenticated)
        for session, keys in (
            (self.sessions[Role.INITIATOR], self.outcome.initiator_keys),
            (self.sessions[Role.RESPONDER], self.outcome.responder_keys),
        ):
            session.advance(SessionState.AUTH2_DONE)
            session.keys = keys
        return None

    # -- phase 3 ------------------------------------------------------------
    def distribute_keys(self) -> None:
        """Encrypt the link with the fresh LTK, then exchange identity info.

        Responder distributes first. Only sides with a privacy
        requirement hand out their IRK and public identity.
        """
        ltk = self.outcome.initiator_keys.ltk
        salt = self.conn.conn_id.to_bytes(4, "big") + self.sim.rng.randbytes(8)
        self._send(Role.INITIATOR, "session_start", salt=salt)
        auth = self.method.authenticated
        self.conn.enable_encryption(crypto.session_key(ltk, salt), auth, auth)

        for role in (Role.RESPONDER, Role.INITIATOR):
            party = self._party(role)
            if not party.privacy_required:
                continue
            if party.irk is None or party.identity is None:
                raise RuntimeError(f"{party.name} requires privacy but has no irk/identity")
            msg = Message.make("identity_info", irk=party.irk, identity=str(party.identity))
            self.sim.medium.send(self.conn, party.node, msg)
            if role is Role.RESPONDER:
                self.outcome.initiator_learned_irk = party.irk
                self.outcome.initiator_learned_identity = party.identity
            else:
                self.outcome.responder_learned_irk = party.irk
                self.outcome.responder_learned_identity = party.identity
        for session in self.sessions.values():
            session.advance(SessionState.KEYS_DISTRIBUTED)
        self.sim.log("smp", f"pairing complete: {self.method.value}, authenticated={auth}")

    # -- straight-through ----------------------------------------------------
    def run(self) -> PairingOutcome:
        method = self.exchange_features()
        if isinstance(method, SecurityError):
            return self.outcome
        self.exchange_public_keys()
        if self.auth_stage1() is not None:
            return self.outcome
        if self.auth_stage2() is not None:
            return self.outcome
        self.distribute_keys()
        return self.outcome
