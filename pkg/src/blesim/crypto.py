"""Cryptographic building blocks for pairing and link encryption.

Curve25519 key agreement, the six-digit comparison value, passkey
commitments, MacKey/LTK derivation, the key-confirmation check value,
resolvable private addresses and AES-CCM session encryption. All
randomness comes from the caller (the simulation scheduler's seeded
RNG); nothing here touches a global RNG, so results are reproducible
and pinned by golden vectors in the test suite.

Nonces, IRKs, LTKs and session keys are plain ``bytes`` (16), DH keys
are 32 bytes.
"""
from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESCCM

from .model import AddressKind, DeviceAddress

KEY_LEN = 16
DH_LEN = 32
PASSKEY_SPACE = 1_000_000

# Domain-separation tags; freezing them freezes every derived vector.
_TAG_NUMERIC = b"blesim/numeric/v1"
_TAG_COMMIT = b"blesim/commit/v1"
_TAG_DERIVE = b"blesim/derive/v1"
_TAG_CHECK = b"blesim/check/v1"
_TAG_RPA = b"blesim/rpa/v1"
_TAG_SESSION = b"blesim/session/v1"
_TAG_OOB = b"blesim/oob/v1"


class DecryptError(Exception):
    """Authenticated decryption failed (wrong key or tampered ciphertext)."""


@dataclass(frozen=True)
class KeyPair:
    private: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: random.Random) -> KeyPair:
        private = rng.randbytes(DH_LEN)
        public = X25519PrivateKey.from_private_bytes(private).public_key().public_bytes_raw()
        return cls(private, public)


def new_nonce(rng: random.Random) -> bytes:
    return rng.randbytes(KEY_LEN)


def new_irk(rng: random.Random) -> bytes:
    return rng.randbytes(KEY_LEN)


def key_agreement(own_private: bytes, peer_public: bytes) -> bytes:
    """Curve25519 shared secret. Raises ValueError on a malformed point."""
    if len(peer_public) != DH_LEN:
        raise ValueError("public key must be 32 bytes")
    private = X25519PrivateKey.from_private_bytes(own_private)
    return private.exchange(X25519PublicKey.from_public_bytes(peer_public))


def numeric_value(pk_a: bytes, pk_b: bytes, n_a: bytes, n_b: bytes) -> int:
    """The six-digit number both displays show during numeric comparison."""
    digest = hashlib.sha256(_TAG_NUMERIC + pk_a + pk_b + n_a + n_b).digest()
    return int.from_bytes(digest[:8], "big") % PASSKEY_SPACE


def passkey_commit(pk_a: bytes, pk_b: bytes, passkey: int, nonce: bytes) -> bytes:
    """Commitment binding both public keys and the passkey under a nonce."""
    if not 0 <= passkey < PASSKEY_SPACE:
        raise ValueError(f"passkey out of range: {passkey}")
    msg = _TAG_COMMIT + pk_a + pk_b + passkey.to_bytes(4, "big")
    return hmac.new(nonce, msg, hashlib.sha256).digest()[:KEY_LEN]


def derive_keys(
    dh_key: bytes,
    n_a: bytes,
    n_b: bytes,
    addr_a: DeviceAddress,
    addr_b: DeviceAddress,
) -> tuple[bytes, bytes]:
    """Derive (MacKey, LTK) from the shared secret and the session context."""
    msg = _TAG_DERIVE + n_a + n_b + addr_a.value + addr_b.value
    block = hmac.new(dh_key, msg, hashlib.sha256).digest()
    return block[:KEY_LEN], block[KEY_LEN : 2 * KEY_LEN]


def dhkey_check(mac_key: bytes, transcript_digest: bytes) -> bytes:
    """Key-confirmation value over the ordered pairing transcript."""
    return hmac.new(mac_key, _TAG_CHECK + transcript_digest, hashlib.sha256).digest()[:KEY_LEN]


def oob_check(secret: bytes, n_a: bytes, n_b: bytes) -> bytes:
    """Proof of holding the pre-shared out-of-band secret, bound to the nonces."""
    return hmac.new(secret, _TAG_OOB + n_a + n_b, hashlib.sha256).digest()[:KEY_LEN]


def transcript_digest(messages: list[bytes]) -> bytes:
    h = hashlib.sha256()
    for encoded in messages:
        h.update(len(encoded).to_bytes(4, "big"))
        h.update(encoded)
    return h.digest()


def _rpa_hash(irk: bytes, prand: int) -> int:
    digest = hmac.new(irk, _TAG_RPA + prand.to_bytes(3, "big"), hashlib.sha256).digest()
    return int.from_bytes(digest[:3], "big")


def rpa_generate(irk: bytes, prand: int) -> DeviceAddress:
    """Build a resolvable private address: 0b01 | prand(22) | hash(24)."""
    if not 0 <= prand < (1 << 22):
        raise ValueError("prand must fit in 22 bits")
    addr = (0b01 << 46) | (prand << 24) | _rpa_hash(irk, prand)
    return DeviceAddress(AddressKind.RESOLVABLE_PRIVATE, addr.to_bytes(6, "big"))


def rpa_resolve(irk: bytes, addr: DeviceAddress) -> bool:
    """True iff the address's embedded hash verifies under this IRK."""
    if addr.kind is not AddressKind.RESOLVABLE_PRIVATE:
        return False
    raw = int.from_bytes(addr.value, "big")
    prand = (raw >> 24) & ((1 << 22) - 1)
    return (raw & 0xFFFFFF) == _rpa_hash(irk, prand)


def random_rpa(irk: bytes, rng: random.Random) -> DeviceAddress:
    return rpa_generate(irk, rng.getrandbits(22))


def session_key(ltk: bytes, salt: bytes) -> bytes:
    """Per-connection session key derived from the bonded LTK."""
    return hmac.new(ltk, _TAG_SESSION + salt, hashlib.sha256).digest()[:KEY_LEN]


def _ccm_nonce(counter: int, direction: int) -> bytes:
    # 13-byte CCM nonce: 1 direction byte + 96-bit message counter.
    return bytes([direction & 0xFF]) + counter.to_bytes(12, "big")


def session_encrypt(key: bytes, counter: int, plaintext: bytes, direction: int = 0) -> bytes:
    return AESCCM(key).encrypt(_ccm_nonce(counter, direction), plaintext, None)


def session_decrypt(key: bytes, counter: int, ciphertext: bytes, direction: int = 0) -> bytes:
    try:
        return AESCCM(key).decrypt(_ccm_nonce(counter, direction), ciphertext, None)
    except InvalidTag as exc:
        raise DecryptError("session decrypt failed: bad key or tampered data") from exc
