"""AES-128/EAX envelopes for chunk payloads.

Wire layout of a framed envelope (little-endian)::

    "PFE1" | version u8 | round u64 | client u32 | length u32 | nonce[16] | tag[16] | ciphertext

The 21 header bytes (magic through length) are authenticated as EAX
associated data, so rewriting the round or client id fails verification
just like flipping a ciphertext bit.
"""

from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass, replace
from typing import Callable

from Crypto.Cipher import AES

MAGIC = b"PFE1"
VERSION = 1
KEY_BYTES = 16
NONCE_BYTES = 16
TAG_BYTES = 16
HEADER_STRUCT = struct.Struct("<4sBQII")
HEADER_BYTES = HEADER_STRUCT.size  # 21
OVERHEAD_BYTES = NONCE_BYTES + TAG_BYTES  # 32
MAX_PAYLOAD = 2**32 - 1


class AuthFailure(Exception):
    """Tag verification failed; the round must be abandoned."""


class ReplayError(Exception):
    """Envelope round does not match what the receiver expects."""


class SecretKey:
    __slots__ = ("_material",)

    def __init__(self, material: bytes) -> None:
        if len(material) != KEY_BYTES:
            raise ValueError(f"AES-128 key must be {KEY_BYTES} bytes, got {len(material)}")
        self._material = bytes(material)

    @property
    def material(self) -> bytes:
        return self._material

    def __repr__(self) -> str:  # never leak key bytes into logs
        return "SecretKey(<redacted>)"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SecretKey) and secrets.compare_digest(self._material, other._material)

    def __hash__(self) -> int:
        return hash(self._material)


def keygen(entropy: Callable[[int], bytes] = secrets.token_bytes) -> SecretKey:
    return SecretKey(entropy(KEY_BYTES))


@dataclass(frozen=True)
class Header:
    round: int
    client_id: int
    payload_length: int = 0
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return HEADER_STRUCT.pack(MAGIC, self.version, self.round, self.client_id, self.payload_length)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Header":
        magic, version, rnd, client, length = HEADER_STRUCT.unpack(raw[:HEADER_BYTES])
        if magic != MAGIC:
            raise ValueError(f"bad envelope magic {magic!r}")
        return cls(rnd, client, length, version)


@dataclass(frozen=True)
class Envelope:
    header: Header
    nonce: bytes
    tag: bytes
    ciphertext: bytes

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_BYTES or len(self.tag) != TAG_BYTES:
            raise ValueError("nonce and tag must be 16 bytes each")
        if len(self.ciphertext) != self.header.payload_length:
            raise ValueError("ciphertext length disagrees with header")

    @property
    def wire_size(self) -> int:
        return HEADER_BYTES + OVERHEAD_BYTES + len(self.ciphertext)

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.nonce + self.tag + self.ciphertext


def wire_size(payload_length: int) -> int:
    return HEADER_BYTES + OVERHEAD_BYTES + payload_length


def seal(sk: SecretKey, header: Header, payload: bytes,
         nonce_source: Callable[[int], bytes] = secrets.token_bytes) -> Envelope:
    """Encrypt ``payload`` under a fresh random nonce, binding ``header``."""
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload too large for a u32 length field")
    header = replace(header, payload_length=len(payload))
    nonce = nonce_source(NONCE_BYTES)
    cipher = AES.new(sk.material, AES.MODE_EAX, nonce=nonce, mac_len=TAG_BYTES)
    cipher.update(header.to_bytes())
    ct, tag = cipher.encrypt_and_digest(payload)
    return Envelope(header, nonce, tag, ct)


def open(sk: SecretKey, env: Envelope) -> bytes:  # noqa: A001 - mirrors seal/open naming
    """Return the plaintext iff the tag verifies, else raise :class:`AuthFailure`."""
    cipher = AES.new(sk.material, AES.MODE_EAX, nonce=env.nonce, mac_len=TAG_BYTES)
    cipher.update(env.header.to_bytes())
    try:
        return cipher.decrypt_and_verify(env.ciphertext, env.tag)
    except ValueError:
        raise AuthFailure(
            f"envelope from client {env.header.client_id}, round {env.header.round} failed verification"
        ) from None


class ReplayGuard:
    """Per-receiver record of the latest round accepted from each client."""

    def __init__(self) -> None:
        self._latest: dict[int, int] = {}

    def accept(self, header: Header, expected_round: int) -> None:
        client = header.client_id
        if header.round != expected_round:
            raise ReplayError(
                f"client {client} sent round {header.round}, expected {expected_round}"
            )
        if self._latest.get(client, -1) >= header.round:
            raise ReplayError(f"duplicate or stale envelope from client {client} for round {header.round}")
        self._latest[client] = header.round

    def latest(self, client: int) -> int | None:
        return self._latest.get(client)
