"""Signature layer: key registry, signed envelopes, stapled signatures.

Messages are signed over a 16-byte domain-separation context followed by the
canonical encoding of the message.  The context binds the signature to a
sub-protocol tag (a kind byte plus an 8-byte natural, e.g. a view number),
so a prepare signature can never be replayed as a commit signature and a
signature from one view is rejected in any other view.

Envelopes carry the root payload and signature plus the flat list of stapled
(signer, payload, signature) triples.  A message codec's extractor declares
which staples belong to a message; transmit-time validation re-encodes each
stapled message and verifies its signature, which catches byte-level
re-encoding bugs at the sender instead of silently losing liveness at the
receiver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec

PROTOCOL_ID = b"BFTKIT1"  # 7 bytes; context = id + kind byte + u64 tag value
SIG_LEN = 64
PUBKEY_LEN = 32

NodeID = int
Tag = tuple[int, int]  # (kind byte, natural value)


class AuthError(Exception):
    """Base class for authentication failures (silent drop at the runtime)."""


class RootSigInvalid(AuthError):
    pass


class StapleMismatch(AuthError):
    """Extractor output disagrees with the envelope's staple list."""


class StapleSigInvalid(AuthError):
    pass


class DecodeFailure(AuthError):
    """Envelope payload does not decode to a message."""


class StapleInvalidAtTransmit(Exception):
    """A message about to be sent carries an unverifiable staple.

    Deliberately not an AuthError: this is a hard failure at the sender, not
    a droppable receive-path condition.
    """


def signing_context(tag: Tag) -> bytes:
    kind, value = tag
    ctx = PROTOCOL_ID + codec.u8(kind) + codec.u64(value)
    assert len(ctx) == 16
    return ctx


@dataclass(frozen=True)
class Staple:
    """One stapled signed message: who signed it, the message, the signature."""

    signer: NodeID
    msg: object
    sig: bytes


class MessageCodec(Protocol):
    """Canonical codec plus authentication metadata for one message type."""

    def encode(self, msg: object) -> bytes: ...

    def decode(self, payload: bytes) -> object: ...

    def tag_of(self, msg: object) -> Tag: ...

    def extract(self, msg: object) -> tuple[Staple, ...]: ...


@dataclass(frozen=True)
class Envelope:
    signer: NodeID
    payload: bytes
    root_sig: bytes
    staples: tuple[tuple[NodeID, bytes, bytes], ...] = ()


@dataclass(frozen=True)
class AuthenticatedMessage:
    signer: NodeID
    msg: object
    root_sig: bytes
    staples: tuple[Staple, ...] = ()


def generate_keypair() -> tuple[Ed25519PrivateKey, bytes]:
    priv = Ed25519PrivateKey.generate()
    return priv, priv.public_key().public_bytes_raw()


def keypair_from_seed(seed: bytes, node: NodeID) -> tuple[Ed25519PrivateKey, bytes]:
    """Deterministic key material so separately launched processes can agree
    on a cluster's keys from one shared secret."""
    import hashlib

    raw = hashlib.sha256(b"bftkit-key" + seed + codec.u64(node)).digest()
    priv = Ed25519PrivateKey.from_private_bytes(raw)
    return priv, priv.public_key().public_bytes_raw()


@dataclass
class KeyRegistry:
    """Cluster key material: every node's public key, plus our private key."""

    entries: dict[NodeID, tuple[bytes, str]]  # node -> (public key, address)
    local_id: NodeID
    local_key: Ed25519PrivateKey | None
    _pub_cache: dict[NodeID, Ed25519PublicKey] = field(default_factory=dict)
    _verify_cache: dict[tuple[NodeID, bytes, bytes], bool] = field(default_factory=dict)

    def public_key(self, node: NodeID) -> Ed25519PublicKey:
        if node not in self._pub_cache:
            if node not in self.entries:
                raise AuthError(f"unknown node {node}")
            self._pub_cache[node] = Ed25519PublicKey.from_public_bytes(self.entries[node][0])
        return self._pub_cache[node]

    def sign(self, payload: bytes, tag: Tag) -> bytes:
        if self.local_key is None:
            raise AuthError("no local private key")
        return self.local_key.sign(signing_context(tag) + payload)

    def verify(self, signer: NodeID, payload: bytes, sig: bytes, tag: Tag) -> bool:
        blob = signing_context(tag) + payload
        key = (signer, bytes(sig), blob)
        hit = self._verify_cache.get(key)
        if hit is not None:
            return hit
        try:
            self.public_key(signer).verify(sig, blob)
            ok = True
        except InvalidSignature:
            ok = False
        if len(self._verify_cache) > 65536:
            self._verify_cache.clear()
        self._verify_cache[key] = ok
        return ok


def validate_transmit(registry: KeyRegistry, msg: object, mc: MessageCodec) -> None:
    """Check every staple of an outgoing message verifies over its canonical
    re-encoding.  Raises StapleInvalidAtTransmit on the first bad staple."""
    for st in mc.extract(msg):
        payload = mc.encode(st.msg)
        if not registry.verify(st.signer, payload, st.sig, mc.tag_of(st.msg)):
            raise StapleInvalidAtTransmit(
                f"staple by node {st.signer} does not verify over re-encoded message"
            )


def build_envelope(
    registry: KeyRegistry, msg: object, mc: MessageCodec, sign_log: list | None = None
) -> Envelope:
    """Sign and frame a root message, carrying its staples alongside."""
    payload = mc.encode(msg)
    tag = mc.tag_of(msg)
    sig = registry.sign(payload, tag)
    if sign_log is not None:
        sign_log.append((registry.local_id, tag, payload))
    staples = tuple((st.signer, mc.encode(st.msg), st.sig) for st in mc.extract(msg))
    return Envelope(signer=registry.local_id, payload=payload, root_sig=sig, staples=staples)


def validate_receive(registry: KeyRegistry, env: Envelope, mc: MessageCodec) -> AuthenticatedMessage:
    """Decode and authenticate an inbound envelope.

    Order of checks: decode, root signature, extractor/envelope agreement,
    staple signatures.  Each failure raises a distinct AuthError subtype.
    """
    try:
        msg = mc.decode(env.payload)
    except codec.DecodeError as e:
        raise DecodeFailure(str(e)) from e
    if not registry.verify(env.signer, env.payload, env.root_sig, mc.tag_of(msg)):
        raise RootSigInvalid(f"root signature by node {env.signer} invalid")
    extracted = mc.extract(msg)
    if len(extracted) != len(env.staples):
        raise StapleMismatch(
            f"extractor yields {len(extracted)} staples, envelope carries {len(env.staples)}"
        )
    for st, (e_signer, e_payload, e_sig) in zip(extracted, env.staples):
        if st.signer != e_signer or mc.encode(st.msg) != e_payload or st.sig != e_sig:
            raise StapleMismatch("extractor disagrees with envelope staple")
        if not registry.verify(st.signer, e_payload, e_sig, mc.tag_of(st.msg)):
            raise StapleSigInvalid(f"staple by node {st.signer} invalid")
    return AuthenticatedMessage(signer=env.signer, msg=msg, root_sig=env.root_sig, staples=extracted)


# --- wire framing (TCP mode) -------------------------------------------------
#
# Frame: 4-byte big-endian length, then the envelope bytes:
#   signer (u64) | payload (u32 len + bytes) | root_sig (64 bytes)
#   | staple count (u16) | each staple: signer (u64) + payload (u32 len
#   + bytes) + sig (64 bytes)


def encode_envelope(env: Envelope) -> bytes:
    out = bytearray()
    out += codec.u64(env.signer)
    out += codec.blob(env.payload)
    if len(env.root_sig) != SIG_LEN:
        raise ValueError("root signature must be 64 bytes")
    out += env.root_sig
    out += codec.u16(len(env.staples))
    for signer, payload, sig in env.staples:
        if len(sig) != SIG_LEN:
            raise ValueError("staple signature must be 64 bytes")
        out += codec.u64(signer)
        out += codec.blob(payload)
        out += sig
    return bytes(out)


def decode_envelope(data: bytes) -> Envelope:
    r = codec.Reader(data)
    signer = r.u64()
    payload = r.blob()
    root_sig = r.take(SIG_LEN)
    count = r.u16()
    staples = []
    for _ in range(count):
        s_signer = r.u64()
        s_payload = r.blob()
        s_sig = r.take(SIG_LEN)
        staples.append((s_signer, s_payload, s_sig))
    r.done()
    return Envelope(signer=signer, payload=payload, root_sig=root_sig, staples=tuple(staples))


def frame(data: bytes) -> bytes:
    return codec.u32(len(data)) + data


def read_frames(buffer: bytearray) -> Iterable[bytes]:
    """Pop complete frames off a growing receive buffer."""
    while len(buffer) >= 4:
        n = int.from_bytes(buffer[:4], "big")
        if len(buffer) < 4 + n:
            return
        yield bytes(buffer[4 : 4 + n])
        del buffer[: 4 + n]
