"""Signing, digests, and quorum-certificate assembly.

Every structure that crosses a node boundary is serialized canonically
(little-endian fixed-width integers, length-prefixed byte strings,
fields in declaration order) and hashed to a 32-byte digest.  A quorum
certificate binds a set of signatures over one digest to a threshold:
2f+1 signatures certify agreement on a batch, f+1 signatures certify a
client-visible claim such as a Merkle root or a prepare vote.

Two signature schemes live behind the same interface.  Ed25519 is the
realistic default for a deployment.  The keyed-hash scheme is a test
double: verification recomputes the keyed hash, so the "public" key
equals the signing key and it is only meaningful inside the simulator,
where byzantine behavior is modelled explicitly rather than assumed
away.  It is roughly two orders of magnitude faster, which matters for
large seeded simulation campaigns.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, fields, is_dataclass
from typing import Any, Callable, Iterable

DIGEST_SIZE = 32

# One-byte type tags keep the canonical encoding unambiguous: without
# them the int 0 and the empty byte string would collide.
_TAG_INT = b"\x01"
_TAG_BYTES = b"\x02"
_TAG_STR = b"\x03"
_TAG_SEQ = b"\x04"
_TAG_NONE = b"\x05"
_TAG_BOOL = b"\x06"
_TAG_STRUCT = b"\x07"


class EncodingError(TypeError):
    """Value has no canonical encoding."""


def canonical_encode(value: Any) -> bytes:
    """Serialize a value so that every node produces identical bytes.

    Integers are signed 64-bit little-endian, byte strings and text are
    length-prefixed, sequences are count-prefixed, and dataclasses are
    encoded field by field in declaration order under their class name.
    """
    out = bytearray()
    _encode_into(out, value)
    return bytes(out)


# Field lists (and the encoded struct header) per dataclass, resolved
# once: dataclasses.fields() is far too slow to call per encode.
_STRUCT_CACHE: dict[type, tuple[bytes, tuple[str, ...]]] = {}

# Types whose instances never change after construction and are shared
# widely (a transaction appears in a proposal, in every validator's
# re-derived batch, and in commit records); their encodings are stashed
# on the instance the first time.
_MEMO_TYPES: set[type] = set()


def memoize_encoding(cls: type) -> type:
    """Register an immutable dataclass for per-instance encode caching."""
    _MEMO_TYPES.add(cls)
    return cls


def _struct_layout(cls: type) -> tuple[bytes, tuple[str, ...]]:
    layout = _STRUCT_CACHE.get(cls)
    if layout is None:
        name = cls.__name__.encode("utf-8")
        header = _TAG_STRUCT + len(name).to_bytes(4, "little") + name
        layout = (header, tuple(f.name for f in fields(cls)))
        _STRUCT_CACHE[cls] = layout
    return layout


def _encode_into(out: bytearray, value: Any) -> None:
    cls = type(value)
    if cls is int:
        out += _TAG_INT
        out += value.to_bytes(8, "little", signed=True)
    elif cls is str:
        raw = value.encode("utf-8")
        out += _TAG_STR
        out += len(raw).to_bytes(4, "little")
        out += raw
    elif cls is bytes:
        out += _TAG_BYTES
        out += len(value).to_bytes(4, "little")
        out += value
    elif cls is tuple or cls is list:
        out += _TAG_SEQ
        out += len(value).to_bytes(4, "little")
        for item in value:
            _encode_into(out, item)
    elif value is None:
        out += _TAG_NONE
    elif cls is bool:
        out += _TAG_BOOL
        out += b"\x01" if value else b"\x00"
    elif is_dataclass(value) and not isinstance(value, type):
        header, names = _struct_layout(cls)
        if cls in _MEMO_TYPES:
            encoded = value.__dict__.get("_canonical")
            if encoded is None:
                buf = bytearray(header)
                for name in names:
                    _encode_into(buf, getattr(value, name))
                encoded = bytes(buf)
                value.__dict__["_canonical"] = encoded
            out += encoded
            return
        out += header
        for name in names:
            _encode_into(out, getattr(value, name))
    elif isinstance(value, bool):
        out += _TAG_BOOL
        out += b"\x01" if value else b"\x00"
    elif isinstance(value, int):
        out += _TAG_INT
        out += value.to_bytes(8, "little", signed=True)
    elif isinstance(value, bytes):
        out += _TAG_BYTES
        out += len(value).to_bytes(4, "little")
        out += value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _TAG_STR
        out += len(raw).to_bytes(4, "little")
        out += raw
    elif isinstance(value, (list, tuple)):
        out += _TAG_SEQ
        out += len(value).to_bytes(4, "little")
        for item in value:
            _encode_into(out, item)
    else:
        raise EncodingError(f"no canonical encoding for {type(value).__name__}")


def digest_of(value: Any) -> bytes:
    """32-byte digest over the canonical encoding of ``value``.

    Hashable values (the frozen claim dataclasses, mostly) go through a
    bounded cache: every replica in a cluster digests the same claims.
    """
    try:
        return _digest_cached(value)
    except TypeError:
        return hashlib.sha256(canonical_encode(value)).digest()


@functools.lru_cache(maxsize=16384)
def _digest_cached(value: Any) -> bytes:
    return hashlib.sha256(canonical_encode(value)).digest()


@dataclass(frozen=True)
class NodeKeyPair:
    node_id: str
    public_key: bytes
    secret_key: bytes


@dataclass(frozen=True)
class Signature:
    signer: str
    bytes: bytes  # noqa: A003 - field name is the natural one


class SignatureScheme:
    """Interface shared by the real and the test-double scheme."""

    name: str

    def keygen(self, node_id: str, seed: bytes) -> NodeKeyPair:
        raise NotImplementedError

    def sign(self, secret_key: bytes, digest: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public_key: bytes, digest: bytes, sig: bytes) -> bool:
        raise NotImplementedError


class KeyedHashScheme(SignatureScheme):
    """Deterministic keyed-hash signatures (simulation only).

    The verifier holds the same key material as the signer, so this
    provides authentication only against the simulated message layer,
    not against a real adversary.
    """

    name = "keyed-hash"

    def keygen(self, node_id: str, seed: bytes) -> NodeKeyPair:
        secret = hashlib.blake2b(
            node_id.encode("utf-8") + seed, digest_size=32
        ).digest()
        return NodeKeyPair(node_id, public_key=secret, secret_key=secret)

    def sign(self, secret_key: bytes, digest: bytes) -> bytes:
        if len(digest) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")
        return hashlib.blake2b(digest, key=secret_key, digest_size=32).digest()

    def verify(self, public_key: bytes, digest: bytes, sig: bytes) -> bool:
        if len(digest) != DIGEST_SIZE:
            return False
        expect = hashlib.blake2b(digest, key=public_key, digest_size=32).digest()
        return sig == expect


class Ed25519Scheme(SignatureScheme):
    """Real asymmetric signatures via the cryptography package."""

    name = "ed25519"

    def keygen(self, node_id: str, seed: bytes) -> NodeKeyPair:
        from cryptography.hazmat.primitives.asymmetric import ed25519

        material = hashlib.blake2b(
            node_id.encode("utf-8") + seed, digest_size=32
        ).digest()
        sk = ed25519.Ed25519PrivateKey.from_private_bytes(material)
        pub = sk.public_key().public_bytes_raw()
        return NodeKeyPair(node_id, public_key=pub, secret_key=material)

    def sign(self, secret_key: bytes, digest: bytes) -> bytes:
        from cryptography.hazmat.primitives.asymmetric import ed25519

        if len(digest) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")
        sk = ed25519.Ed25519PrivateKey.from_private_bytes(secret_key)
        return sk.sign(digest)

    def verify(self, public_key: bytes, digest: bytes, sig: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.asymmetric import ed25519

        try:
            pk = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
            pk.verify(sig, digest)
            return True
        except (InvalidSignature, ValueError):
            return False


SCHEMES: dict[str, SignatureScheme] = {
    "keyed-hash": KeyedHashScheme(),
    "ed25519": Ed25519Scheme(),
}


class InsufficientSignatures(Exception):
    def __init__(self, valid_count: int, threshold: int):
        super().__init__(f"{valid_count} valid signatures, need {threshold}")
        self.valid_count = valid_count
        self.threshold = threshold


@dataclass(frozen=True)
class QuorumCertificate:
    digest: bytes
    signatures: tuple[Signature, ...]
    threshold: int


def assemble_certificate(
    digest: bytes,
    signatures: Iterable[Signature],
    threshold: int,
    public_key_of: Callable[[str], bytes],
    scheme: SignatureScheme,
) -> QuorumCertificate:
    """Build a certificate from raw collected signatures.

    Invalid signatures are dropped and duplicate signers are collapsed
    to one entry.  Candidates are taken in signer order and verification
    stops once the threshold is met, so the certificate carries exactly
    ``threshold`` valid signatures.
    """
    candidates: dict[str, Signature] = {}
    for sig in signatures:
        candidates.setdefault(sig.signer, sig)
    kept: list[Signature] = []
    for signer in sorted(candidates):
        sig = candidates[signer]
        try:
            public = public_key_of(signer)
        except KeyError:
            continue
        if scheme.verify(public, digest, sig.bytes):
            kept.append(sig)
            if len(kept) == threshold:
                break
    if len(kept) < threshold:
        raise InsufficientSignatures(len(kept), threshold)
    return QuorumCertificate(digest=digest, signatures=tuple(kept), threshold=threshold)


def verify_certificate(
    cert: QuorumCertificate,
    public_key_of: Callable[[str], bytes],
    scheme: SignatureScheme,
    expected_digest: bytes | None = None,
) -> bool:
    """Check a certificate: distinct signers, all valid, threshold met."""
    if expected_digest is not None and cert.digest != expected_digest:
        return False
    signers = {s.signer for s in cert.signatures}
    if len(signers) != len(cert.signatures):
        return False
    valid = 0
    for sig in cert.signatures:
        try:
            public = public_key_of(sig.signer)
        except KeyError:
            return False
        if not scheme.verify(public, cert.digest, sig.bytes):
            return False
        valid += 1
    return valid >= cert.threshold
