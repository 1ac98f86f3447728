"""Identifiers, the designated hash function and pluggable signature schemes."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass


class FixedBytes(bytes):
    """bytes of one exact length; renders as lowercase hex."""

    SIZE = 0

    def __new__(cls, value: bytes = b""):
        value = bytes(value)
        if len(value) != cls.SIZE:
            raise ValueError(f"{cls.__name__} needs {cls.SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str):
        if text.startswith("0x"):
            text = text[2:]
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return "0x" + self.hex()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.hex()[:12]})"


class Address(FixedBytes):
    SIZE = 20


class HashDigest(FixedBytes):
    SIZE = 32


ZERO_ADDRESS = Address(bytes(20))


def hash_bytes(data: bytes) -> HashDigest:
    return HashDigest(hashlib.sha256(data).digest())


EMPTY_DIGEST = hash_bytes(b"")


def address_of(public_key: bytes) -> Address:
    """Account address for a public key: the first 20 bytes of its digest."""
    return Address(hash_bytes(b"addr" + public_key)[:20])


# -- signature schemes -------------------------------------------------------
#
# Digest scheme: 32-byte public keys.  The signature binds (key, digest) so
# any altered digest or wrong key fails verification.  It is NOT unforgeable;
# it exists for deterministic desk-scale simulation.
#
# secp256k1 scheme: 33-byte compressed public keys, ECDSA over SHA-256 via the
# ``cryptography`` package.  Signatures are randomized, so block bytes built
# with it are not reproducible across runs.

DIGEST_KEY_SIZE = 32
SECP256K1_KEY_SIZE = 33


def _digest_sig(public_key: bytes, digest: bytes) -> bytes:
    return hashlib.sha256(b"edsc-sig" + public_key + digest).digest()


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public_key: bytes

    @property
    def address(self) -> Address:
        return address_of(self.public_key)

    def sign(self, digest: bytes) -> bytes:
        if len(self.public_key) == DIGEST_KEY_SIZE:
            return _digest_sig(self.public_key, digest)
        return _secp256k1_sign(self.secret, digest)

    @classmethod
    def from_seed(cls, seed: bytes | str) -> "KeyPair":
        if isinstance(seed, str):
            seed = seed.encode()
        secret = hashlib.sha256(b"secret" + seed).digest()
        return cls(secret, hashlib.sha256(b"pk" + secret).digest())

    @classmethod
    def secp256k1(cls, seed: bytes | str | None = None) -> "KeyPair":
        from cryptography.hazmat.primitives.asymmetric import ec
        from cryptography.hazmat.primitives import serialization

        if seed is None:
            key = ec.generate_private_key(ec.SECP256K1())
        else:
            if isinstance(seed, str):
                seed = seed.encode()
            scalar = int.from_bytes(hashlib.sha256(b"k1" + seed).digest(), "big")
            key = ec.derive_private_key(scalar % (_SECP256K1_ORDER - 1) + 1, ec.SECP256K1())
        secret = key.private_numbers().private_value.to_bytes(32, "big")
        public = key.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
        )
        return cls(secret, public)


_SECP256K1_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141


def _secp256k1_sign(secret: bytes, digest: bytes) -> bytes:
    from cryptography.hazmat.primitives import hashes
    from cryptography.hazmat.primitives.asymmetric import ec, utils

    key = ec.derive_private_key(int.from_bytes(secret, "big"), ec.SECP256K1())
    return key.sign(digest, ec.ECDSA(utils.Prehashed(hashes.SHA256())))


def _secp256k1_verify(public_key: bytes, digest: bytes, signature: bytes) -> bool:
    from cryptography.exceptions import InvalidSignature
    from cryptography.hazmat.primitives import hashes
    from cryptography.hazmat.primitives.asymmetric import ec, utils

    try:
        key = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256K1(), public_key)
        key.verify(signature, digest, ec.ECDSA(utils.Prehashed(hashes.SHA256())))
    except (InvalidSignature, ValueError):
        return False
    return True


def verify(public_key: bytes, digest: bytes, signature: bytes | None) -> bool:
    """Check ``signature`` over ``digest``; the scheme is picked by key length."""
    if not signature or len(digest) != 32:
        return False
    if len(public_key) == DIGEST_KEY_SIZE:
        return signature == _digest_sig(public_key, digest)
    if len(public_key) == SECP256K1_KEY_SIZE:
        return _secp256k1_verify(public_key, digest, signature)
    return False
