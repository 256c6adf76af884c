"""Cryptographic primitives used throughout the package.

Everything here is stateless apart from an operation counter that lets
callers assert that a code path performed no decryptions.  Randomness is
always injected: any object exposing ``getrandbits`` and ``randbytes``
(``random.Random`` for reproducible runs, ``random.SystemRandom`` for real
use) can be passed as ``rng``.
"""

from __future__ import annotations

import base64
import hashlib
import random
import struct
import threading
import time
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Protocol

import bcrypt
import gmpy2
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

SUPPORTED_KEY_BITS = (2048, 3072, 4096)
DEFAULT_KEY_BITS = 4096
PUBLIC_EXPONENT = 65537

MIN_WORK_FACTOR = 4
MAX_WORK_FACTOR = 31
SEED_BYTES = 32
SALT_BYTES = 16  # fixed by bcrypt
NONCE_BYTES = 12

Signature = bytes


class CryptoError(Exception):
    """Base class for errors raised by this module."""


class UnsupportedKeySize(CryptoError, ValueError):
    pass


class InvalidWorkFactor(CryptoError, ValueError):
    pass


class AuthenticationError(CryptoError):
    """AEAD tag mismatch: wrong key or modified ciphertext."""


class UnsealError(AuthenticationError):
    pass


class RandomSource(Protocol):
    def getrandbits(self, k: int) -> int: ...

    def randbytes(self, n: int) -> bytes: ...


def system_rng() -> random.SystemRandom:
    return random.SystemRandom()


def _rng(rng: RandomSource | None) -> RandomSource:
    return rng if rng is not None else system_rng()


def frame(*parts: bytes) -> bytes:
    """Length-prefix every part with a 4-byte big-endian length and concatenate."""
    out = bytearray()
    for part in parts:
        out += struct.pack(">I", len(part))
        out += part
    return bytes(out)


def unframe(data: bytes) -> list[bytes]:
    parts = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated frame header")
        (size,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + size > len(data):
            raise ValueError("truncated frame body")
        parts.append(data[pos:pos + size])
        pos += size
    return parts


class OperationCounters:
    """Thread-safe tally of decryption-type operations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.datum_decryptions = 0
        self.unseals = 0

    def _bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    @property
    def decryptions(self) -> int:
        return self.datum_decryptions + self.unseals

    def reset(self) -> None:
        with self._lock:
            self.datum_decryptions = 0
            self.unseals = 0


COUNTERS = OperationCounters()


# --------------------------------------------------------------------------
# digests

def digest32(data: bytes) -> bytes:
    """BLAKE2s-256 of ``data``."""
    return hashlib.blake2s(data).digest()


# --------------------------------------------------------------------------
# asymmetric keys

def encode_public_key(n: int, e: int) -> bytes:
    """Canonical public key: big-endian modulus followed by a 4-byte exponent."""
    return n.to_bytes((n.bit_length() + 7) // 8, "big") + e.to_bytes(4, "big")


def decode_public_key(data: bytes) -> tuple[int, int]:
    if len(data) < 5:
        raise ValueError("public key encoding too short")
    n = int.from_bytes(data[:-4], "big")
    e = int.from_bytes(data[-4:], "big")
    return n, e


@lru_cache(maxsize=8192)
def _public_key_object(data: bytes) -> rsa.RSAPublicKey:
    n, e = decode_public_key(data)
    return rsa.RSAPublicNumbers(e, n).public_key()


@dataclass(frozen=True)
class KeyPair:
    """An RSA key pair.

    ``public_key`` uses the canonical encoding from :func:`encode_public_key`;
    ``private_key`` is PKCS#8 DER.
    """

    public_key: bytes
    private_key: bytes = field(repr=False)
    bits: int

    @cached_property
    def _private(self) -> rsa.RSAPrivateKey:
        key = serialization.load_der_private_key(self.private_key, password=None)
        assert isinstance(key, rsa.RSAPrivateKey)
        return key

    @cached_property
    def _crt(self) -> tuple[int, int, int, int, int, int]:
        nums = self._private.private_numbers()
        pub = nums.public_numbers
        return pub.n, pub.e, nums.p, nums.q, nums.dmp1, nums.dmq1

    @classmethod
    def from_private_bytes(cls, der: bytes) -> "KeyPair":
        key = serialization.load_der_private_key(der, password=None)
        if not isinstance(key, rsa.RSAPrivateKey):
            raise CryptoError("not an RSA private key")
        pub = key.public_key().public_numbers()
        return cls(encode_public_key(pub.n, pub.e), der, key.key_size)


def _random_prime(bits: int, rng: RandomSource) -> int:
    while True:
        # top two bits set so that the product of two primes has exactly 2*bits bits
        start = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(start))
        if p.bit_length() == bits and gmpy2.gcd(p - 1, PUBLIC_EXPONENT) == 1:
            return p


def generate_keypair(bits: int = DEFAULT_KEY_BITS, rng: RandomSource | None = None) -> KeyPair:
    """Generate an RSA key pair of ``bits`` bits from the given randomness source."""
    if bits not in SUPPORTED_KEY_BITS:
        raise UnsupportedKeySize(f"unsupported key size {bits}; expected one of {SUPPORTED_KEY_BITS}")
    rng = _rng(rng)
    e = PUBLIC_EXPONENT
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits // 2, rng)
        if p != q:
            break
    if p < q:
        p, q = q, p
    n = p * q
    d = pow(e, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=d % (p - 1),
        dmq1=d % (q - 1),
        iqmp=pow(q, -1, p),
        public_numbers=rsa.RSAPublicNumbers(e, n),
    )
    # the primes were just generated and checked here, so OpenSSL's re-validation is redundant
    private = numbers.private_key(unsafe_skip_rsa_key_validation=True)
    der = private.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    pair = KeyPair(encode_public_key(n, e), der, bits)
    pair.__dict__["_private"] = private
    return pair


def sign(message: bytes, key: KeyPair) -> Signature:
    return key._private.sign(message, padding.PKCS1v15(), hashes.SHA256())


def verify(message: bytes, signature: Signature, public_key: bytes) -> bool:
    """True iff ``signature`` is a valid signature over ``message``; never raises."""
    try:
        _public_key_object(bytes(public_key)).verify(
            bytes(signature), bytes(message), padding.PKCS1v15(), hashes.SHA256()
        )
    except (InvalidSignature, ValueError, TypeError, OverflowError):
        return False
    return True


# --------------------------------------------------------------------------
# time-asymmetric symmetric encryption

_STD_B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"
_BCRYPT_B64 = "./ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"
_TO_BCRYPT = str.maketrans(_STD_B64, _BCRYPT_B64)


def _check_work_factor(work_factor: int) -> None:
    if not isinstance(work_factor, int) or not MIN_WORK_FACTOR <= work_factor <= MAX_WORK_FACTOR:
        raise InvalidWorkFactor(
            f"work factor must be an integer in [{MIN_WORK_FACTOR}, {MAX_WORK_FACTOR}], got {work_factor!r}"
        )


@dataclass(frozen=True)
class CipherKeySeed:
    """Public inputs to the slow key derivation.

    ``material`` (seed then salt) is what travels in the final protocol
    message; the work factor is agreed separately.
    """

    seed: bytes
    salt: bytes
    work_factor: int

    def __post_init__(self) -> None:
        if not SEED_BYTES <= len(self.seed) <= 72:
            raise ValueError("seed must be between 32 and 72 bytes")
        if len(self.salt) != SALT_BYTES:
            raise ValueError(f"salt must be {SALT_BYTES} bytes")
        _check_work_factor(self.work_factor)

    @property
    def material(self) -> bytes:
        return self.seed + self.salt

    def canonical(self) -> bytes:
        return frame(self.seed, self.salt, bytes([self.work_factor]))

    @classmethod
    def from_material(cls, material: bytes, work_factor: int) -> "CipherKeySeed":
        if len(material) != SEED_BYTES + SALT_BYTES:
            raise ValueError("key material has the wrong length")
        return cls(material[:SEED_BYTES], material[SEED_BYTES:], work_factor)


def material_length() -> int:
    return SEED_BYTES + SALT_BYTES


def new_key_seed(work_factor: int, rng: RandomSource | None = None) -> CipherKeySeed:
    rng = _rng(rng)
    return CipherKeySeed(rng.randbytes(SEED_BYTES), rng.randbytes(SALT_BYTES), work_factor)


@dataclass(frozen=True)
class SymmetricKey:
    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.key) != 32:
            raise ValueError("symmetric keys are 32 bytes")


def _bcrypt_salt(salt: bytes, work_factor: int) -> bytes:
    encoded = base64.b64encode(salt).decode("ascii").rstrip("=").translate(_TO_BCRYPT)
    return f"$2b${work_factor:02d}${encoded}".encode("ascii")


def derive_cipher_key(seed: CipherKeySeed) -> SymmetricKey:
    """Stretch the seed with bcrypt; cost doubles with each work-factor step."""
    _check_work_factor(seed.work_factor)
    stretched = bcrypt.hashpw(seed.seed, _bcrypt_salt(seed.salt, seed.work_factor))
    return SymmetricKey(digest32(frame(b"cipher-key", stretched)))


def time_derivation(work_factor: int, runs: int = 3, rng: RandomSource | None = None) -> list[float]:
    """Wall-clock seconds of ``runs`` independent derivations at ``work_factor``."""
    rng = _rng(rng)
    samples = []
    for _ in range(runs):
        seed = new_key_seed(work_factor, rng)
        start = time.perf_counter()
        derive_cipher_key(seed)
        samples.append(time.perf_counter() - start)
    return samples


def _aead_encrypt(key: bytes, plaintext: bytes, rng: RandomSource, aad: bytes | None = None) -> bytes:
    nonce = rng.randbytes(NONCE_BYTES)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def _aead_decrypt(key: bytes, data: bytes, aad: bytes | None = None) -> bytes:
    if len(data) < NONCE_BYTES + 16:
        raise AuthenticationError("ciphertext too short")
    try:
        return AESGCM(key).decrypt(data[:NONCE_BYTES], data[NONCE_BYTES:], aad)
    except InvalidTag:
        raise AuthenticationError("authentication tag mismatch") from None


def encrypt_datum(datum: bytes, key: SymmetricKey, rng: RandomSource | None = None) -> bytes:
    """AES-256-GCM; output is nonce || ciphertext || tag."""
    return _aead_encrypt(key.key, datum, _rng(rng))


def decrypt_datum(cipher: bytes, key: SymmetricKey) -> bytes:
    COUNTERS._bump("datum_decryptions")
    return _aead_decrypt(key.key, cipher)


# --------------------------------------------------------------------------
# hybrid public-key sealing (RSA-KEM + AES-256-GCM)

@dataclass(frozen=True)
class SealedBox:
    wrapped_key: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return frame(self.wrapped_key, self.body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBox":
        parts = unframe(data)
        if len(parts) != 2:
            raise ValueError("malformed sealed box")
        return cls(parts[0], parts[1])


def _kem_key(m: bytes, c: bytes) -> bytes:
    return digest32(frame(b"seal-kem", m, c))


def seal(payload: bytes, recipient_public_key: bytes, rng: RandomSource | None = None) -> SealedBox:
    rng = _rng(rng)
    n, e = decode_public_key(recipient_public_key)
    if n < 2 ** 1024 or e < 3:
        raise CryptoError("recipient key is not a usable RSA public key")
    size = (n.bit_length() + 7) // 8
    m = rng.getrandbits(n.bit_length() + 64) % (n - 3) + 2
    c = int(gmpy2.powmod(m, e, n)).to_bytes(size, "big")
    key = _kem_key(m.to_bytes(size, "big"), c)
    return SealedBox(c, _aead_encrypt(key, payload, rng, aad=c))


def unseal(box: SealedBox, key: KeyPair) -> bytes:
    COUNTERS._bump("unseals")
    n, _, p, q, dp, dq = key._crt
    size = (n.bit_length() + 7) // 8
    c = int.from_bytes(box.wrapped_key, "big")
    if len(box.wrapped_key) != size or c >= n:
        raise UnsealError("wrapped key does not match this key pair")
    mp = gmpy2.powmod(c, dp, p)
    mq = gmpy2.powmod(c, dq, q)
    h = (gmpy2.invert(q, p) * (mp - mq)) % p
    m = int(mq + h * q)
    try:
        return _aead_decrypt(_kem_key(m.to_bytes(size, "big"), box.wrapped_key), box.body, aad=box.wrapped_key)
    except AuthenticationError:
        raise UnsealError("cannot unseal with this key pair") from None
