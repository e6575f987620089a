"""
Paillier keys and ciphertext vectors, the signed fixed-point codec, secure
summation, and hybrid RSA sealing for control messages.

Paillier gives confidentiality only: a tampered ciphertext still decrypts,
to garbage. Integrity for everything except ciphertext fields comes from the
sealed control channel.
"""
import logging
import math
import os
import random
import secrets
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from Crypto.Math.Primality import COMPOSITE, miller_rabin_test
from Crypto.Random import get_random_bytes
from Crypto.Util import number
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from django.conf import settings
from phe import paillier as phe_paillier

from .exceptions import CryptoError, EncodingOverflowError, SealError

logger = logging.getLogger(__name__)

ALLOWED_BITS = (512, 1024, 2048)
MIN_PRODUCTION_BITS = 1024
MILLER_RABIN_ROUNDS = 64

DEFAULT_SCALE_LOG2 = 20
DEFAULT_MAX_ADDENDS = 64

RSA_BITS = 2048
SESSION_KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


def to_hex(value):
    """Lowercase hexadecimal without leading zeros"""
    return format(value, 'x')


def from_hex(text):
    try:
        return int(text, 16)
    except (TypeError, ValueError) as exc:
        raise CryptoError(f'invalid hexadecimal integer {text!r}') from exc


class PaillierPublicKey:
    """Modulus n with the g = n + 1 generator"""

    def __init__(self, n):
        if n < 3:
            raise CryptoError('Paillier modulus is too small')
        self._key = phe_paillier.PaillierPublicKey(n)

    @property
    def n(self):
        return self._key.n

    @property
    def g(self):
        return self._key.g

    @property
    def n_squared(self):
        return self._key.nsquare

    @property
    def bits(self):
        return self.n.bit_length()

    def raw_encrypt(self, m, r):
        return self._key.raw_encrypt(m, r_value=r)

    def to_dict(self):
        return {'n': to_hex(self.n), 'bits': self.bits}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(from_hex(data['n']))
        except (KeyError, TypeError) as exc:
            raise CryptoError(f'malformed public key: {exc}') from exc

    def __eq__(self, other):
        return isinstance(other, PaillierPublicKey) and other.n == self.n

    def __hash__(self):
        return hash(self.n)

    def __repr__(self):
        return f'<PaillierPublicKey {self.bits} bits {to_hex(self.n)[:10]}>'


class PaillierPrivateKey:
    """Factorization of n; exposes the textbook (lambda, mu) pair"""

    def __init__(self, public_key, p, q):
        try:
            self._key = phe_paillier.PaillierPrivateKey(public_key._key, p, q)
        except ValueError as exc:
            raise CryptoError(f'invalid Paillier primes: {exc}') from exc
        self.public_key = public_key
        self.p = p
        self.q = q

    @property
    def lam(self):
        return math.lcm(self.p - 1, self.q - 1)

    @property
    def mu(self):
        n = self.public_key.n
        u = pow(self.public_key.g, self.lam, self.public_key.n_squared)
        return pow((u - 1) // n, -1, n)

    def raw_decrypt(self, c):
        return self._key.raw_decrypt(c)


def _probable_prime(bits, randfunc):
    while True:
        candidate = number.getPrime(bits, randfunc=randfunc)
        if miller_rabin_test(candidate, MILLER_RABIN_ROUNDS, randfunc=randfunc) != COMPOSITE:
            return candidate


def keypair_from_primes(p, q):
    """Keypair from known primes; only for deterministic oracles such as p=5, q=7"""
    if p == q:
        raise CryptoError('p and q must be distinct')
    public_key = PaillierPublicKey(p * q)
    return public_key, PaillierPrivateKey(public_key, p, q)


def paillier_keygen(bits=None, seed=None, test_mode=None):
    """
    Fresh Paillier keypair with Miller-Rabin checked primes.

    Seeded generation and 512-bit keys are for tests only; production keys
    come from OS entropy and are at least 1024 bits.
    """
    bits = bits or settings.CNL['KEY_BITS']
    test_mode = settings.CNL['TEST_MODE'] if test_mode is None else test_mode
    if bits not in ALLOWED_BITS:
        raise CryptoError(f'key size must be one of {ALLOWED_BITS}, got {bits}')
    if not test_mode and (bits < MIN_PRODUCTION_BITS or seed is not None):
        raise CryptoError('production keys need at least 1024 bits and OS entropy')
    randfunc = random.Random(seed).randbytes if seed is not None else get_random_bytes
    try:
        while True:
            p = _probable_prime(bits // 2, randfunc)
            q = _probable_prime(bits // 2, randfunc)
            if p != q and (p * q).bit_length() == bits:
                break
    except OSError as exc:
        raise CryptoError(f'entropy source failed: {exc}') from exc
    logger.debug('Generated %d-bit Paillier key', bits)
    return keypair_from_primes(p, q)


def _random_unit(n, rng):
    while True:
        r = rng.randrange(1, n)
        if math.gcd(r, n) == 1:
            return r


def paillier_encrypt(pk, m, rng=None):
    """c = (1 + n)^m r^n mod n^2 with fresh r"""
    if not isinstance(m, int) or not 0 <= m < pk.n:
        raise CryptoError(f'plaintext must be an integer in [0, n)')
    return pk.raw_encrypt(m, _random_unit(pk.n, rng or secrets.SystemRandom()))


def paillier_decrypt(sk, c):
    n = sk.public_key.n
    if not isinstance(c, int) or not 0 < c < sk.public_key.n_squared or math.gcd(c, n) != 1:
        raise CryptoError('malformed ciphertext')
    return sk.raw_decrypt(c)


def he_add(pk, c_a, c_b):
    """E(x) * E(y) mod n^2 = E(x + y mod n)"""
    n_squared = pk.n_squared
    if not (0 < c_a < n_squared and 0 < c_b < n_squared):
        raise CryptoError('ciphertext does not belong to this modulus')
    return (c_a * c_b) % n_squared


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed point in Z_n: negatives occupy the upper half of the ring"""

    modulus: int
    scale_log2: int = DEFAULT_SCALE_LOG2
    max_addends: int = DEFAULT_MAX_ADDENDS

    @property
    def scale(self):
        return 1 << self.scale_log2

    def encode_value(self, value):
        value = float(value)
        if not math.isfinite(value):
            raise EncodingOverflowError('cannot encode a non-finite value')
        quantized = round(value * self.scale)
        if 2 * abs(quantized) * self.max_addends >= self.modulus:
            raise EncodingOverflowError(f'{value} exceeds the headroom for {self.max_addends} addends')
        return quantized % self.modulus

    def encode(self, values):
        return [self.encode_value(v) for v in np.asarray(values, dtype=np.float64).ravel()]

    def decode_value(self, encoded, divisor=1):
        encoded %= self.modulus
        signed = encoded - self.modulus if encoded > self.modulus // 2 else encoded
        return signed / (self.scale * divisor)

    def decode(self, encoded, divisor=1):
        """Reals from ring elements; divisor > 1 turns an aggregate sum into a mean"""
        return np.array([self.decode_value(e, divisor) for e in encoded], dtype=np.float64)


def fixed_point_codec(values, codec, direction='encode', divisor=1):
    if direction == 'encode':
        return codec.encode(values)
    if direction == 'decode':
        return codec.decode(values, divisor)
    raise CryptoError(f'unknown codec direction {direction!r}')


@dataclass(frozen=True)
class CiphertextVector:
    """Componentwise Paillier ciphertexts of one encoded real vector (or a sum of them)"""

    components: tuple
    scale_log2: int
    addend_count: int
    modulus: int

    def __post_init__(self):
        object.__setattr__(self, 'components', tuple(self.components))
        if self.addend_count < 1:
            raise CryptoError('a ciphertext vector sums at least one contribution')
        n_squared = self.modulus * self.modulus
        if any(not 0 < c < n_squared for c in self.components):
            raise CryptoError('ciphertext component outside (0, n^2)')

    def __len__(self):
        return len(self.components)

    def to_dict(self):
        return {
            'components': [to_hex(c) for c in self.components],
            'scale_log2': self.scale_log2,
            'addend_count': self.addend_count,
        }

    @classmethod
    def from_dict(cls, data, public_key):
        try:
            return cls(
                components=tuple(from_hex(c) for c in data['components']),
                scale_log2=int(data['scale_log2']),
                addend_count=int(data['addend_count']),
                modulus=public_key.n,
            )
        except (KeyError, TypeError) as exc:
            raise CryptoError(f'malformed ciphertext vector: {exc}') from exc


def encrypt_vector(pk, values, codec, rng=None):
    rng = rng or secrets.SystemRandom()
    components = tuple(paillier_encrypt(pk, m, rng) for m in codec.encode(values))
    return CiphertextVector(components, codec.scale_log2, 1, pk.n)


def decrypt_vector(sk, vector, codec, mean=False):
    if vector.modulus != sk.public_key.n:
        raise CryptoError('ciphertext vector was encrypted under a different key')
    plain = [paillier_decrypt(sk, c) for c in vector.components]
    return codec.decode(plain, vector.addend_count if mean else 1)


def secure_sum(pk, vectors, max_addends=DEFAULT_MAX_ADDENDS):
    """Componentwise homomorphic fold; order of arrival does not matter"""
    vectors = list(vectors)
    if not vectors:
        raise CryptoError('secure_sum needs at least one ciphertext vector')
    for vector in vectors:
        if not isinstance(vector, CiphertextVector):
            raise CryptoError('secure_sum only accepts ciphertext vectors')
        if vector.modulus != pk.n:
            raise CryptoError('ciphertext vector was encrypted under a different key')
    first = vectors[0]
    if any(len(v) != len(first) for v in vectors):
        raise CryptoError('ciphertext vectors differ in length')
    if any(v.scale_log2 != first.scale_log2 for v in vectors):
        raise CryptoError('ciphertext vectors differ in fixed-point scale')
    total = sum(v.addend_count for v in vectors)
    if total > max_addends:
        raise EncodingOverflowError(f'{total} addends exceed the codec limit of {max_addends}')
    components = list(first.components)
    for vector in vectors[1:]:
        components = [he_add(pk, a, b) for a, b in zip(components, vector.components)]
    return CiphertextVector(tuple(components), first.scale_log2, total, pk.n)


def generate_identity_key():
    return rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS)


def public_key_pem(private_or_public):
    public = private_or_public.public_key() if hasattr(private_or_public, 'public_key') else private_or_public
    return public.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo).decode('ascii')


def load_public_pem(text):
    try:
        return serialization.load_pem_public_key(text.encode('ascii'))
    except (ValueError, TypeError) as exc:
        raise SealError(f'invalid identity public key: {exc}') from exc


def save_identity_key(private_key, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(private_key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()))
    return path


def load_identity_key(path, create=False):
    """Read a PEM identity key; optionally create one when the file is missing"""
    path = Path(path)
    if not path.exists():
        if not create:
            raise SealError(f'identity key {path} does not exist')
        logger.info('Creating identity key %s', path)
        key = generate_identity_key()
        save_identity_key(key, path)
        return key
    try:
        return serialization.load_pem_private_key(path.read_bytes(), password=None)
    except (ValueError, TypeError) as exc:
        raise SealError(f'cannot read identity key {path}: {exc}') from exc


def control_seal(recipient_public_key, payload):
    """RSA-OAEP wrapped session key || nonce || ChaCha20-Poly1305 ciphertext"""
    session_key = os.urandom(SESSION_KEY_BYTES)
    wrapped = recipient_public_key.encrypt(session_key, OAEP)
    nonce = os.urandom(NONCE_BYTES)
    return wrapped + nonce + ChaCha20Poly1305(session_key).encrypt(nonce, bytes(payload), wrapped)


def control_open(private_key, blob):
    wrapped_size = private_key.key_size // 8
    if len(blob) < wrapped_size + NONCE_BYTES + TAG_BYTES:
        raise SealError('sealed blob is truncated')
    wrapped = blob[:wrapped_size]
    nonce = blob[wrapped_size:wrapped_size + NONCE_BYTES]
    try:
        session_key = private_key.decrypt(wrapped, OAEP)
    except ValueError as exc:
        raise SealError('sealed blob was not addressed to this key') from exc
    try:
        return ChaCha20Poly1305(session_key).decrypt(nonce, blob[wrapped_size + NONCE_BYTES:], wrapped)
    except InvalidTag as exc:
        raise SealError('sealed blob failed authentication') from exc
