import os
import random
import unittest

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from core import crypto
from core.exceptions import CryptoError, EncodingOverflowError, SealError

TEST_CNL = {**settings.CNL, 'TEST_MODE': True}


class TinyKeyTests(SimpleTestCase):

    def setUp(self):
        self.pk, self.sk = crypto.keypair_from_primes(5, 7)
        self.rng = random.Random(0)

    def test_textbook_key(self):
        self.assertEqual(self.pk.n, 35)
        self.assertEqual(crypto.paillier_decrypt(self.sk, crypto.paillier_encrypt(self.pk, 4, self.rng)), 4)

    def test_addition(self):
        c = crypto.he_add(self.pk, crypto.paillier_encrypt(self.pk, 3, self.rng),
                          crypto.paillier_encrypt(self.pk, 4, self.rng))
        self.assertEqual(crypto.paillier_decrypt(self.sk, c), 7)

    def test_zero_is_identity(self):
        c = crypto.he_add(self.pk, crypto.paillier_encrypt(self.pk, 0, self.rng),
                          crypto.paillier_encrypt(self.pk, 9, self.rng))
        self.assertEqual(crypto.paillier_decrypt(self.sk, c), 9)

    def test_plaintext_range(self):
        with self.assertRaises(CryptoError):
            crypto.paillier_encrypt(self.pk, 35)

    def test_equal_primes(self):
        with self.assertRaises(CryptoError):
            crypto.keypair_from_primes(7, 7)


@override_settings(CNL=TEST_CNL)
class PaillierTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pk, cls.sk = crypto.paillier_keygen(512, seed=42, test_mode=True)

    def test_round_trip(self):
        rng = random.Random(1)
        for _ in range(1000):
            m = rng.randrange(self.pk.n)
            self.assertEqual(crypto.paillier_decrypt(self.sk, crypto.paillier_encrypt(self.pk, m)), m)

    def test_boundaries(self):
        self.assertEqual(crypto.paillier_decrypt(self.sk, crypto.paillier_encrypt(self.pk, 0)), 0)
        top = self.pk.n - 1
        self.assertEqual(crypto.paillier_decrypt(self.sk, crypto.paillier_encrypt(self.pk, top)), top)

    def test_encryption_is_randomized(self):
        first = crypto.paillier_encrypt(self.pk, 12345)
        second = crypto.paillier_encrypt(self.pk, 12345)
        self.assertNotEqual(first, second)
        self.assertEqual(crypto.paillier_decrypt(self.sk, first), crypto.paillier_decrypt(self.sk, second))

    def test_tampering_is_not_detected(self):
        rng = random.Random(2)
        changed = 0
        for _ in range(50):
            m = rng.randrange(self.pk.n)
            c = crypto.paillier_encrypt(self.pk, m)
            changed += crypto.paillier_decrypt(self.sk, (c * 2) % self.pk.n_squared) != m
        self.assertEqual(changed, 50)

    def test_fold_of_64(self):
        rng = random.Random(3)
        values = [rng.randrange(self.pk.n) for _ in range(64)]
        total = crypto.paillier_encrypt(self.pk, values[0])
        for m in values[1:]:
            total = crypto.he_add(self.pk, total, crypto.paillier_encrypt(self.pk, m))
        self.assertEqual(crypto.paillier_decrypt(self.sk, total), sum(values) % self.pk.n)

    def test_seeded_keygen_is_deterministic(self):
        again, _ = crypto.paillier_keygen(512, seed=42, test_mode=True)
        self.assertEqual(again, self.pk)
        self.assertEqual(self.pk.bits, 512)

    def test_entropy_gives_fresh_keys(self):
        first, _ = crypto.paillier_keygen(512, test_mode=True)
        second, _ = crypto.paillier_keygen(512, test_mode=True)
        self.assertNotEqual(first.n, second.n)

    def test_lambda_mu_decrypt(self):
        m = 987654321
        c = crypto.paillier_encrypt(self.pk, m)
        n = self.pk.n
        u = pow(c, self.sk.lam, self.pk.n_squared)
        self.assertEqual(((u - 1) // n) * self.sk.mu % n, m)

    def test_public_key_serialization(self):
        self.assertEqual(crypto.PaillierPublicKey.from_dict(self.pk.to_dict()), self.pk)


class KeygenPolicyTests(SimpleTestCase):

    def test_small_keys_need_test_mode(self):
        with self.assertRaises(CryptoError):
            crypto.paillier_keygen(512, test_mode=False)

    def test_seeds_need_test_mode(self):
        with self.assertRaises(CryptoError):
            crypto.paillier_keygen(1024, seed=1, test_mode=False)

    def test_unsupported_size(self):
        with self.assertRaises(CryptoError):
            crypto.paillier_keygen(768, test_mode=True)


@unittest.skipUnless(settings.CNL['SLOW_TESTS'], 'set CNL_SLOW_TESTS=1 for 1024-bit runs')
class ProductionKeyTests(SimpleTestCase):

    def test_homomorphism_suite(self):
        pk, sk = crypto.paillier_keygen(1024, test_mode=False)
        rng = random.Random(4)
        for _ in range(1000):
            x, y = rng.randrange(pk.n), rng.randrange(pk.n)
            c = crypto.he_add(pk, crypto.paillier_encrypt(pk, x), crypto.paillier_encrypt(pk, y))
            self.assertEqual(crypto.paillier_decrypt(sk, c), (x + y) % pk.n)


@override_settings(CNL=TEST_CNL)
class FixedPointTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pk, cls.sk = crypto.paillier_keygen(512, seed=7, test_mode=True)
        cls.codec = crypto.FixedPointCodec(cls.pk.n)

    def test_encoding_values(self):
        self.assertEqual(self.codec.encode_value(1.5), 1572864)
        self.assertEqual(self.codec.encode_value(-1.0), self.pk.n - 1048576)
        self.assertEqual(self.codec.decode_value(self.pk.n - 1048576), -1.0)

    def test_rounding_bound(self):
        values = np.random.default_rng(0).normal(scale=50.0, size=200)
        decoded = crypto.fixed_point_codec(crypto.fixed_point_codec(values, self.codec), self.codec, 'decode')
        self.assertLessEqual(np.abs(decoded - values).max(), 2.0 ** -21)

    def test_overflow(self):
        with self.assertRaises(EncodingOverflowError):
            self.codec.encode_value(1e200)
        with self.assertRaises(EncodingOverflowError):
            self.codec.encode_value(float('nan'))

    def test_single_sender_passthrough(self):
        values = np.array([0.25, -3.5, 7.0])
        total = crypto.secure_sum(self.pk, [crypto.encrypt_vector(self.pk, values, self.codec)])
        self.assertEqual(total.addend_count, 1)
        np.testing.assert_array_equal(crypto.decrypt_vector(self.sk, total, self.codec), values)

    def test_secure_sum_matches_plaintext(self):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(8, 16))
        encrypted = [crypto.encrypt_vector(self.pk, v, self.codec) for v in vectors]
        total = crypto.secure_sum(self.pk, encrypted)
        decoded = crypto.decrypt_vector(self.sk, total, self.codec)
        self.assertLessEqual(np.abs(decoded - vectors.sum(axis=0)).max(), 8 * 2.0 ** -21)
        shuffled = crypto.secure_sum(self.pk, encrypted[::-1])
        np.testing.assert_array_equal(crypto.decrypt_vector(self.sk, shuffled, self.codec), decoded)
        mean = crypto.decrypt_vector(self.sk, total, self.codec, mean=True)
        np.testing.assert_allclose(mean, decoded / 8)

    def test_addend_limit(self):
        vector = crypto.encrypt_vector(self.pk, [1.0], crypto.FixedPointCodec(self.pk.n, max_addends=2))
        with self.assertRaises(EncodingOverflowError):
            crypto.secure_sum(self.pk, [vector, vector, vector], max_addends=2)

    def test_mixed_lengths(self):
        a = crypto.encrypt_vector(self.pk, [1.0, 2.0], self.codec)
        b = crypto.encrypt_vector(self.pk, [1.0], self.codec)
        with self.assertRaises(CryptoError):
            crypto.secure_sum(self.pk, [a, b])

    def test_vector_wire_form(self):
        vector = crypto.encrypt_vector(self.pk, [1.0, -2.0], self.codec)
        again = crypto.CiphertextVector.from_dict(vector.to_dict(), self.pk)
        self.assertEqual(again, vector)


class SealTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.key = crypto.generate_identity_key()

    def test_round_trip(self):
        for size in (0, 1, 1000, 1024 * 1024):
            payload = os.urandom(size)
            self.assertEqual(crypto.control_open(self.key, crypto.control_seal(self.key.public_key(), payload)),
                             payload)

    def test_bit_flip_is_rejected(self):
        blob = bytearray(crypto.control_seal(self.key.public_key(), b'{"target": "agency-1"}'))
        for position in (10, 260, len(blob) - 1):
            tampered = bytearray(blob)
            tampered[position] ^= 0x01
            with self.assertRaises(SealError):
                crypto.control_open(self.key, bytes(tampered))

    def test_wrong_recipient(self):
        other = crypto.generate_identity_key()
        with self.assertRaises(SealError):
            crypto.control_open(other, crypto.control_seal(self.key.public_key(), b'secret'))

    def test_pem_round_trip(self):
        public = crypto.load_public_pem(crypto.public_key_pem(self.key))
        self.assertEqual(crypto.control_open(self.key, crypto.control_seal(public, b'x')), b'x')

    def test_truncated_blob(self):
        with self.assertRaises(SealError):
            crypto.control_open(self.key, b'short')
