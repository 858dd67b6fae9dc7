import configparser
import hashlib
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ed25519_public, ed25519_sign
from sras import crypto
from sras.crypto import EphemeralKey
from sras.errors import DecryptFailure

VECTORS = configparser.ConfigParser()
VECTORS.read(Path(__file__).parent / "vectors" / "crypto_vectors.ini")


def vec(section: str, key: str) -> bytes:
    return bytes.fromhex(VECTORS[section][key])


def test_vectors_file_loaded():
    assert "ed25519-1" in VECTORS


@pytest.mark.parametrize("section", ["sha256-empty", "sha256-abc"])
def test_sha256_known_answers(section):
    d = crypto.digest(vec(section, "msg"))
    assert d == vec(section, "digest")
    assert isinstance(d, crypto.Digest32)


@pytest.mark.parametrize("section", ["ed25519-1", "ed25519-2"])
def test_ed25519_known_answers(section):
    assert crypto.verify(vec(section, "public"), vec(section, "msg"), vec(section, "sig"))
    # the reference oracle reproduces the published vector too
    assert ed25519_public(vec(section, "secret")) == vec(section, "public")
    assert ed25519_sign(vec(section, "secret"), vec(section, "msg")) == vec(section, "sig")


def test_x25519_known_answer():
    alice = X25519PrivateKey.from_private_bytes(vec("x25519", "alice_private"))
    key = EphemeralKey(public=alice.public_key().public_bytes_raw(), _private=alice)
    assert key.public == vec("x25519", "alice_public")
    assert key.exchange(vec("x25519", "bob_public")) == vec("x25519", "shared")


def test_hkdf_known_answer():
    assert crypto.hkdf_extract(vec("hkdf-1", "salt"), vec("hkdf-1", "ikm")) == vec("hkdf-1", "prk")


def test_hmac_known_answer():
    assert crypto.mac(vec("hmac-1", "key"), vec("hmac-1", "data")) == vec("hmac-1", "mac")


def test_aead_known_answer():
    out = crypto.seal(vec("aead-1", "key"), vec("aead-1", "nonce"), vec("aead-1", "plaintext"), vec("aead-1", "aad"))
    assert out == vec("aead-1", "ciphertext") + vec("aead-1", "tag")
    assert crypto.open_sealed(vec("aead-1", "key"), vec("aead-1", "nonce"), out, vec("aead-1", "aad")) == vec(
        "aead-1", "plaintext"
    )


@pytest.mark.parametrize("seed", [b"", b"rpe-1", bytes(range(40))])
def test_seeded_keys_match_reference_derivation(seed):
    secret = hashlib.sha256(b"sras-keygen\x00" + seed).digest()
    kp = crypto.generate_keypair(seed)
    assert kp.public == ed25519_public(secret)
    assert kp.sign(b"hello") == ed25519_sign(secret, b"hello")


def test_unseeded_keys_differ():
    assert crypto.generate_keypair().public != crypto.generate_keypair().public


def test_keypair_refuses_pickling():
    import pickle

    with pytest.raises(TypeError):
        pickle.dumps(crypto.generate_keypair(b"x"))


@settings(max_examples=50, deadline=None)
@given(msg=st.binary(max_size=200), flip=st.integers(min_value=0, max_value=63))
def test_signature_rejects_any_bit_flip(msg, flip):
    kp = crypto.generate_keypair(b"prop")
    sig = bytearray(kp.sign(msg))
    assert crypto.verify(kp.public, msg, bytes(sig))
    sig[flip] ^= 0x01
    assert not crypto.verify(kp.public, msg, bytes(sig))


def test_verify_rejects_bad_lengths():
    kp = crypto.generate_keypair(b"len")
    sig = kp.sign(b"m")
    assert not crypto.verify(kp.public[:31], b"m", sig)
    assert not crypto.verify(kp.public, b"m", sig[:63])


def test_x25519_agreement_is_symmetric():
    a, b = crypto.generate_ephemeral(), crypto.generate_ephemeral()
    assert a.exchange(b.public) == b.exchange(a.public)


def test_x25519_rejects_low_order_share():
    with pytest.raises(DecryptFailure):
        crypto.generate_ephemeral().exchange(bytes(32))


@settings(max_examples=50, deadline=None)
@given(pt=st.binary(max_size=300), aad=st.binary(max_size=40), pos=st.integers(min_value=0))
def test_aead_detects_tampering(pt, aad, pos):
    key, nonce = bytes(range(32)), bytes(12)
    ct = bytearray(crypto.seal(key, nonce, pt, aad))
    assert crypto.open_sealed(key, nonce, bytes(ct), aad) == pt
    ct[pos % len(ct)] ^= 0x80
    with pytest.raises(DecryptFailure):
        crypto.open_sealed(key, nonce, bytes(ct), aad)


def test_hkdf_labels_separate_keys():
    prk = bytes(32)
    assert crypto.hkdf_expand(prk, "c hs traffic", b"") != crypto.hkdf_expand(prk, "s hs traffic", b"")
    assert len(crypto.hkdf(b"ikm", b"salt", "x", 42)) == 42


def test_digest32_length_checked():
    with pytest.raises(ValueError):
        crypto.Digest32(b"short")
    assert crypto.Digest32(bytes(32)) == bytes(32)


def test_suite_id():
    assert crypto.SUITE_ID == "sras-1:sha256:ed25519:x25519:chacha20poly1305"
