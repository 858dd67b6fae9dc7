import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import canonicalize
from sras import canonical

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(min_value=-(2**63), max_value=2**63) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=5) | st.dictionaries(st.text(max_size=10), inner, max_size=5),
    max_leaves=25,
)


@settings(max_examples=300, deadline=None)
@given(json_values)
def test_matches_hand_rolled_canonicalizer(value):
    assert canonical.dumps(value) == canonicalize(value)


@settings(max_examples=200, deadline=None)
@given(json_values)
def test_round_trip(value):
    encoded = canonical.dumps(value)
    assert canonical.loads(encoded) == value
    assert canonical.dumps(canonical.loads(encoded)) == encoded


@pytest.mark.parametrize("ch", ["\x7f", "\x00", "é", "\U0001f600", " "])
def test_escapes_are_ascii(ch):
    out = canonical.dumps({"k": ch})
    assert out == canonicalize({"k": ch})
    assert all(0x20 <= b < 0x7F for b in out)


def test_no_whitespace_and_sorted_keys():
    assert canonical.dumps({"b": [1, 2], "a": {"d": None, "c": True}}) == b'{"a":{"c":true,"d":null},"b":[1,2]}'


@pytest.mark.parametrize("text", ['{"a":1,"a":2}', '{"a":1.5}', '{"a":NaN}', '[Infinity]', '{"a":1e3}'])
def test_strict_decode_rejects(text):
    with pytest.raises(ValueError):
        canonical.loads(text)


def test_floats_refused_on_output():
    with pytest.raises(ValueError):
        canonical.dumps({"x": float("nan")})


@pytest.mark.parametrize("text", ["AB", "abc", "0x00", "zz", 5])
def test_from_hex_is_strict(text):
    with pytest.raises(ValueError):
        canonical.from_hex(text)


def test_from_hex_size():
    assert canonical.from_hex("00ff", 2) == b"\x00\xff"
    with pytest.raises(ValueError):
        canonical.from_hex("00ff", 3)


def test_unicode_input_bytes():
    assert canonical.loads('{"x":"é"}'.encode()) == json.loads('{"x":"é"}')
