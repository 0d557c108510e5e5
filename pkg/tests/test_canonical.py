"""Canonical JSON: sorted keys, no whitespace, bit-exact round-trips."""

from careledger import canonical


def test_sorted_keys_no_whitespace():
    out = canonical.dumps({"b": 1, "a": {"z": 2, "y": [3, 4]}})
    assert out == b'{"a":{"y":[3,4],"z":2},"b":1}'


def test_utf8_not_escaped():
    assert canonical.dumps({"name": "Åsa"}) == '{"name":"Åsa"}'.encode("utf-8")


def test_round_trip_stability():
    obj = {"n": 100.0, "i": 7, "s": "x", "none": None, "flag": True, "list": [1, 2.5]}
    once = canonical.dumps(obj)
    again = canonical.dumps(canonical.loads(once))
    assert once == again


def test_loads_accepts_str_and_bytes():
    assert canonical.loads('{"a":1}') == canonical.loads(b'{"a":1}') == {"a": 1}
