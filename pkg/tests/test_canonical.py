import json

from bqt.canonical import canonical_json, digest, digest_text


def test_key_order_is_irrelevant():
    a = {"b": 1, "a": [{"y": 2, "x": 3}]}
    b = {"a": [{"x": 3, "y": 2}], "b": 1}
    assert canonical_json(a) == canonical_json(b)
    assert digest(a) == digest(b)


def test_no_whitespace_and_sorted_keys():
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


def test_unicode_stays_readable():
    # non-ASCII must not be escaped, or two writers disagree on bytes
    assert canonical_json({"s": "café"}) == '{"s":"café"}'


def test_round_trips_through_json():
    doc = {"k": [1, 2.5, None, True, "x"], "nested": {"a": {"b": []}}}
    assert json.loads(canonical_json(doc)) == doc


def test_digest_is_sha256_hex():
    d = digest({"a": 1})
    assert len(d) == 64
    assert set(d) <= set("0123456789abcdef")


def test_digest_text_differs_from_digest_of_json_string():
    # digest() hashes the canonical JSON encoding, quotes included
    assert digest_text("abc") != digest("abc")


def test_digest_text_known_value():
    import hashlib

    assert digest_text("abc") == hashlib.sha256(b"abc").hexdigest()
