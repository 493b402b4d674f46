"""Primitive codecs, primitive operations, and chunkable edit handles."""

from __future__ import annotations

import pytest

from forkstore.chunking import ChunkerConfig
from forkstore.chunks import ChunkType
from forkstore.errors import (
    ElementNotFound,
    IntegerOverflow,
    OutOfRange,
    TypeMismatch,
    ValueTooLarge,
)
from forkstore.postree import build
from forkstore.values import (
    INT64_MAX,
    INT64_MIN,
    BlobHandle,
    ListHandle,
    MapHandle,
    SetHandle,
    ValueKind,
    decode_primitive,
    decode_tuple,
    encode_primitive,
    encode_tuple,
    handle_for,
    infer_kind,
    integer_add,
    integer_multiply,
    load_value,
    persist_value,
    string_append,
    string_insert,
    tuple_append,
    tuple_insert,
)


def test_integer_encoding_is_little_endian_64bit():
    assert encode_primitive(ValueKind.INTEGER, 1) == b"\x01" + b"\x00" * 7
    assert encode_primitive(ValueKind.INTEGER, -1) == b"\xff" * 8
    assert encode_primitive(ValueKind.INTEGER, 0x0102030405060708) == bytes(
        [8, 7, 6, 5, 4, 3, 2, 1]
    )
    for n in (0, 7, -7, INT64_MAX, INT64_MIN):
        assert decode_primitive(ValueKind.INTEGER, encode_primitive(ValueKind.INTEGER, n)) == n


def test_integer_range_is_enforced():
    with pytest.raises(IntegerOverflow):
        encode_primitive(ValueKind.INTEGER, INT64_MAX + 1)
    with pytest.raises(IntegerOverflow):
        encode_primitive(ValueKind.INTEGER, INT64_MIN - 1)
    with pytest.raises(TypeMismatch):
        encode_primitive(ValueKind.INTEGER, True)
    with pytest.raises(TypeMismatch):
        decode_primitive(ValueKind.INTEGER, b"\x00" * 7)


def test_tuple_encoding_length_prefixes_each_field():
    assert encode_tuple((b"ab", b"")) == b"\x02\x00\x00\x00ab\x00\x00\x00\x00"
    fields = (b"x", b"yy", b"", b"\x00\xff")
    assert decode_tuple(encode_tuple(fields)) == fields
    assert encode_tuple(("a", b"b")) == encode_tuple((b"a", b"b"))  # str normalized
    with pytest.raises(TypeMismatch):
        decode_tuple(b"\x05\x00\x00\x00ab")  # field shorter than its length
    with pytest.raises(TypeMismatch):
        decode_tuple(b"\x02\x00\x00")  # truncated length prefix


def test_string_roundtrip_utf8():
    s = "héllo, wörld ☃"
    data = encode_primitive(ValueKind.STRING, s)
    assert data == s.encode("utf-8")
    assert decode_primitive(ValueKind.STRING, data) == s


def test_kind_inference():
    cases = [
        (b"x", ValueKind.BLOB),
        (bytearray(b"x"), ValueKind.BLOB),
        ("x", ValueKind.STRING),
        (3, ValueKind.INTEGER),
        ((b"a",), ValueKind.TUPLE),
        ([b"a"], ValueKind.LIST),
        ({b"a": b"b"}, ValueKind.MAP),
        ({b"a"}, ValueKind.SET),
        (frozenset([b"a"]), ValueKind.SET),
    ]
    for value, kind in cases:
        assert infer_kind(value) is kind
    with pytest.raises(TypeMismatch):
        infer_kind(True)
    with pytest.raises(TypeMismatch):
        infer_kind(3.5)


def test_primitive_operations_match_plain_arithmetic():
    assert integer_add(0, 7) == 7
    assert integer_add(-3, 3) == 0
    assert integer_multiply(6, 7) == 42
    assert integer_multiply(INT64_MAX, 1) == INT64_MAX
    with pytest.raises(IntegerOverflow):
        integer_add(INT64_MAX, 1)
    with pytest.raises(IntegerOverflow):
        integer_multiply(INT64_MAX, 2)


def test_string_and_tuple_operations():
    assert string_append("ab", "c") == "abc"
    assert string_insert("ad", 1, "bc") == "abcd"
    assert string_insert("ab", 2, "!") == "ab!"
    with pytest.raises(OutOfRange):
        string_insert("ab", 3, "x")
    assert tuple_append((b"a",), b"b") == (b"a", b"b")
    assert tuple_append((), "s") == (b"s",)
    assert tuple_insert((b"a", b"c"), 1, b"b") == (b"a", b"b", b"c")
    with pytest.raises(OutOfRange):
        tuple_insert((b"a",), 5, b"x")


def test_oversized_primitive_is_rejected(store):
    cfg = ChunkerConfig(window_size=8, target_leaf_bytes=64, max_size_factor=2.0)
    with pytest.raises(ValueTooLarge):
        persist_value(store, "x" * 200, cfg)
    kind, data = persist_value(store, b"x" * 200, cfg)  # blobs chunk instead
    assert kind is ValueKind.BLOB


def test_persist_and_load_roundtrip_every_kind(store):
    values = [
        b"some blob bytes",
        "a string",
        12345,
        (b"f1", b"f2"),
        [b"e0", b"e1", b"e2"],
        {b"k1": b"v1", b"k2": b"v2"},
        {b"m1", b"m2"},
    ]
    for value in values:
        kind, data = persist_value(store, value)
        assert load_value(store, kind, data) == value


def test_blob_handle_edits_match_bytes_oracle(store):
    content = bytes(range(256)) * 4
    tree = build(store, ChunkType.BLOB, content)
    h = BlobHandle(tree)
    model = bytearray(content)

    h.remove(0, 10)
    del model[0:10]
    h.append(b"tail")
    model += b"tail"
    h.insert(100, b"mid")
    model[100:100] = b"mid"

    assert h.value() == bytes(model)
    assert len(h) == len(model)
    assert h.read(90, 30) == bytes(model[90:120])


def test_map_handle_edits_match_dict_oracle(store):
    model = {b"k%02d" % i: b"v%d" % i for i in range(20)}
    h = MapHandle(build(store, ChunkType.MAP, model))
    h.put(b"new", b"x")
    model[b"new"] = b"x"
    h.put(b"k03", b"changed")
    model[b"k03"] = b"changed"
    h.delete(b"k07")
    del model[b"k07"]
    assert h.value() == model
    assert h.get(b"k03") == b"changed"
    assert h.contains(b"new") and not h.contains(b"k07")
    with pytest.raises(ElementNotFound):
        h.get(b"k07")
    assert dict(h.items()) == model


def test_list_and_set_handles(store):
    lh = ListHandle(build(store, ChunkType.LIST, [b"a", b"b", b"d"]))
    lh.insert(2, b"c")
    lh.append(b"e", b"f")
    lh.delete(0)
    assert lh.value() == [b"b", b"c", b"d", b"e", b"f"]
    assert lh.get(1) == b"c"
    with pytest.raises(OutOfRange):
        lh.insert(99, b"x")

    sh = SetHandle(build(store, ChunkType.SET, {b"x", b"y"}))
    sh.add(b"z").discard(b"x")
    assert sh.value() == {b"y", b"z"}
    assert sh.contains(b"z") and not sh.contains(b"x")
    assert list(sh.members()) == [b"y", b"z"]


def test_handle_kind_is_checked(store):
    blob_tree = build(store, ChunkType.BLOB, b"abc")
    with pytest.raises(TypeMismatch):
        MapHandle(blob_tree)


def test_handle_for_reconstructs_from_root(store):
    tree = build(store, ChunkType.MAP, {b"a": b"1"})
    h = handle_for(store, ValueKind.MAP, tree.root_cid, tree.config)
    assert isinstance(h, MapHandle)
    assert h.value() == {b"a": b"1"}


def test_handle_reuse_in_persist(store):
    tree = build(store, ChunkType.LIST, [b"a", b"b"])
    h = ListHandle(tree)
    h.append(b"c")
    kind, data = persist_value(store, h)
    assert kind is ValueKind.LIST
    assert data == h.tree.root_cid
    assert load_value(store, kind, data) == [b"a", b"b", b"c"]
