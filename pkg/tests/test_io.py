import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plumeinv.errors import HashMismatch, Truncated
from plumeinv.io import (
    MAGIC,
    StageWriter,
    atomic_write,
    encode_array,
    file_hash,
    load_array,
    read_header,
    read_json,
    save_array,
)


def test_scalar_round_trip(tmp_path):
    p = tmp_path / "s.arr"
    save_array(p, 3.25)
    out = load_array(p)
    assert out.shape == ()
    assert out == 3.25


def test_matrix_bit_exact(tmp_path):
    a = np.arange(12, dtype=float).reshape(3, 4) / 7.0
    p = tmp_path / "m.arr"
    save_array(p, a)
    b = load_array(p)
    assert b.shape == (3, 4)
    assert a.tobytes() == b.tobytes()


def test_fortran_input_is_stored_row_major(tmp_path):
    a = np.asfortranarray(np.arange(6.0).reshape(2, 3))
    p = tmp_path / "f.arr"
    save_array(p, a)
    assert np.array_equal(load_array(p), a)


def test_header_fields():
    blob = encode_array(np.zeros((2, 5)), "grid")
    assert blob.startswith((MAGIC + "\n").encode())
    header, payload = read_header(blob)
    assert header["name"] == "grid"
    assert header["dtype"] == "<f8"
    assert header["shape"] == "2,5"
    assert header["order"] == "C"
    assert header["creator"].startswith("plumeinv ")
    assert len(payload) == 80


def test_identical_content_identical_bytes(tmp_path):
    a = np.linspace(0, 1, 17)
    save_array(tmp_path / "a.arr", a, name="x")
    save_array(tmp_path / "b.arr", a.copy(), name="x")
    assert file_hash(tmp_path / "a.arr") == file_hash(tmp_path / "b.arr")


def test_flipped_byte_detected(tmp_path):
    p = tmp_path / "m.arr"
    save_array(p, np.ones((3, 4)))
    blob = bytearray(p.read_bytes())
    blob[-5] ^= 0x01
    p.write_bytes(bytes(blob))
    with pytest.raises(HashMismatch):
        load_array(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "m.arr"
    save_array(p, np.ones((3, 4)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(Truncated):
        load_array(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "m.arr"
    save_array(p, np.ones(3))
    p.write_bytes(p.read_bytes()[:20])
    with pytest.raises(Truncated):
        load_array(p)


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "f.bin"
    atomic_write(p, b"abc")
    atomic_write(p, b"def")
    assert p.read_bytes() == b"def"
    assert [q.name for q in p.parent.iterdir()] == ["f.bin"]


def test_stage_writer_manifest(tmp_path):
    save_array(tmp_path / "in.arr", np.arange(3.0))
    w = StageWriter(tmp_path, "demo", "abc123", {"train": 0})
    x = w.read("in.arr")
    w.array("out/y.arr", 2 * x)
    w.json("out/meta.json", {"k": 1})
    path = w.finish(extra_field=5)
    m = read_json(path)
    assert m["stage"] == "demo"
    assert m["config_hash"] == "abc123"
    assert m["seeds"] == {"train": 0}
    assert set(m["inputs"]) == {"in.arr"}
    assert set(m["outputs"]) == {"out/y.arr", "out/meta.json"}
    assert m["outputs"]["out/y.arr"] == file_hash(tmp_path / "out/y.arr")
    assert m["extra_field"] == 5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 5))))
def test_round_trip_property(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("rt") / "a.arr"
    save_array(p, a)
    b = load_array(p)
    assert b.shape == a.shape
    assert a.tobytes() == b.tobytes()
