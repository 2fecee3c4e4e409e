import struct

import numpy as np
import pytest

from gradax.data import (DataError, ParseError, Dataset, load_csv, load_dataset, load_idx, parse_synthetic,
                         read_idx, synthetic_gaussian, write_idx)


def test_synthetic_is_deterministic():
    a = synthetic_gaussian(classes=2, d=32, n=4096, seed=1)
    b = synthetic_gaussian(classes=2, d=32, n=4096, seed=1)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.X.shape == (4096, 32) and a.X.dtype == np.float32


def test_synthetic_draws_share_class_means():
    a = synthetic_gaussian(n=20000, seed=2, separation=4.0)
    b = synthetic_gaussian(n=20000, seed=2, separation=4.0, draw=1)
    assert not np.array_equal(a.X, b.X)
    for c in range(2):
        np.testing.assert_allclose(a.X[a.y == c].mean(0), b.X[b.y == c].mean(0), atol=0.1)


def test_parse_synthetic():
    assert parse_synthetic("synthetic:classes=3,d=4,n=10,seed=5,separation=1.5") == {
        "classes": 3, "d": 4, "n": 10, "seed": 5, "separation": 1.5}
    with pytest.raises(DataError):
        parse_synthetic("synthetic:colour=3")
    assert len(load_dataset("synthetic:n=10,d=3")) == 10


def test_shard_and_batches():
    data = synthetic_gaussian(n=103, d=2, seed=1)
    shards = [data.shard(r, 4, seed=9) for r in range(4)]
    assert [len(s) for s in shards] == [25] * 4
    rows = np.concatenate([s.X for s in shards])
    assert len({r.tobytes() for r in rows}) == 100
    batches = list(shards[0].batches(8, epoch=0, seed=9))
    assert len(batches) == 3 and batches[0][0].shape == (8, 2)
    again = list(shards[0].batches(8, epoch=0, seed=9))
    np.testing.assert_array_equal(batches[1][0], again[1][0])
    with pytest.raises(DataError):
        Dataset(data.X[:3], data.y[:3], 2).shard(0, 4)


def test_csv_with_header_and_label_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,1\n")
    d = load_csv(p)
    assert d.X.shape == (3, 2) and d.y.tolist() == [0, 1, 1] and d.num_classes == 2
    np.testing.assert_allclose(d.X.mean(0), 0, atol=1e-6)


def test_csv_errors_carry_byte_offsets(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2,0\n3,x,1\n")
    with pytest.raises(ParseError, match="byte 6"):
        load_csv(p)
    p.write_text("1,2,0\n3,1\n")
    with pytest.raises(ParseError, match="byte 6"):
        load_csv(p)


def test_csv_label_count_mismatch_names_both(tmp_path):
    p, lab = tmp_path / "x.csv", tmp_path / "y.csv"
    p.write_text("1,2\n3,4\n5,6\n")
    lab.write_text("0\n1\n")
    with pytest.raises(DataError, match=r"3 rows.*2 labels"):
        load_csv(p, lab)


def test_idx_header_and_round_trip(tmp_path):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "i.idx", imgs)
    raw = (tmp_path / "i.idx").read_bytes()
    assert struct.unpack(">I3I", raw[:16]) == (0x00000803, 2, 3, 4)
    np.testing.assert_array_equal(read_idx(tmp_path / "i.idx"), imgs)
    write_idx(tmp_path / "l.idx", np.array([0, 1], np.uint8))
    assert (tmp_path / "l.idx").read_bytes()[:4] == b"\x00\x00\x08\x01"
    d = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert d.X.shape == (2, 12) and d.num_classes == 2


def test_idx_errors(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(ParseError, match="byte 0"):
        read_idx(p)
    p.write_bytes(struct.pack(">HBB", 0, 0x08, 1) + struct.pack(">I", 5) + b"\x00" * 3)
    with pytest.raises(ParseError, match="byte 11"):
        read_idx(p)
    p.write_bytes(struct.pack(">HBB", 0, 0x07, 1))
    with pytest.raises(ParseError, match="byte 2"):
        read_idx(p)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.csv")
