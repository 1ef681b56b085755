import numpy as np
import pytest

from advfhvae.arrayio import load_blob, read_feature_file, save_blob, write_feature_file
from advfhvae.errors import DataError


def test_feature_round_trip_bit_exact(tmp_path, rng):
    arr = rng.normal(size=(37, 11)).astype(np.float32)
    p = tmp_path / "x.fea"
    write_feature_file(p, arr)
    back = read_feature_file(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_feature_rewrite_byte_identical(tmp_path, rng):
    arr = rng.normal(size=(5, 3)).astype(np.float32)
    p1, p2 = tmp_path / "a.fea", tmp_path / "b.fea"
    write_feature_file(p1, arr)
    write_feature_file(p2, read_feature_file(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_feature_truncated_rejected(tmp_path, rng):
    p = tmp_path / "x.fea"
    write_feature_file(p, rng.normal(size=(4, 4)).astype(np.float32))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataError):
        read_feature_file(p)


def test_feature_bad_magic(tmp_path):
    p = tmp_path / "x.fea"
    p.write_bytes(b"nope" + b"\x00" * 16)
    with pytest.raises(DataError):
        read_feature_file(p)


def test_blob_round_trip(tmp_path, rng):
    arrays = {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=7),
        "n": np.array(42, dtype=np.int64),
    }
    meta = {"format": "test", "nested": {"k": [1, 2, 3]}}
    p = tmp_path / "x.blob"
    save_blob(p, meta, arrays)
    meta2, arrays2 = load_blob(p)
    assert meta2 == meta
    for k in arrays:
        assert np.array_equal(arrays2[k], arrays[k])
        assert arrays2[k].dtype == arrays[k].dtype


def test_blob_save_load_save_byte_identical(tmp_path, rng):
    arrays = {"a": rng.normal(size=(6, 2)).astype(np.float32)}
    p1, p2 = tmp_path / "1.blob", tmp_path / "2.blob"
    save_blob(p1, {"v": 1}, arrays)
    meta, arr = load_blob(p1)
    save_blob(p2, meta, arr)
    assert p1.read_bytes() == p2.read_bytes()


def test_blob_truncated_rejected(tmp_path, rng):
    p = tmp_path / "x.blob"
    save_blob(p, {}, {"a": rng.normal(size=100)})
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(DataError):
        load_blob(p)


def test_blob_version_check(tmp_path, rng, monkeypatch):
    import advfhvae.arrayio as aio

    p = tmp_path / "x.blob"
    monkeypatch.setattr(aio, "BLOB_FORMAT_VERSION", 99)
    save_blob(p, {}, {})
    monkeypatch.undo()
    with pytest.raises(DataError, match="version"):
        load_blob(p)
