import struct

import numpy as np
import pytest

from soupforge import data as D


def test_idx_round_trip_is_bit_exact(tmp_path):
    ds = D.synth_dataset(D.SynthSpec(classes=2, size=8, per_class=5), seed=1)
    D.write_idx(tmp_path / "x.idx", tmp_path / "y.idx", ds)
    back = D.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    D.write_idx(tmp_path / "x2.idx", tmp_path / "y2.idx", back)
    assert (tmp_path / "x.idx").read_bytes() == (tmp_path / "x2.idx").read_bytes()


def test_idx_header_is_big_endian(tmp_path):
    ds = D.IdxDataset(np.zeros((3, 28, 28), np.uint8), np.zeros(3, np.uint8))
    D.write_idx(tmp_path / "x", tmp_path / "y", ds)
    raw = (tmp_path / "x").read_bytes()
    assert raw[:16] == bytes.fromhex("00000803" "00000003" "0000001c" "0000001c")
    assert struct.unpack(">I", (tmp_path / "y").read_bytes()[4:8]) == (3,)


def test_idx_errors(tmp_path):
    ds = D.synth_dataset(D.SynthSpec(classes=2, size=8, per_class=3), seed=0)
    D.write_idx(tmp_path / "x", tmp_path / "y", ds)
    with pytest.raises(D.IdxFormatError, match="bad magic"):
        D.load_idx(tmp_path / "y", tmp_path / "y")
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-7])
    with pytest.raises(D.IdxFormatError, match=f"byte offset {len(raw) - 7}"):
        D.load_idx(tmp_path / "cut", tmp_path / "y")
    other = D.IdxDataset(ds.images[:2], ds.labels[:2])
    D.write_idx(tmp_path / "x2", tmp_path / "y2", other)
    with pytest.raises(D.IdxFormatError, match="count mismatch"):
        D.load_idx(tmp_path / "x", tmp_path / "y2")


def test_pixels_scale_to_unit_interval():
    ds = D.IdxDataset(np.array([[[0, 255], [51, 102]]], np.uint8), np.array([1], np.uint8))
    batch = ds.to_batch()
    assert batch.images.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(batch.images[0, 0], [[0, 1], [0.2, 0.4]], atol=1e-7)


def test_synth_is_seeded_and_shaped():
    spec = D.SynthSpec(classes=2, size=8, per_class=4)
    a, b = D.synth_dataset(spec, 3), D.synth_dataset(spec, 3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (8, 8, 8) and a.images.dtype == np.uint8
    assert sorted(np.bincount(a.labels)) == [4, 4]
    assert not np.array_equal(a.images, D.synth_dataset(spec, 4).images)


def test_digits_upsampling():
    ds = D.digits_dataset(16)
    assert ds.images.shape == (1797, 16, 16)
    assert np.array_equal(ds.images[:, ::2, ::2], ds.images[:, 1::2, 1::2])
    with pytest.raises(ValueError):
        D.digits_dataset(12)


def test_split_is_disjoint_and_seeded():
    ds = D.synth_dataset(D.SynthSpec(classes=2, size=4, per_class=10), 0)
    tr, te = D.split(ds, 0.25, 0)
    assert len(tr.labels) == 15 and len(te.labels) == 5
    tr2, te2 = D.split(ds, 0.25, 0)
    assert np.array_equal(te.images, te2.images)
