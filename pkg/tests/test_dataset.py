import hashlib
import struct

import numpy as np
import pytest

from dplx.dataset import (
    BadMagic,
    BadVersion,
    Dataset,
    DatasetFormatError,
    Truncated,
    from_bytes,
    load,
    save,
    to_bytes,
)

FP = hashlib.sha256(b"device").hexdigest()


def make(n=4, points=20, screws=3, seed=0):
    g = np.random.default_rng(seed)
    return Dataset(g.normal(size=(n, 3, points)), g.normal(size=(n, screws)),
                   g.normal(size=(n, screws)), FP)


def test_layout_is_bit_exact():
    ds = make(n=2, points=5, screws=2)
    buf = to_bytes(ds)
    # hand-assembled reference: header then records, all little-endian
    ref = b"DPXD" + struct.pack("<IIIIQ", 1, 5, 3, 2, 2) + bytes.fromhex(FP)
    for r in range(2):
        ref += ds.curves[r].astype("<f4").tobytes()      # S11, S21, S31 in order
        ref += ds.actions[r].astype("<f4").tobytes()
        ref += ds.positions[r].astype("<f4").tobytes()
    assert buf == ref


def test_round_trip(tmp_path):
    ds = make()
    save(ds, tmp_path / "d.dpxd")
    back = load(tmp_path / "d.dpxd")
    assert back.fingerprint == FP
    for name in ("curves", "actions", "positions"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))


def test_empty_dataset_round_trip():
    ds = Dataset(np.empty((0, 3, 7)), np.empty((0, 4)), np.empty((0, 4)), FP)
    back = from_bytes(to_bytes(ds))
    assert len(back) == 0 and back.n_points == 7 and back.n_screws == 4


def test_bad_magic():
    buf = bytearray(to_bytes(make()))
    buf[:4] = b"XXXX"
    with pytest.raises(BadMagic):
        from_bytes(bytes(buf))


def test_bad_version():
    buf = bytearray(to_bytes(make()))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(BadVersion, match="version 2"):
        from_bytes(bytes(buf))


@pytest.mark.parametrize("cut", [10, 40, 1])
def test_truncated(cut):
    buf = to_bytes(make())
    with pytest.raises(Truncated):
        from_bytes(buf[:-cut] if cut > 1 else buf[:30])


def test_trailing_bytes_rejected():
    with pytest.raises(DatasetFormatError, match="trailing"):
        from_bytes(to_bytes(make()) + b"\0")


def test_errors_are_distinct():
    assert len({BadMagic, BadVersion, Truncated}) == 3
    for cls in (BadMagic, BadVersion, Truncated):
        assert issubclass(cls, DatasetFormatError)


def test_shape_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2, 5)), np.zeros((2, 3)), np.zeros((2, 3)), FP)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 5)), np.zeros((3, 3)), np.zeros((3, 3)), FP)


def test_concat_and_subset():
    a, b = make(seed=1), make(seed=2)
    c = Dataset.concat([a, b])
    assert len(c) == 8
    assert np.array_equal(c.subset(slice(4, 8)).curves, b.curves)
    other = make()
    other.fingerprint = "00" * 32
    with pytest.raises(ValueError):
        Dataset.concat([a, other])
