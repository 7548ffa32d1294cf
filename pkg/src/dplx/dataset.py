"""DPXD binary dataset container.

Layout (little-endian): magic ``DPXD``, u32 version, u32 n_points,
u32 n_curves (=3), u32 n_screws, u64 n_records, 32-byte SHA-256 device
fingerprint; then per record 3*n_points f32 dB values (S11, S21, S31),
n_screws f32 true-action turns, n_screws f32 absolute positions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DPXD"
VERSION = 1
N_CURVES = 3
_HEADER = struct.Struct("<4sIIIIQ32s")


class DatasetFormatError(ValueError):
    pass


class BadMagic(DatasetFormatError):
    pass


class BadVersion(DatasetFormatError):
    pass


class Truncated(DatasetFormatError):
    pass


@dataclass
class Dataset:
    curves: np.ndarray  # (N, 3, n_points) float32 dB
    actions: np.ndarray  # (N, n_screws) float32 turns
    positions: np.ndarray  # (N, n_screws) float32 turns
    fingerprint: str  # hex SHA-256 of the device JSON

    def __post_init__(self):
        self.curves = np.asarray(self.curves, dtype="<f4")
        self.actions = np.asarray(self.actions, dtype="<f4")
        self.positions = np.asarray(self.positions, dtype="<f4")
        if self.curves.ndim != 3 or self.curves.shape[1] != N_CURVES:
            raise ValueError("curves must have shape (N, 3, n_points)")
        if self.actions.ndim != 2 or self.actions.shape != self.positions.shape:
            raise ValueError("actions and positions must share shape (N, n_screws)")
        if len(self.actions) != len(self.curves):
            raise ValueError("record count mismatch between curves and actions")

    def __len__(self) -> int:
        return len(self.curves)

    @property
    def n_points(self) -> int:
        return self.curves.shape[2]

    @property
    def n_screws(self) -> int:
        return self.actions.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.curves[idx], self.actions[idx], self.positions[idx], self.fingerprint)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        fps = {p.fingerprint for p in parts}
        if len(fps) != 1:
            raise ValueError("cannot concatenate datasets from different devices")
        return Dataset(
            np.concatenate([p.curves for p in parts]),
            np.concatenate([p.actions for p in parts]),
            np.concatenate([p.positions for p in parts]),
            fps.pop(),
        )


def _record_dtype(n_points: int, n_screws: int) -> np.dtype:
    return np.dtype([
        ("curves", "<f4", (N_CURVES, n_points)),
        ("action", "<f4", (n_screws,)),
        ("positions", "<f4", (n_screws,)),
    ])


def to_bytes(ds: Dataset) -> bytes:
    n_points, n_screws = ds.n_points, ds.n_screws
    header = _HEADER.pack(MAGIC, VERSION, n_points, N_CURVES, n_screws, len(ds), bytes.fromhex(ds.fingerprint))
    rec = np.empty(len(ds), dtype=_record_dtype(n_points, n_screws))
    rec["curves"] = ds.curves
    rec["action"] = ds.actions
    rec["positions"] = ds.positions
    return header + rec.tobytes()


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not a DPXD dataset (bad magic)")
    if len(buf) < _HEADER.size:
        raise Truncated(f"header truncated: {len(buf)} of {_HEADER.size} bytes")
    _, version, n_points, n_curves, n_screws, n_records, fp = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise BadVersion(f"unsupported DPXD version {version}")
    if n_curves != N_CURVES:
        raise DatasetFormatError(f"expected {N_CURVES} curves per record, found {n_curves}")
    dtype = _record_dtype(n_points, n_screws)
    need = _HEADER.size + n_records * dtype.itemsize
    if len(buf) < need:
        raise Truncated(f"file truncated: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise DatasetFormatError(f"{len(buf) - need} trailing bytes after last record")
    rec = np.frombuffer(buf, dtype=dtype, count=n_records, offset=_HEADER.size).copy()
    return Dataset(
        rec["curves"].reshape(n_records, N_CURVES, n_points),
        rec["action"].reshape(n_records, n_screws),
        rec["positions"].reshape(n_records, n_screws),
        fp.hex(),
    )


def save(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ds))


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
