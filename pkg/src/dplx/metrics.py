"""Tuning metric, force vector, peak list and S21 shape features.

All functions are pure and operate on dB curves (1-d arrays) plus index
ranges given as half-open ``(start, stop)`` pairs.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import find_peaks as _scipy_find_peaks

SPEC_LEVEL_DB = -20.0
N_SUBAREAS = 10
DEFAULT_PROMINENCE = 3.0
DROP_WIDTH = 30
AMPLITUDE_SCALE = 80.0

Range = tuple[int, int]


class AreaPair(NamedTuple):
    low: float
    high: float

    @property
    def total(self) -> float:
        return self.low + self.high


class Peak(NamedTuple):
    index: int
    amplitude: float
    prominence: float


def _check_range(n: int, rng: Range) -> None:
    start, stop = rng
    if not 0 <= start < stop <= n:
        raise ValueError(f"index range {rng} outside curve of length {n}")


def area(s11: np.ndarray, passband: Range) -> float:
    """Summed exceedance of S11 above -20 dB over a passband."""
    s11 = np.asarray(s11, dtype=float)
    _check_range(len(s11), passband)
    seg = s11[passband[0]:passband[1]]
    return float(np.maximum(seg - SPEC_LEVEL_DB, 0.0).sum())


def areas(s11: np.ndarray, passbands: Sequence[Range]) -> AreaPair:
    low, high = passbands
    return AreaPair(area(s11, low), area(s11, high))


def forces(s11: np.ndarray, passbands: Sequence[Range]) -> np.ndarray:
    """20 subarea values in [0, 1], low band first.

    Each passband is cut into 10 contiguous slices (leading slices take the
    remainder) and each slice's area is divided by 20 dB times its length.
    """
    s11 = np.asarray(s11, dtype=float)
    out = []
    for start, stop in passbands:
        _check_range(len(s11), (start, stop))
        if stop - start < N_SUBAREAS:
            raise ValueError(f"passband {(start, stop)} shorter than {N_SUBAREAS} points")
        excess = np.maximum(s11[start:stop] - SPEC_LEVEL_DB, 0.0)
        for chunk in np.array_split(excess, N_SUBAREAS):
            out.append(chunk.sum() / (-SPEC_LEVEL_DB * len(chunk)))
    return np.clip(np.array(out), 0.0, 1.0)


def forces_batch(s11: np.ndarray, passbands: Sequence[Range]) -> np.ndarray:
    """Vectorized :func:`forces` over a (B, n_points) array."""
    s11 = np.asarray(s11, dtype=float)
    out = []
    for start, stop in passbands:
        excess = np.maximum(s11[:, start:stop] - SPEC_LEVEL_DB, 0.0)
        for chunk in np.array_split(excess, N_SUBAREAS, axis=1):
            out.append(chunk.sum(axis=1) / (-SPEC_LEVEL_DB * chunk.shape[1]))
    return np.clip(np.stack(out, axis=1), 0.0, 1.0)


def find_peaks(curve: np.ndarray, prominence: float = DEFAULT_PROMINENCE) -> list[Peak]:
    """Local minima (dips) of a dB curve with at least the given prominence.

    Flat-bottomed dips report their leftmost sample. Endpoints never count.
    """
    if prominence < 0:
        raise ValueError("prominence must be non-negative")
    curve = np.asarray(curve, dtype=float)
    idx, props = _scipy_find_peaks(-curve, prominence=prominence, plateau_size=1)
    left = props["left_edges"]
    return [
        Peak(int(i), float(curve[i]), float(p))
        for i, p in zip(left, props["prominences"])
    ]


def normalized_peaks(
    curve: np.ndarray, prominence: float = DEFAULT_PROMINENCE, cap: int = 64
) -> np.ndarray:
    """(k, 2) array of (index / n_points, amplitude / 80) for the k <= cap dips
    of highest prominence, in index order."""
    peaks = find_peaks(curve, prominence)
    if len(peaks) > cap:
        keep = sorted(range(len(peaks)), key=lambda k: -peaks[k].prominence)[:cap]
        peaks = [peaks[k] for k in sorted(keep)]
    n = len(curve)
    out = np.array([(p.index / n, p.amplitude / AMPLITUDE_SCALE) for p in peaks], dtype=float)
    return out.reshape(-1, 2)


def s21_regions(n_points: int, passbands: Sequence[Range], drop: int = DROP_WIDTH) -> list[Range]:
    """Plateau (high passband), left drop, right drop, sloping (low passband)."""
    low, high = passbands
    left = (max(high[0] - drop, 0), high[0])
    right = (high[1], min(high[1] + drop, n_points))
    regions = [tuple(high), left, right, tuple(low)]
    for r in regions:
        if r[1] - r[0] < 2:
            raise ValueError(f"S21 region {r} has fewer than 2 points")
    return regions


def s21_shape(s21: np.ndarray, regions: Sequence[Range]) -> np.ndarray:
    """Least-squares (slope, intercept) of S21 vs. index/n_points on each region."""
    s21 = np.asarray(s21, dtype=float)
    n = len(s21)
    coef = []
    for start, stop in regions:
        _check_range(n, (start, stop))
        x = np.arange(start, stop) / n
        design = np.stack([x, np.ones_like(x)], axis=1)
        sol, *_ = np.linalg.lstsq(design, s21[start:stop], rcond=None)
        coef.extend(sol)
    return np.array(coef)
