"""Coupling-matrix response of a two-channel duplexer on an ideal junction.

Port convention: port 1 is the common (antenna) port, port 2 the output of
the high-band channel, port 3 the output of the low-band channel. Networks
are normalized to unit reference impedance; no loss terms are modelled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DB_FLOOR = -120.0


class DegenerateConfiguration(ArithmeticError):
    """Raised when the network equations are singular at some frequency."""

    def __init__(self, message: str, freq_ghz: float | None = None):
        super().__init__(message)
        self.freq_ghz = freq_ghz


@dataclass(frozen=True)
class SweepState:
    """Amplitude sweep of the three S-parameters, in dB."""

    freq: np.ndarray
    s11: np.ndarray
    s21: np.ndarray
    s31: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.freq)

    def curves(self) -> np.ndarray:
        """(3, n_points) array in S11, S21, S31 order."""
        return np.stack([self.s11, self.s21, self.s31])

    @classmethod
    def from_curves(cls, freq: np.ndarray, curves: np.ndarray) -> "SweepState":
        curves = np.asarray(curves, dtype=float)
        return cls(np.asarray(freq, dtype=float), curves[0], curves[1], curves[2])

    def to_csv(self) -> str:
        lines = ["freq_ghz,s11_db,s21_db,s31_db"]
        for row in zip(self.freq, self.s11, self.s21, self.s31):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def lowpass_variable(freq: np.ndarray, center: float, bandwidth: float) -> np.ndarray:
    """Bandpass-to-lowpass frequency map; the channel passband maps to [-1, 1]."""
    return (center / bandwidth) * (freq / center - center / freq)


def channel_matrix(coupling: np.ndarray, r_in: float, r_out: float) -> np.ndarray:
    """Frequency-independent part M - jR of the channel network matrix."""
    n = coupling.shape[0]
    r = np.zeros((n, n), dtype=complex)
    r[0, 0] += r_in
    r[n - 1, n - 1] += r_out
    return coupling.astype(complex) - 1j * r


def channel_sparams(
    coupling: np.ndarray,
    r_in: float,
    r_out: float,
    lam: np.ndarray,
    freq: np.ndarray | None = None,
) -> np.ndarray:
    """Two-port S-parameters of a coupled-resonator filter, shape (F, 2, 2).

    Uses A = lam*I - jR + M and the usual reading of A^-1:
    S11 = 1 + 2j R_in [A^-1]_11, S22 = 1 + 2j R_out [A^-1]_nn,
    S21 = -2j sqrt(R_in R_out) [A^-1]_n1.
    """
    n = coupling.shape[0]
    a = lam[:, None, None] * np.eye(n) + channel_matrix(coupling, r_in, r_out)[None]
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        a_inv = None
    if a_inv is None or not np.all(np.isfinite(a_inv)):
        bad = _first_singular(a)
        f = None if freq is None else float(freq[bad])
        raise DegenerateConfiguration(
            f"channel matrix is singular at sample {bad}" + (f" ({f:.6f} GHz)" if f else ""),
            f,
        )
    s = np.empty((len(lam), 2, 2), dtype=complex)
    s[:, 0, 0] = 1 + 2j * r_in * a_inv[:, 0, 0]
    s[:, 1, 1] = 1 + 2j * r_out * a_inv[:, n - 1, n - 1]
    s[:, 1, 0] = -2j * np.sqrt(r_in * r_out) * a_inv[:, n - 1, 0]
    s[:, 0, 1] = -2j * np.sqrt(r_in * r_out) * a_inv[:, 0, n - 1]
    return s


def _first_singular(a: np.ndarray) -> int:
    cond = np.array([np.linalg.cond(m) for m in a])
    return int(np.argmax(~np.isfinite(cond) | (cond > 1e14)))


# Ideal lossless three-way parallel junction with matched reference ports.
JUNCTION = np.full((3, 3), 2.0 / 3.0) - np.eye(3)

# Port bookkeeping for the interconnection: junction ports j0 j1 j2,
# high channel h1 h2, low channel l1 l2 -> indices 0..6.
_EXTERNAL = [0, 4, 6]
_INTERNAL = [1, 3, 2, 5]
_LINKS = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)


def junction_sparams(s_high: np.ndarray, s_low: np.ndarray) -> np.ndarray:
    """Join two channel two-ports on an ideal parallel junction.

    Channel input ports are wired to junction arms; the remaining ports form
    the duplexer (common, high output, low output). Solved exactly by
    eliminating the internal waves: S = See + Sei (G - Sii)^-1 Sie.
    """
    nf = s_high.shape[0]
    s = np.zeros((nf, 7, 7), dtype=complex)
    s[:, :3, :3] = JUNCTION
    s[:, 3:5, 3:5] = s_high
    s[:, 5:7, 5:7] = s_low
    see = s[:, _EXTERNAL][:, :, _EXTERNAL]
    sei = s[:, _EXTERNAL][:, :, _INTERNAL]
    sie = s[:, _INTERNAL][:, :, _EXTERNAL]
    sii = s[:, _INTERNAL][:, :, _INTERNAL]
    try:
        a_int = np.linalg.solve(_LINKS[None] - sii, sie)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfiguration("junction interconnection is singular") from exc
    return see + sei @ a_int


def duplexer_sparams(
    freq: np.ndarray,
    couplings: tuple[np.ndarray, np.ndarray],
    r_ext: tuple[tuple[float, float], tuple[float, float]],
    channels: tuple[tuple[float, float], tuple[float, float]],
) -> np.ndarray:
    """Full complex 3x3 S-matrix at every frequency, shape (F, 3, 3).

    ``couplings``, ``r_ext`` and ``channels`` are ordered (low, high); each
    channel entry is (center GHz, bandwidth GHz).
    """
    parts = []
    for coupling, (r_in, r_out), (center, bw) in zip(couplings, r_ext, channels):
        lam = lowpass_variable(freq, center, bw)
        parts.append(channel_sparams(coupling, r_in, r_out, lam, freq))
    s_low, s_high = parts
    return junction_sparams(s_high, s_low)


def to_db(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(np.abs(x))
    return np.maximum(db, DB_FLOOR)
