"""Duplexer definition, synthesis and screw-level operations.

A device is two coupled-resonator channel filters joined on an ideal
junction. Screws perturb diagonal (resonator tuning) or mainline coupling
entries linearly in turns; the golden screw positions are the zero vector.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from . import metrics
from .sim import SweepState, duplexer_sparams, to_db

FORMAT = "dplx-device/1"
CHANNELS = ("A", "B")  # A: low band on port 3, B: high band on port 2
TOLERANCE_AREA = 50.0
N_CALIBRATION_DRAWS = 64


class SpecError(ValueError):
    """Invalid DeviceSpec field."""


class SynthesisError(ArithmeticError):
    """The spec is well-formed but yields no device meeting the requirement."""


@dataclass(frozen=True)
class ChannelSpec:
    center_ghz: float
    bandwidth_ghz: float


@dataclass(frozen=True)
class ScrewDef:
    channel: str
    i: int
    j: int
    sensitivity: float
    travel: float
    tolerance: float | None = None
    weight: float | None = None


@dataclass(frozen=True)
class DeviceSpec:
    n_resonators: int
    f_start: float
    f_stop: float
    channels: tuple[ChannelSpec, ChannelSpec]
    passbands: tuple[tuple[int, int], tuple[int, int]]
    n_points: int = 1300
    return_loss_target: float = 22.0
    screws: tuple[ScrewDef, ...] | None = None
    sensitivity_range: tuple[float, float] = (0.1, 1.0)
    travel_limit: float = 5.0
    untuned_area_target: float = 5000.0
    seed: int = 0

    def freq(self) -> np.ndarray:
        return np.linspace(self.f_start, self.f_stop, self.n_points)

    def validate(self) -> None:
        def fail(name: str, why: str) -> None:
            raise SpecError(f"invalid DeviceSpec.{name}: {why}")

        if self.n_resonators < 1:
            fail("n_resonators", "must be >= 1")
        if self.n_points < 2:
            fail("n_points", "must be >= 2")
        if not 0 < self.f_start < self.f_stop:
            fail("f_start", "need 0 < f_start < f_stop")
        if len(self.channels) != 2:
            fail("channels", "exactly two channels required")
        for ch in self.channels:
            if ch.bandwidth_ghz <= 0 or ch.center_ghz <= 0:
                fail("channels", "center and bandwidth must be positive")
        if len(self.passbands) != 2:
            fail("passbands", "exactly two passbands required")
        for start, stop in self.passbands:
            if not 0 <= start < stop <= self.n_points:
                fail("passbands", f"range {(start, stop)} empty or outside [0, {self.n_points})")
            if stop - start < metrics.N_SUBAREAS:
                fail("passbands", f"range {(start, stop)} shorter than {metrics.N_SUBAREAS}")
        (a0, a1), (b0, b1) = self.passbands
        if not a1 <= b0:
            fail("passbands", "low passband must precede and not overlap the high passband")
        lo, hi = self.sensitivity_range
        if not 0 < lo <= hi:
            fail("sensitivity_range", "need 0 < low <= high")
        if self.travel_limit <= 0:
            fail("travel_limit", "must be positive")
        if self.screws is not None:
            seen = set()
            for k, s in enumerate(self.screws):
                where = f"screws[{k}]"
                if s.channel not in CHANNELS:
                    fail(where, f"channel must be one of {CHANNELS}")
                i, j = sorted((s.i, s.j))
                if not (i == j or j == i + 1) or not 0 <= i <= j < self.n_resonators:
                    fail(where, f"entry ({s.i},{s.j}) is not a diagonal or mainline entry")
                if (s.channel, i, j) in seen:
                    fail(where, f"entry ({s.i},{s.j}) referenced twice")
                seen.add((s.channel, i, j))
                if s.sensitivity == 0:
                    fail(where, "sensitivity must be non-zero")
                if s.travel <= 0:
                    fail(where, "travel must be positive")
                if s.tolerance is not None and s.tolerance <= 0:
                    fail(where, "tolerance must be positive")
                if s.weight is not None and not 1.0 <= s.weight <= 10.0:
                    fail(where, "weight must lie in [1, 10]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = [asdict(c) for c in self.channels]
        d["passbands"] = [list(p) for p in self.passbands]
        d["sensitivity_range"] = list(self.sensitivity_range)
        d["screws"] = None if self.screws is None else [asdict(s) for s in self.screws]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSpec":
        d = dict(d)
        try:
            d["channels"] = tuple(ChannelSpec(**c) for c in d["channels"])
            d["passbands"] = tuple(tuple(int(v) for v in p) for p in d["passbands"])
            if "sensitivity_range" in d:
                d["sensitivity_range"] = tuple(d["sensitivity_range"])
            if d.get("screws") is not None:
                d["screws"] = tuple(ScrewDef(**s) for s in d["screws"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise SpecError(f"invalid DeviceSpec: {exc}") from exc


def frequency_plan(
    n_resonators: int,
    *,
    f_start: float = 1.90,
    f_stop: float = 2.14,
    low_band: tuple[float, float] = (1.92, 1.98),
    high_band: tuple[float, float] = (2.06, 2.12),
    n_points: int = 1300,
    bandwidth_factor: float = 1.08,
    seed: int = 0,
    **kwargs,
) -> DeviceSpec:
    """DeviceSpec from band edges in GHz; passband indices are the grid
    samples that fall inside each band."""
    freq = np.linspace(f_start, f_stop, n_points)
    channels, passbands = [], []
    for lo, hi in (low_band, high_band):
        channels.append(ChannelSpec(math.sqrt(lo * hi), (hi - lo) * bandwidth_factor))
        idx = np.flatnonzero((freq >= lo) & (freq <= hi))
        passbands.append((int(idx[0]), int(idx[-1]) + 1))
    return DeviceSpec(
        n_resonators=n_resonators,
        f_start=f_start,
        f_stop=f_stop,
        channels=tuple(channels),
        passbands=tuple(passbands),
        n_points=n_points,
        seed=seed,
        **kwargs,
    )


def desk_spec(seed: int = 0) -> DeviceSpec:
    """4 resonators per channel, 14 screws."""
    return frequency_plan(4, seed=seed)


def full_spec(seed: int = 0) -> DeviceSpec:
    """8 resonators per channel, 30 screws."""
    return frequency_plan(8, seed=seed)


def chebyshev_g(n: int, return_loss_db: float) -> np.ndarray:
    """Lowpass prototype values g0..g(n+1) for an equiripple response."""
    ripple_db = -10.0 * math.log10(1.0 - 10.0 ** (-return_loss_db / 10.0))
    beta = math.log(1.0 / math.tanh(ripple_db / (40.0 / math.log(10.0))))
    gamma = math.sinh(beta / (2 * n))
    a = [math.sin((2 * k - 1) * math.pi / (2 * n)) for k in range(1, n + 1)]
    b = [gamma**2 + math.sin(k * math.pi / n) ** 2 for k in range(1, n + 1)]
    g = [1.0, 2 * a[0] / gamma]
    for k in range(2, n + 1):
        g.append(4 * a[k - 2] * a[k - 1] / (b[k - 2] * g[k - 1]))
    g.append(1.0 if n % 2 else 1.0 / math.tanh(beta / 4) ** 2)
    return np.array(g)


def prototype_couplings(n: int, return_loss_db: float) -> tuple[np.ndarray, float, float]:
    """Synchronously tuned coupling matrix and external couplings."""
    g = chebyshev_g(n, return_loss_db)
    m = np.zeros((n, n))
    for i in range(n - 1):
        m[i, i + 1] = m[i + 1, i] = 1.0 / math.sqrt(g[i + 1] * g[i + 2])
    return m, 1.0 / (g[0] * g[1]), 1.0 / (g[n] * g[n + 1])


@dataclass(frozen=True, eq=False)
class Device:
    spec: DeviceSpec
    couplings: tuple[np.ndarray, np.ndarray]
    r_ext: tuple[tuple[float, float], tuple[float, float]]
    untuned_magnitude: float
    _screw_map: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {name: k for k, name in enumerate(CHANNELS)}
        smap = [(index[s.channel], s.i, s.j, s.sensitivity) for s in self.spec.screws]
        object.__setattr__(self, "_screw_map", smap)

    @property
    def screws(self) -> tuple[ScrewDef, ...]:
        return self.spec.screws

    @property
    def n_screws(self) -> int:
        return len(self.spec.screws)

    @property
    def freq(self) -> np.ndarray:
        return self.spec.freq()

    @property
    def passbands(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return self.spec.passbands

    @property
    def golden(self) -> np.ndarray:
        return np.zeros(self.n_screws)

    @property
    def travel(self) -> np.ndarray:
        return np.array([s.travel for s in self.screws])

    @property
    def tolerance(self) -> np.ndarray:
        return np.array([s.tolerance for s in self.screws])

    @property
    def weight(self) -> np.ndarray:
        return np.array([s.weight for s in self.screws])

    @property
    def sensitivity(self) -> np.ndarray:
        return np.array([s.sensitivity for s in self.screws])

    def coupling_at(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mats = [m.copy() for m in self.couplings]
        offset = np.asarray(positions, dtype=float) - self.golden
        for (ch, i, j, s), d in zip(self._screw_map, offset):
            mats[ch][i, j] += s * d
            if i != j:
                mats[ch][j, i] += s * d
        return mats[0], mats[1]

    def sparams(self, positions: np.ndarray, freq: np.ndarray | None = None) -> np.ndarray:
        freq = self.freq if freq is None else freq
        chans = tuple((c.center_ghz, c.bandwidth_ghz) for c in self.spec.channels)
        return duplexer_sparams(freq, self.coupling_at(positions), self.r_ext, chans)

    def areas(self, positions: np.ndarray) -> metrics.AreaPair:
        """Passband areas computed from the passband samples only."""
        freq = self.freq
        (a0, a1), (b0, b1) = self.passbands
        sel = np.r_[a0:a1, b0:b1]
        s11 = to_db(self.sparams(positions, freq[sel])[:, 0, 0])
        k = a1 - a0
        return metrics.AreaPair(
            float(np.maximum(s11[:k] + 20.0, 0).sum()),
            float(np.maximum(s11[k:] + 20.0, 0).sum()),
        )

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "spec": self.spec.to_dict(),
            "golden": {
                name: {"coupling": m.tolist(), "r_in": r[0], "r_out": r[1]}
                for name, m, r in zip(CHANNELS, self.couplings, self.r_ext)
            },
            "calibration": {"untuned_magnitude": self.untuned_magnitude},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "Device":
        if d.get("format") != FORMAT:
            raise ValueError(f"unsupported device format {d.get('format')!r}")
        spec = DeviceSpec.from_dict(d["spec"])
        spec.validate()
        if spec.screws is None or any(s.tolerance is None or s.weight is None for s in spec.screws):
            raise ValueError("device file lacks finalized screw definitions")
        golden = d["golden"]
        couplings = tuple(np.array(golden[n]["coupling"], dtype=float) for n in CHANNELS)
        r_ext = tuple((float(golden[n]["r_in"]), float(golden[n]["r_out"])) for n in CHANNELS)
        for m in couplings:
            if m.shape != (spec.n_resonators, spec.n_resonators) or not np.array_equal(m, m.T):
                raise ValueError("golden coupling matrix must be square, symmetric and sized n_resonators")
        return cls(spec, couplings, r_ext, float(d["calibration"]["untuned_magnitude"]))

    @classmethod
    def from_json(cls, text: str) -> "Device":
        return cls.from_dict(json.loads(text))


def save_device(device: Device, path) -> None:
    with open(path, "w") as fh:
        fh.write(device.to_json())


def load_device(path) -> Device:
    with open(path) as fh:
        return Device.from_json(fh.read())


# --- synthesis -------------------------------------------------------------

def _refine_golden(spec: DeviceSpec, couplings, r_ext):
    """Retune both channels jointly so the junction-loaded S11 meets the
    return-loss target on both passbands.

    Free variables per channel: diagonal, mainline, and both external
    couplings. Starts from the synchronously tuned prototype and stops as
    soon as the exceedance vanishes, so the result stays close to it.
    """
    n = spec.n_resonators
    freq = spec.freq()
    (a0, a1), (b0, b1) = spec.passbands
    fsel = freq[np.r_[a0:a1, b0:b1]]
    chans = tuple((c.center_ghz, c.bandwidth_ghz) for c in spec.channels)

    def pack(mats, rs):
        return np.concatenate([np.r_[np.diag(m), np.diag(m, 1), r] for m, r in zip(mats, rs)])

    def unpack(x):
        mats, rs, k = [], [], 0
        for _ in range(2):
            d, off = x[k:k + n], x[k + n:k + 2 * n - 1]
            k += 2 * n - 1
            mats.append(np.diag(d) + np.diag(off, 1) + np.diag(off, -1))
            rs.append((float(x[k]), float(x[k + 1])))
            k += 2
        return tuple(mats), tuple(rs)

    def residual(x):
        mats, rs = unpack(x)
        if min(min(r) for r in rs) <= 0:
            return np.full(len(fsel), 1e3)
        s11 = to_db(duplexer_sparams(fsel, mats, rs, chans)[:, 0, 0])
        return np.maximum(s11 + spec.return_loss_target, 0.0)

    x0 = pack(couplings, r_ext)
    if not residual(x0).any():
        return couplings, r_ext
    sol = least_squares(residual, x0, method="trf")
    return unpack(sol.x)


def _default_screws(spec: DeviceSpec) -> tuple[ScrewDef, ...]:
    rng = np.random.default_rng(spec.seed)
    entries = []
    for ch in CHANNELS:
        for i in range(spec.n_resonators):
            entries.append((ch, i, i))
            if i + 1 < spec.n_resonators:
                entries.append((ch, i, i + 1))
    lo, hi = spec.sensitivity_range
    sens = np.exp(rng.uniform(math.log(lo), math.log(hi), len(entries)))
    return tuple(
        ScrewDef(ch, i, j, float(s), spec.travel_limit) for (ch, i, j), s in zip(entries, sens)
    )


def _bisect(ok, lo: float, hi: float, iters: int = 24) -> float:
    """Largest x in [lo, hi] with ok(x), assuming ok(lo) and a single switch."""
    if ok(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _calibrate_tolerances(device: Device) -> tuple[ScrewDef, ...]:
    out = []
    for k, s in enumerate(device.screws):
        if s.tolerance is not None:
            out.append(s)
            continue

        def ok(d, k=k):
            for sign in (1.0, -1.0):
                pos = device.golden.copy()
                pos[k] += sign * d
                a = device.areas(pos)
                if max(a) >= TOLERANCE_AREA:
                    return False
            return True

        out.append(replace(s, tolerance=_bisect(ok, 0.0, s.travel)))
    return tuple(out)


def _default_weights(screws: tuple[ScrewDef, ...]) -> tuple[ScrewDef, ...]:
    smax = max(abs(s.sensitivity) for s in screws)
    return tuple(
        s if s.weight is not None
        else replace(s, weight=float(np.clip(10.0 * abs(s.sensitivity) / smax, 1.0, 10.0)))
        for s in screws
    )


def calibration_noise(device: Device, n: int = N_CALIBRATION_DRAWS) -> np.ndarray:
    rng = np.random.default_rng([device.spec.seed, 1])
    return rng.uniform(-1.0, 1.0, (n, device.n_screws))


def median_untuned_area(device: Device, magnitude: float, noise: np.ndarray | None = None) -> float:
    noise = calibration_noise(device) if noise is None else noise
    vals = []
    for u in noise:
        pos = np.clip(device.golden + magnitude * u, -device.travel, device.travel)
        vals.extend(device.areas(pos))
    return float(np.median(vals))


def _calibrate_magnitude(device: Device) -> float:
    noise = calibration_noise(device)
    target = device.spec.untuned_area_target
    hi = float(device.travel.min())
    if median_untuned_area(device, hi, noise) < target:
        raise SynthesisError(
            f"untuned area target {target} unreachable within travel {hi} turns"
        )
    return _bisect(lambda m: median_untuned_area(device, m, noise) < target, 0.0, hi)


def synthesize_device(spec: DeviceSpec) -> Device:
    """Build the golden device, per-screw tolerances/weights and the untuned
    noise magnitude. Deterministic for a given spec."""
    spec.validate()
    n = spec.n_resonators
    m, r_in, r_out = prototype_couplings(n, spec.return_loss_target)
    couplings, r_ext = _refine_golden(spec, (m, m.copy()), ((r_in, r_out), (r_in, r_out)))
    couplings = tuple(0.5 * (c + c.T) for c in couplings)
    if spec.screws is None:
        spec = replace(spec, screws=_default_screws(spec))
        spec.validate()
    device = Device(spec, couplings, r_ext, 0.0)
    golden_areas = device.areas(device.golden)
    if golden_areas.total != 0.0:
        worst = to_db(device.sparams(device.golden)[:, 0, 0])
        (a0, a1), (b0, b1) = spec.passbands
        raise SynthesisError(
            f"golden response misses -20 dB: worst S11 {worst[a0:a1].max():.2f} dB (low), "
            f"{worst[b0:b1].max():.2f} dB (high); too few resonators for the bandwidth?"
        )
    screws = _default_weights(_calibrate_tolerances(device))
    device = Device(replace(spec, screws=screws), couplings, r_ext, 0.0)
    return Device(device.spec, couplings, r_ext, _calibrate_magnitude(device))


# --- screw-level operations -------------------------------------------------

def sweep(device: Device, screws: np.ndarray) -> SweepState:
    screws = np.asarray(screws, dtype=float)
    if np.any(np.abs(screws) > device.travel + 1e-12):
        raise ValueError("screw position outside travel limit")
    s = device.sparams(screws)
    return SweepState(device.freq, to_db(s[:, 0, 0]), to_db(s[:, 1, 0]), to_db(s[:, 2, 0]))


def true_action(device: Device, screws: np.ndarray) -> np.ndarray:
    return device.golden - np.asarray(screws, dtype=float)


def apply_action(device: Device, screws: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, int]:
    """Add the deltas and clamp to travel; returns (positions, clamp count)."""
    raw = np.asarray(screws, dtype=float) + np.asarray(action, dtype=float)
    lim = device.travel
    out = np.clip(raw, -lim, lim)
    return out, int(np.count_nonzero(out != raw))


def randomize(device: Device, rng: np.random.Generator, magnitude: float | None = None) -> np.ndarray:
    magnitude = device.untuned_magnitude if magnitude is None else magnitude
    if magnitude <= 0:
        raise ValueError("magnitude must be positive")
    noise = rng.uniform(-magnitude, magnitude, device.n_screws)
    return np.clip(device.golden + noise, -device.travel, device.travel)


class Environment:
    """Mutable device handle: current screw positions plus sweep access."""

    def __init__(self, device: Device, positions: np.ndarray | None = None):
        self.device = device
        self.positions = device.golden.copy() if positions is None else np.array(positions, dtype=float)

    @property
    def n_screws(self) -> int:
        return self.device.n_screws

    def state(self) -> SweepState:
        return sweep(self.device, self.positions)

    def metric(self) -> metrics.AreaPair:
        return self.device.areas(self.positions)

    def apply(self, deltas: np.ndarray) -> np.ndarray:
        """Rotate screws; returns the deltas actually applied after clamping."""
        before = self.positions
        self.positions, _ = apply_action(self.device, before, deltas)
        return self.positions - before

    def set_positions(self, positions: np.ndarray) -> None:
        self.positions = np.array(positions, dtype=float)
