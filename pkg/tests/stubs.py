"""Scripted environments for exercising the solver without the simulator."""
import numpy as np

from dplx.metrics import AreaPair


class AdditiveStub:
    """area_sum = base + sum_i effect_i * (x_i - x0_i) / unit_i.

    Applying the scripted action (unit_i on screw i) shifts area_sum by
    exactly effect_i, so every group's degradation is known in advance.
    Integer-valued effects keep the arithmetic exact.
    """

    def __init__(self, effects, base=1000.0, units=None):
        self.effects = np.asarray(effects, dtype=float)
        self.units = np.ones(len(effects)) if units is None else np.asarray(units, float)
        self.start = np.zeros(len(effects))
        self.positions = self.start.copy()
        self.base = base
        self.log = []  # (positions before, applied delta) per apply call

    @property
    def n_screws(self):
        return len(self.effects)

    def state(self):
        return self.positions.copy()

    def metric(self):
        total = self.base + float(self.effects @ ((self.positions - self.start) / self.units))
        return AreaPair(total / 2, total / 2)

    def apply(self, deltas):
        deltas = np.asarray(deltas, dtype=float)
        self.log.append((self.positions.copy(), deltas.copy()))
        self.positions = self.positions + deltas
        return deltas

    def set_positions(self, positions):
        self.log.append((self.positions.copy(), np.asarray(positions) - self.positions))
        self.positions = np.array(positions, dtype=float)


class ScheduleStub:
    """One screw whose area follows a table indexed by its (integer) position."""

    def __init__(self, table):
        self.table = list(table)
        self.positions = np.zeros(1)

    n_screws = 1

    def state(self):
        return self.positions.copy()

    def metric(self):
        v = self.table[min(int(self.positions[0]), len(self.table) - 1)]
        return AreaPair(v, 0.0)

    def apply(self, deltas):
        self.positions = self.positions + deltas
        return np.asarray(deltas, dtype=float)

    def set_positions(self, positions):
        self.positions = np.array(positions, dtype=float)


class FailingStub(ScheduleStub):
    """Raises a numeric failure after a fixed number of metric reads."""

    def __init__(self, table, fail_after):
        super().__init__(table)
        self.reads = 0
        self.fail_after = fail_after

    def metric(self):
        self.reads += 1
        if self.reads > self.fail_after:
            raise ArithmeticError("singular sweep")
        return super().metric()
