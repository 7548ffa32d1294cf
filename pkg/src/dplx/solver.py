"""Outer tuning loop: full actor steps, then grouped fine-tuning with rollback.

The environment is any object exposing ``state()``, ``metric()`` (an
``AreaPair``), ``apply(deltas)`` returning the deltas actually applied,
``set_positions(p)``, ``positions`` and ``n_screws``. The policy is a
callable mapping a state to a per-screw action.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    full_steps: int = 2
    group_size: int = 3
    revert_threshold: float = 10.0
    continue_threshold: float = 400.0
    max_fine_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.full_steps < 0 or self.group_size < 1 or self.max_fine_steps < 0:
            raise ValueError("full_steps >= 0, group_size >= 1, max_fine_steps >= 0 required")
        if self.revert_threshold < 0 or self.continue_threshold < 0:
            raise ValueError("thresholds must be non-negative")


@dataclass
class TuneReport:
    steps: list[dict] = field(default_factory=list)
    groups: list[dict] = field(default_factory=list)
    rotations: np.ndarray | None = None
    final_positions: np.ndarray | None = None
    final_state: object = None
    fine_steps: int = 0
    states: list = field(default_factory=list)

    @property
    def final_area(self) -> float:
        return self.steps[-1]["area_sum"]

    @property
    def total_rotations(self) -> int:
        return int(self.rotations.sum())

    @property
    def mean_rotations(self) -> float:
        return float(self.rotations.mean())

    def log_step(self, kind: str, metric, improvement: float | None = None) -> None:
        self.steps.append({
            "step": len(self.steps),
            "kind": kind,
            "area_low": float(metric.low),
            "area_high": float(metric.high),
            "area_sum": float(metric.low + metric.high),
            "improvement": improvement,
        })

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "groups": self.groups,
            "rotations": self.rotations.astype(int).tolist(),
            "total_rotations": self.total_rotations,
            "mean_rotations_per_screw": self.mean_rotations,
            "fine_steps": self.fine_steps,
            "final_area_sum": self.final_area,
            "final_positions": np.asarray(self.final_positions, dtype=float).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


class TuneError(RuntimeError):
    """Environment failure during tuning; carries the partial report."""

    def __init__(self, message: str, report: TuneReport):
        super().__init__(message)
        self.report = report


def partition(n: int, group_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random partition of range(n) into groups of group_size (last may be short)."""
    perm = rng.permutation(n)
    return [perm[i:i + group_size] for i in range(0, n, group_size)]


def fine_tune_step(env, policy, config: SolverConfig, rng: np.random.Generator,
                   report: TuneReport | None = None) -> float:
    """One fine-tuning pass; returns area_sum before minus area_sum after.

    The action is computed once, then applied group by group in random
    order. A group that raises area_sum by more than revert_threshold over
    the pre-group value is rolled back to the exact prior positions.
    """
    report = report if report is not None else TuneReport(rotations=np.zeros(env.n_screws, dtype=int))
    step = len(report.steps)
    start = env.metric()
    current = start.low + start.high
    action = np.asarray(policy(env.state()), dtype=float)
    groups = partition(env.n_screws, config.group_size, rng)
    for g in rng.permutation(len(groups)):
        grp = groups[g]
        saved = env.positions.copy()
        delta = np.zeros(env.n_screws)
        delta[grp] = action[grp]
        applied = env.apply(delta)
        moved = applied != 0
        report.rotations += moved
        m = env.metric()
        after = m.low + m.high
        entry = {"step": step, "screws": [int(i) for i in grp], "before": current,
                 "after": after, "accepted": True}
        if after - current > config.revert_threshold:
            env.set_positions(saved)
            report.rotations += moved
            m = env.metric()
            after = m.low + m.high
            entry["accepted"] = False
            entry["restored"] = after
        report.groups.append(entry)
        current = after
    end = env.metric()
    improvement = (start.low + start.high) - (end.low + end.high)
    report.log_step("fine", end, improvement)
    return improvement


def tune(env, policy, config: SolverConfig = SolverConfig(), record_states: bool = False) -> TuneReport:
    """Full steps followed by fine-tuning until a step improves by no more
    than continue_threshold or max_fine_steps is reached."""
    rng = np.random.default_rng(config.seed)
    report = TuneReport(rotations=np.zeros(env.n_screws, dtype=int))
    try:
        report.log_step("initial", env.metric())
        if record_states:
            report.states.append(env.state())
        for _ in range(config.full_steps):
            before = report.steps[-1]["area_sum"]
            action = np.asarray(policy(env.state()), dtype=float)
            report.rotations += env.apply(action) != 0
            m = env.metric()
            report.log_step("full", m, before - (m.low + m.high))
            if record_states:
                report.states.append(env.state())
        for _ in range(config.max_fine_steps):
            improvement = fine_tune_step(env, policy, config, rng, report)
            report.fine_steps += 1
            if record_states:
                report.states.append(env.state())
            if improvement <= config.continue_threshold:
                break
        report.final_state = env.state()
    except ArithmeticError as exc:
        report.final_positions = env.positions.copy()
        raise TuneError(f"environment failure: {exc}", report) from exc
    report.final_positions = env.positions.copy()
    return report


def config_dict(config: SolverConfig) -> dict:
    return asdict(config)
