import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dplx.solver import SolverConfig, TuneError, fine_tune_step, partition, tune
from dplx.actor import ActorConfig, ActorPolicy, build_actor
from dplx.device import Environment

from stubs import AdditiveStub, FailingStub, ScheduleStub

EFFECTS = (-20.0, 4.0, 11.0)  # helpful, mild, harmful per screw


def expected_decisions(effects, groups, order, threshold):
    """Oracle: replay the group sequence on the additive model."""
    decisions = {}
    for g in order:
        degradation = sum(effects[i] for i in groups[g])
        decisions[g] = degradation <= threshold
    return decisions


@pytest.mark.parametrize("group_size", [1, 2, 3, 4])
def test_rollback_exhaustive_six_screws(group_size):
    cfg = SolverConfig(group_size=group_size, seed=0)
    for case, effects in enumerate(itertools.product(EFFECTS, repeat=6)):
        env = AdditiveStub(effects)
        rng = np.random.default_rng(case)
        mirror = np.random.default_rng(case)
        groups = partition(6, group_size, mirror)
        order = mirror.permutation(len(groups))
        want = expected_decisions(effects, groups, order, cfg.revert_threshold)

        start_area = sum(env.metric())
        improvement = fine_tune_step(env, lambda s: np.ones(6), cfg, rng)

        kept = [i for g in order if want[g] for i in groups[g]]
        expected_pos = np.zeros(6)
        expected_pos[kept] = 1.0
        assert np.array_equal(env.positions, expected_pos), effects
        assert improvement == start_area - sum(env.metric())
        # every revert restores the exact pre-group positions
        log = iter(env.log)
        for g in order:
            before, delta = next(log)
            assert set(np.flatnonzero(delta)) == set(groups[g])
            if not want[g]:
                restored_from, undo = next(log)
                assert np.array_equal(restored_from + undo, before)


def test_reverted_group_is_logged_and_counted():
    cfg = SolverConfig(group_size=3, full_steps=0, max_fine_steps=1, seed=1)
    env = AdditiveStub([11, 0, 0, -200, -200, -200])
    rep = tune(env, lambda s: np.ones(6), cfg)
    for entry in rep.groups:
        if entry["accepted"]:
            assert entry["after"] - entry["before"] <= 10
        else:
            assert entry["restored"] == entry["before"]
    # accepted groups move once, reverted ones twice
    n_moves = {i: 0 for i in range(6)}
    for e in rep.groups:
        for i in e["screws"]:
            n_moves[i] += 1 if e["accepted"] else 2
    assert rep.rotations.tolist() == [n_moves[i] for i in range(6)]


def test_known_bad_group_reverted():
    # the three screws together worsen area_sum by 11, the others help
    effects = [5, 3, 3, -100, -100, -100]
    cfg = SolverConfig(group_size=3)
    hits = 0
    for seed in range(40):
        env = AdditiveStub(effects)
        groups = partition(6, 3, np.random.default_rng(seed))
        fine_tune_step(env, lambda s: np.ones(6), cfg, np.random.default_rng(seed))
        if any(set(g) == {0, 1, 2} for g in groups):
            hits += 1
            assert np.all(env.positions[:3] == 0)
            assert np.all(env.positions[3:] == 1)
    assert hits > 0
    env = AdditiveStub(effects[:3])
    fine_tune_step(env, lambda s: np.ones(3), cfg, np.random.default_rng(0))
    assert np.all(env.positions == 0)


def test_stops_when_improvement_at_most_threshold():
    env = ScheduleStub([5000, 4000, 3400, 2999, 2599, 2598, 0])
    rep = tune(env, lambda s: np.ones(1), SolverConfig(full_steps=0, group_size=1))
    assert rep.fine_steps == 4  # improvements 1000, 600, 401, then 400 stops
    assert [s["improvement"] for s in rep.steps[1:]] == [1000, 600, 401, 400]
    assert rep.final_area == 2599


def test_max_fine_steps_cap():
    env = ScheduleStub([10000 - 1000 * k for k in range(11)])
    rep = tune(env, lambda s: np.ones(1), SolverConfig(full_steps=0, group_size=1, max_fine_steps=3))
    assert rep.fine_steps == 3
    assert len(rep.steps) == 1 + 3


def test_full_steps_are_logged():
    env = ScheduleStub([3000, 2000, 1000, 999, 998])
    rep = tune(env, lambda s: np.ones(1), SolverConfig(full_steps=2, group_size=1))
    assert [s["kind"] for s in rep.steps] == ["initial", "full", "full", "fine"]
    assert rep.fine_steps == 1
    assert rep.rotations.tolist() == [3]


def test_zero_actor_at_tuned_start(desk):
    actor = build_actor(ActorConfig(n_screws=14, nchan=4, head_hidden=(16,)))
    env = Environment(desk)
    rep = tune(env, ActorPolicy(actor, desk.passbands), SolverConfig())
    assert [s["kind"] for s in rep.steps] == ["initial", "full", "full", "fine"]
    assert rep.total_rotations == 0
    assert rep.fine_steps == 1 and rep.steps[-1]["improvement"] == 0
    assert np.array_equal(rep.final_positions, desk.golden)
    assert rep.final_state.n_points == 1300


def test_single_screw_helpful_step():
    env = AdditiveStub([-30.0])
    improvement = fine_tune_step(env, lambda s: np.ones(1), SolverConfig(), np.random.default_rng(0))
    assert improvement == 30.0


def test_all_groups_degrade_bound():
    env = AdditiveStub([50.0] * 6)
    cfg = SolverConfig(group_size=2)
    improvement = fine_tune_step(env, lambda s: np.ones(6), cfg, np.random.default_rng(0))
    assert np.all(env.positions == 0)
    assert -improvement <= 3 * cfg.revert_threshold


def test_failure_carries_partial_report():
    env = FailingStub([5000, 4000, 3000, 2000], fail_after=3)
    with pytest.raises(TuneError) as err:
        tune(env, lambda s: np.ones(1), SolverConfig(full_steps=2, group_size=1))
    rep = err.value.report
    assert len(rep.steps) == 3 and rep.final_positions is not None


def test_report_is_reproducible_per_seed():
    def run(seed):
        env = AdditiveStub([-300, 5, 20, -300, 2, -300, 9, -250])
        return tune(env, lambda s: np.ones(8) * 0.5, SolverConfig(full_steps=0, seed=seed)).to_json()

    assert run(3) == run(3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_partition_covers_each_index_once(n, g, seed):
    groups = partition(n, g, np.random.default_rng(seed))
    flat = np.concatenate(groups)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(x) == g for x in groups[:-1]) and 1 <= len(groups[-1]) <= g


@pytest.mark.parametrize("kwargs", [{"group_size": 0}, {"full_steps": -1}, {"revert_threshold": -1}])
def test_invalid_solver_config(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)
