import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficrl import scenario as sc
from trafficrl.dynamics import step_arrays
from trafficrl.features import feature_dim
from trafficrl.policy import ParameterSet, init_policy
from trafficrl.simulator import (LOG_COLUMNS, PolicyMixture, SimulationError, batch_scenes, read_trajectory_csv,
                                 rollout, rollout_batch, shaped_reward, step_scene, trajectory_csv)

GAMMA = 0.79


def zero_policy(hidden=(8, 8, 8)):
    """Mean action (0, 0) everywhere: agents coast."""
    p = init_policy(feature_dim(), hidden)
    return ParameterSet(p.in_dim, p.hidden, p.out_dim, np.zeros(p.size))


def handmade_spec(states, hero=None, hero_params=None, variant=0, family="hard_brake"):
    states = np.asarray(states, float)
    n = len(states)
    hero = np.zeros(n, bool) if hero is None else np.asarray(hero)
    return sc.ScenarioSpec(variant, np.stack([sc._backfill(s, sc.HISTORY) for s in states]),
                           np.tile(sc.DEFAULT_DIMS, (n, 1)), hero, hero_params or {}, np.zeros(n, int),
                           states[:, 3].copy(), None, 0, family)


def lane_y(lane=0, variant=0):
    return float(sc.lane_graph(variant).lanes[lane][0, 1])


def planted_crash(gap=17.0):
    """Hero cruising at 10 m/s into a parked learner ``gap`` metres ahead."""
    y = lane_y()
    params = {0: {"family": "hard_brake", "trigger": "distance", "target": 1, "lane": 0, "goal_lane": 0,
                  "cruise_speed": 10.0, "aggressiveness": 1.0, "trigger_distance": 0.0, "trigger_ttc": 0.0}}
    return handmade_spec([[50.0, y, 0.0, 10.0], [50.0 + gap, y, 0.0, 0.0]], hero=[True, False],
                         hero_params=params)


# ---------------------------------------------------------------- shaped reward

@pytest.mark.parametrize("v, bonus, stop", [(27.0, 0.5, False), (57.0, 0.0, True), (12.0, 0.25, False)])
def test_shaped_reward_examples(v, bonus, stop):
    b, s = shaped_reward(np.array([0.0, 0.0, 0.0, v]), 27.0)
    assert b == pytest.approx(bonus, abs=1e-15) and bool(s) is stop


def test_shaped_reward_needs_positive_limit():
    with pytest.raises(SimulationError):
        shaped_reward(np.zeros(4), 0.0)


# ------------------------------------------------------------------ step_scene

def test_step_without_infraction():
    y = lane_y()
    scene = batch_scenes([handmade_spec([[50.0, y, 0.0, 10.0], [90.0, y, 0.0, 10.0]])])
    _, r, col, off, _ = step_scene(scene, np.zeros((1, 2, 2)))
    assert np.all(r == 0) and not col.any() and not off.any()


def test_overlap_penalises_both_parties():
    y = lane_y()
    scene = batch_scenes([handmade_spec([[50.0, y, 0.0, 10.0], [53.0, y, 0.0, 10.0], [90.0, y, 0.0, 10.0]])])
    nxt, r, col, _, _ = step_scene(scene, np.zeros((1, 3, 2)))
    np.testing.assert_array_equal(r, [[-1.0, -1.0, 0.0]])
    np.testing.assert_array_equal(col, [[True, True, False]])
    # the penalty is paid once
    _, r2, col2, _, _ = step_scene(nxt, np.zeros((1, 3, 2)))
    assert col2[0, :2].all() and np.all(r2 == 0)


def test_offroad_agent_alone_is_penalised():
    y = lane_y()
    scene = batch_scenes([handmade_spec([[50.0, y - 30.0, 0.0, 10.0], [90.0, y, 0.0, 10.0]])])
    _, r, _, off, _ = step_scene(scene, np.zeros((1, 2, 2)))
    np.testing.assert_array_equal(r, [[-1.0, 0.0]])
    np.testing.assert_array_equal(off, [[True, False]])


def test_action_shape_mismatch():
    scene = batch_scenes([handmade_spec([[50.0, lane_y(), 0.0, 10.0]])])
    with pytest.raises(SimulationError):
        step_scene(scene, np.zeros((1, 2, 2)))


# --------------------------------------------------------------------- rollout

def test_rollout_lengths(nominal_specs):
    tr = rollout(PolicyMixture(controller="oracle"), nominal_specs[0], 10, termination="none")
    assert tr.states.shape[1] == 11 and tr.actions.shape[1] == 10
    assert not tr.terminated[0]
    with pytest.raises(SimulationError):
        rollout(PolicyMixture(), nominal_specs[0], 0)


def test_rollout_determinism(nominal_specs, longtail_specs):
    p = init_policy(feature_dim(), (8, 8, 8), np.random.default_rng(0))
    specs = nominal_specs + longtail_specs
    runs = [rollout_batch(PolicyMixture(p), specs, 6, mode="sample", rng=np.random.default_rng(3))
            for _ in range(2)]
    for name in ("states", "actions", "rewards", "log_probs", "length"):
        np.testing.assert_array_equal(getattr(runs[0], name), getattr(runs[1], name))


def test_planted_collision_terminates_at_tick_3():
    tr = rollout(PolicyMixture(zero_policy()), planted_crash(), 10)
    assert tr.termination_tick == [3]
    assert tr.states.shape[1] == 4 and tr.actions.shape[1] == 3
    np.testing.assert_array_equal(tr.rewards[0, :, :].sum(0), [-1.0, -1.0])
    assert tr.rewards[0, 2].tolist() == [-1.0, -1.0]
    full = rollout_batch(PolicyMixture(zero_policy()), [planted_crash()], 10)
    assert np.isnan(full.states[0, 4:]).all() and np.isnan(full.actions[0, 3:]).all()
    assert np.all(full.rewards[0, 3:] == 0)


def test_agent_termination_removes_only_the_infractor():
    y = lane_y()
    spec = handmade_spec([[50.0, y - 30.0, 0.0, 10.0], [90.0, y, 0.0, 10.0]])
    tr = rollout_batch(PolicyMixture(zero_policy()), [spec], 4, termination="agent")
    assert tr.length[0] == 4
    assert tr.alive[0, :, 0].tolist() == [True, False, False, False, False]
    assert tr.alive[0, :, 1].all()
    assert tr.rewards[0, :, 0].tolist() == [-1.0, 0.0, 0.0, 0.0]
    assert np.all(tr.states[0, 2:, 0] == tr.states[0, 1, 0])


def test_heroes_are_never_learners(longtail_specs):
    p = init_policy(feature_dim(), (8, 8, 8), np.random.default_rng(0))
    tr = rollout_batch(PolicyMixture(p), longtail_specs, 8, mode="sample", rng=np.random.default_rng(1))
    for b, spec in enumerate(longtail_specs):
        src = tr.source[b, :spec.n_agents]
        assert set(src[spec.hero_flags]) == {"hero"}
        assert set(src[~spec.hero_flags]) == {"learner"}
        assert np.all(tr.log_probs[b, :, :spec.n_agents][:, spec.hero_flags] == 0)


def test_replay_reproduces_states(nominal_specs, longtail_specs):
    p = init_policy(feature_dim(), (8, 8, 8), np.random.default_rng(2))
    specs = nominal_specs + longtail_specs
    tr = rollout_batch(PolicyMixture(p), specs, 8, mode="sample", rng=np.random.default_rng(4))
    for b, spec in enumerate(specs):
        one = tr.scene(b)
        for t in range(int(one.length[0])):
            live = one.alive[0, t]
            nxt, _ = step_arrays(one.states[0, t], one.actions[0, t], spec.dims[:, 0])
            np.testing.assert_allclose(nxt[live], one.states[0, t + 1][live], atol=1e-9, rtol=0)


def test_il_horizon_checked_against_log(nominal_specs):
    with pytest.raises(SimulationError, match="exceeds the expert log"):
        rollout_batch(PolicyMixture(zero_policy()), nominal_specs, 25, require_log=True)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sparse_returns_are_single_discounted_penalties(seed):
    rng = np.random.default_rng(seed)
    specs = [sc.sample_concrete_scenario(sc.default_logical(sc.FAMILIES[seed % 3]), seed)]
    p = init_policy(feature_dim(), (8, 8, 8), rng)
    tr = rollout_batch(PolicyMixture(p), specs, 10, mode="sample", rng=rng)
    ret = tr.discounted_returns(GAMMA)[0]
    allowed = np.concatenate([[0.0], -GAMMA ** np.arange(10)])
    assert np.all(np.min(np.abs(ret[:, None] - allowed[None]), axis=1) < 1e-12)
    assert set(np.unique(tr.rewards)) <= {0.0, -1.0}


# ----------------------------------------------------------------- trajectory log

def test_log_round_trip(nominal_specs):
    p = init_policy(feature_dim(), (8, 8, 8), np.random.default_rng(0))
    tr = rollout_batch(PolicyMixture(p), nominal_specs + [planted_crash()], 5)
    text = trajectory_csv(tr)
    assert text.splitlines()[0] == ",".join(LOG_COLUMNS)
    logs = read_trajectory_csv(text)
    assert len(logs) == tr.batch
    for b, lg in enumerate(logs):
        one = tr.scene(b)
        np.testing.assert_array_equal(lg.states, one.states[0])
        np.testing.assert_array_equal(lg.actions, one.actions[0])
        np.testing.assert_array_equal(lg.rewards, one.rewards[0])
        np.testing.assert_array_equal(lg.source, one.source[0])
    assert logs[-1].actions.shape[0] == 3


def test_log_with_wrong_columns():
    with pytest.raises(SimulationError):
        read_trajectory_csv("a,b\n1,2\n")
