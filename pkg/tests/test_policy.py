import json
import math

import numpy as np
import pytest

from trafficrl import autodiff as ad
from trafficrl.features import HIST_CH, K_NEIGHBORS, NBR_CH, extract_features, feature_dim, scene_features
from trafficrl.geometry import build_lane_graph
from trafficrl.maps import map_variant
from trafficrl.policy import (ActionDistribution, PolicyError, checkpoint_bytes, init_policy, init_value,
                              load_checkpoint, log_prob, mlp, policy_forward, sample_action, value_forward)
from trafficrl.scene import MapBatch, SceneState

H = 10
F = feature_dim(H)
NBR0 = HIST_CH * (H + 1)
LANE0 = NBR0 + NBR_CH * K_NEIGHBORS


def make_scene(states, graph=None, hero=None):
    """Scene on the two-lane straight map with constant-velocity histories."""
    states = np.asarray(states, float)
    graph = graph or build_lane_graph(map_variant(0))
    n = len(states)
    k = np.arange(-H, 1) * 0.5
    hist = np.stack([np.stack([s[0] + s[3] * math.cos(s[2]) * k, s[1] + s[3] * math.sin(s[2]) * k,
                               np.full_like(k, s[2]), np.full_like(k, s[3])], 1) for s in states])
    hero = np.zeros(n, bool) if hero is None else np.asarray(hero)
    return SceneState(states[None].copy(), hist[None], np.tile([2.8, 4.6, 1.9], (1, n, 1)), np.ones((1, n), bool),
                      hero[None], np.ones((1, n), bool), np.zeros((1, n), bool), MapBatch.from_graphs([graph]))


def _rigid(spec, angle, shift):
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    out = dict(spec)
    out["lanes"] = [dict(l, centerline=(np.asarray(l["centerline"]) @ R.T + shift).tolist()) for l in spec["lanes"]]
    out["road_polygon"] = (np.asarray(spec["road_polygon"]) @ R.T + shift).tolist()
    return out


def test_feature_dimension_and_finiteness(nominal_specs):
    from trafficrl.simulator import batch_scenes
    f = scene_features(batch_scenes(nominal_specs))
    assert f.shape[-1] == F == 86
    assert np.all(np.isfinite(f))


def test_on_centerline_agent_has_zero_lane_offset():
    graph = build_lane_graph(map_variant(0))
    y = graph.lanes[0][0, 1]
    f = extract_features(make_scene([[100.0, y, 0.0, 20.0]], graph), 0)
    assert f[LANE0] == pytest.approx(0, abs=1e-12) and f[LANE0 + 1] == pytest.approx(0, abs=1e-12)


def test_stationary_history_is_zero_and_lone_agent_has_sentinels():
    graph = build_lane_graph(map_variant(0))
    f = extract_features(make_scene([[100.0, graph.lanes[0][0, 1], 0.0, 0.0]], graph), 0)
    hist = f[:NBR0].reshape(H + 1, HIST_CH)
    np.testing.assert_array_equal(hist[:, :2], 0.0)
    slots = f[NBR0:LANE0].reshape(K_NEIGHBORS, NBR_CH)
    np.testing.assert_array_equal(slots[:, -1], 1.0)
    np.testing.assert_array_equal(slots[:, :-1], 0.0)


def test_neighbor_ties_break_by_agent_index():
    graph = build_lane_graph(map_variant(0))
    y = graph.lanes[0][0, 1]
    # agents 1 and 2 are equidistant (ahead and behind); agent 1 must fill slot 0
    f = extract_features(make_scene([[100, y, 0, 20], [110, y, 0, 20], [90, y, 0, 20]], graph), 0)
    slots = f[NBR0:LANE0].reshape(K_NEIGHBORS, NBR_CH)
    assert slots[0, 0] > 0 > slots[1, 0]


def test_offmap_agent_flagged():
    f = extract_features(make_scene([[100.0, 60.0, 0.0, 10.0]]), 0)
    assert f[LANE0 + 5] == 1.0 and f[LANE0] == 0.0


@pytest.mark.parametrize("angle,shift", [(0.7, (30.0, -12.0)), (-2.1, (-500.0, 250.0))])
def test_viewpoint_invariance(angle, shift):
    base = map_variant(3)
    g0, g1 = build_lane_graph(base), build_lane_graph(_rigid(base, angle, np.array(shift)))
    states = np.array([[50.0, g0.lanes[0][0, 1] + 0.3, 0.02, 22.0], [70.0, g0.lanes[1][0, 1], -0.01, 25.0],
                       [40.0, g0.lanes[1][0, 1] - 0.2, 0.0, 21.0]])
    c, s = math.cos(angle), math.sin(angle)
    moved = states.copy()
    moved[:, :2] = states[:, :2] @ np.array([[c, -s], [s, c]]).T + shift
    moved[:, 2] += angle
    f0 = scene_features(make_scene(states, g0, hero=[False, True, False]))
    f1 = scene_features(make_scene(moved, g1, hero=[False, True, False]))
    np.testing.assert_allclose(f0, f1, atol=1e-9)


def test_zero_network_outputs():
    p = init_policy(F, (8, 8, 8))
    p.values[:] = 0.0
    d = policy_forward(p, np.ones(F))
    np.testing.assert_array_equal(d.mu, 0.0)
    np.testing.assert_allclose(d.sigma, math.log(2) + 1e-4, rtol=1e-12)
    assert d.sigma[0] == pytest.approx(0.6933, abs=1e-4)
    v = init_value(F, (8, 8, 8))
    v.values[:] = 0.0
    assert value_forward(v, np.ones(F)) == 0.0


def test_dimension_mismatch_rejected():
    p = init_policy(F, (8, 8, 8))
    with pytest.raises(PolicyError):
        policy_forward(p, np.ones(F + 1))
    with pytest.raises(PolicyError):
        value_forward(init_value(F, (8, 8, 8)), np.ones(F - 1))


def test_forward_is_pure(rng):
    p = init_policy(F, (8, 8, 8), rng)
    f = rng.normal(size=F)
    a, b = policy_forward(p, f), policy_forward(p, f.copy())
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.sigma, b.sigma)


@pytest.mark.parametrize("head", ["mu", "value"])
def test_parameter_gradients_match_finite_differences(head, rng):
    p = init_policy(F, (6, 5, 4), rng, steer_sigma=0.3) if head == "mu" else init_value(F, (6, 5, 4), rng)
    f = rng.normal(size=(3, F))
    w = rng.normal(size=(3, 4 if head == "mu" else 1))

    def loss(theta):
        out = mlp(p, f, theta)
        if head == "mu":
            d = policy_forward(p, f, theta)
            out = ad.concatenate([d.mu, d.sigma], axis=-1)
        return ad.reduce_sum(out * w)

    theta = ad.Var(p.values)
    (g,) = ad.grad(loss(theta), [theta])
    h = 1e-4
    fd = np.array([(-loss(p.values + 2 * h * e) + 8 * loss(p.values + h * e) - 8 * loss(p.values - h * e)
                    + loss(p.values - 2 * h * e)) / (12 * h) for e in np.eye(p.size)])
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-7)
    assert rel.max() < 1e-6


def test_batched_parameters_match_single_forward(rng):
    p = init_policy(F, (6, 5, 4), rng)
    f = rng.normal(size=(2, 3, F))
    thetas = p.values + 0.01 * rng.normal(size=(2, p.size))
    out = mlp(p, f, thetas)
    for b in range(2):
        np.testing.assert_allclose(out[b], mlp(p, f[b], thetas[b]), atol=1e-12)


def test_sample_modes(rng):
    d = ActionDistribution(np.array([0.5, 0.01]), np.array([0.2, 0.02]))
    np.testing.assert_array_equal(sample_action(d, rng, "mean").action, d.mu)
    np.testing.assert_array_equal(sample_action(d, rng, "reparameterized", z=np.zeros(2)).action, d.mu)
    np.testing.assert_allclose(sample_action(d, rng, "reparameterized", z=np.ones(2)).action, d.mu + d.sigma)
    big = sample_action(d, rng, "reparameterized", z=np.array([100.0, -100.0]))
    np.testing.assert_array_equal(big.clipped, [True, True])
    np.testing.assert_array_equal(big.action, [6.0, -0.45])


def test_reparameterized_sample_is_differentiable():
    mu, sigma = ad.Var(np.array([0.5, 0.0])), ad.Var(np.array([0.2, 0.1]))
    a = sample_action(ActionDistribution(mu, sigma), None, "reparameterized", z=np.array([1.0, -2.0])).action
    gm, gs = ad.grad(ad.reduce_sum(a), [mu, sigma])
    np.testing.assert_array_equal(gm, [1, 1])
    np.testing.assert_array_equal(gs, [1, -2])


def test_log_prob_examples():
    unit = ActionDistribution(np.zeros(2), np.ones(2))
    assert log_prob(unit, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi))
    assert log_prob(unit, np.zeros(2)) == pytest.approx(-1.8379, abs=1e-4)
    wide = ActionDistribution(np.zeros(2), 2 * np.ones(2))
    assert log_prob(unit, np.zeros(2)) - log_prob(wide, np.zeros(2)) == pytest.approx(2 * math.log(2))
    d = ActionDistribution(np.array([1.0, -0.1]), np.array([0.5, 0.1]))
    assert log_prob(d, d.mu) > log_prob(d, d.mu + 0.01)


def test_joint_log_prob_factorizes(rng):
    p = init_policy(F, (8, 8, 8), rng)
    f = rng.normal(size=(5, F))
    d = policy_forward(p, f)
    a = rng.normal(size=(5, 2)) * 0.1
    joint = float(np.sum(log_prob(d, a)))
    per = sum(float(log_prob(policy_forward(p, f[i]), a[i])) for i in range(5))
    assert joint == pytest.approx(per, abs=1e-10)


def test_checkpoint_round_trip(rng):
    p, v = init_policy(F, (8, 8, 8), rng), init_value(F, (8, 8, 8), rng)
    data = json.loads(checkpoint_bytes(p, v, F))
    p2, v2, _ = load_checkpoint(data, F)
    np.testing.assert_array_equal(p2.values, p.values)
    np.testing.assert_array_equal(v2.values, v.values)
    with pytest.raises(PolicyError):
        load_checkpoint(data, F + 1)
    data["version"] = 99
    with pytest.raises(PolicyError):
        load_checkpoint(data)
