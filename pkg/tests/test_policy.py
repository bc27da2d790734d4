import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdrive.paths import l_turn_path, straight_path
from advdrive.policy import (ExpertConfig, ImitationDataset, PolicyNet, expert_control, generate_dataset,
                             load_dataset, load_policy, mse, observation_vjp, policy_forward,
                             policy_forward_batch, policy_input_grad, save_dataset, save_policy,
                             to_observation, train_policy_bc)

SHAPE = (6, 5, 1)


def test_zero_weights_output_zero():
    net = PolicyNet.zeros(SHAPE, (8,))
    obs = np.random.default_rng(0).uniform(size=SHAPE)
    assert policy_forward(net, obs) == 0.0
    assert np.all(policy_input_grad(net, obs) == 0)


def test_hand_computed_single_layer():
    net = PolicyNet([2, 1], [np.array([[0.5, -1.0]])], [np.array([0.1])], (1, 2, 1), steering_limit=2.0)
    obs = np.array([0.4, 0.2]).reshape(1, 2, 1)
    # z = 0.5 * 0.4 - 1.0 * 0.2 + 0.1 = 0.1
    assert policy_forward(net, obs) == pytest.approx(2.0 * math.tanh(0.1), abs=1e-15)


def test_hand_computed_with_goal():
    net = PolicyNet([3, 1], [np.array([[1.0, 0.0, 0.3]])], [np.array([0.0])], (1, 2, 1), goal_dim=1,
                    steering_limit=1.0)
    obs = np.array([0.2, 0.9]).reshape(1, 2, 1)
    assert policy_forward(net, obs, [1.0]) == pytest.approx(math.tanh(0.5), abs=1e-15)
    with pytest.raises(ValueError):
        policy_forward(net, obs)


def test_shape_mismatch_raises():
    net = PolicyNet.init(SHAPE, (4,))
    with pytest.raises(ValueError):
        policy_forward(net, np.zeros((5, 6, 1)))
    with pytest.raises(ValueError):
        PolicyNet([3, 1], [np.zeros((1, 2))], [np.zeros(1)], (1, 3, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_output_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    net = PolicyNet.init(SHAPE, (8, 4), steering_limit=1.7, seed=seed)
    net.weights = [w * 10 for w in net.weights]
    obs = rng.normal(0, 1, SHAPE) * scale
    assert abs(policy_forward(net, obs)) <= 1.7


def test_input_grad_seed_linearity():
    net = PolicyNet.init(SHAPE, (8, 4), seed=2)
    obs = np.random.default_rng(3).uniform(size=SHAPE)
    np.testing.assert_allclose(policy_input_grad(net, obs, seed=2.0), 2.0 * policy_input_grad(net, obs, seed=1.0),
                               rtol=1e-14)


def test_input_grad_matches_fd():
    rng = np.random.default_rng(4)
    net = PolicyNet.init(SHAPE, (8, 4), seed=4)
    obs = rng.uniform(size=SHAPE)
    g = policy_input_grad(net, obs).ravel()
    eps = 1e-6
    for i in rng.choice(obs.size, 20, replace=False):
        d = np.zeros(obs.size)
        d[i] = eps
        num = (policy_forward(net, obs + d.reshape(SHAPE)) - policy_forward(net, obs - d.reshape(SHAPE))) / (2 * eps)
        assert abs(num - g[i]) <= 1e-5 * max(abs(num), abs(g[i]))


def test_directional_derivative():
    rng = np.random.default_rng(5)
    net = PolicyNet.init(SHAPE, (8, 4), seed=5)
    obs = rng.uniform(size=SHAPE)
    d = rng.normal(size=SHAPE)
    eps = 1e-6
    num = (policy_forward(net, obs + eps * d) - policy_forward(net, obs - eps * d)) / (2 * eps)
    ana = float(np.sum(policy_input_grad(net, obs) * d))
    assert abs(num - ana) <= 1e-5 * abs(ana)


def test_grayscale_observation_vjp():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(6, 5, 3))
    g = rng.normal(size=SHAPE)
    d = rng.normal(size=img.shape)
    lhs = np.sum(g * to_observation(d, SHAPE))
    rhs = np.sum(observation_vjp(g, SHAPE) * d)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_batch_forward_matches_single():
    rng = np.random.default_rng(7)
    net = PolicyNet.init(SHAPE, (8,), seed=7)
    obs = rng.uniform(size=(5,) + SHAPE)
    np.testing.assert_allclose(policy_forward_batch(net, obs), [policy_forward(net, o) for o in obs], rtol=1e-14)


# --- expert ---------------------------------------------------------------

def test_expert_on_path_is_zero():
    assert expert_control((1.0, 0.0, 0.0), straight_path()) == 0.0


def test_expert_left_offset_steers_right():
    assert expert_control((1.0, 0.3, 0.0), straight_path()) < 0
    assert expert_control((1.0, -0.3, 0.0), straight_path()) > 0


def test_expert_hand_computed():
    cfg = ExpertConfig(lookahead=1.0, gain=1.0, steering_limit=5.0)
    u = expert_control((2.0, 0.5, 0.0), straight_path(), cfg)
    assert u == pytest.approx(math.atan2(-0.5, 1.0), abs=1e-12)


def test_expert_clamped():
    cfg = ExpertConfig(lookahead=0.5, gain=10.0, steering_limit=0.7)
    assert expert_control((1.0, 2.0, 0.0), straight_path(), cfg) == -0.7


def test_expert_config_validation():
    with pytest.raises(ValueError):
        ExpertConfig(lookahead=0.0)


# --- data -----------------------------------------------------------------

def blank_sensor(state):
    return np.zeros(SHAPE)


def test_dataset_zero_std_on_reference():
    path = l_turn_path()
    data = generate_dataset([blank_sensor], path, ExpertConfig(), 50, 0.0, 0.0, seed=0)
    for s in data.states:
        assert path.project(s[:2])[0] @ np.ones(2) == pytest.approx(s[:2] @ np.ones(2), abs=1e-9)


def test_dataset_labels_are_expert_outputs():
    path = l_turn_path()
    cfg = ExpertConfig()
    data = generate_dataset([blank_sensor, blank_sensor], path, cfg, 30, 0.2, 0.2, seed=1)
    assert len(data) == 60
    for s, lab in zip(data.states, data.labels):
        assert lab == expert_control(s, path, cfg)
        assert abs(lab) <= cfg.steering_limit


def test_dataset_lateral_std():
    path = straight_path(10.0)
    data = generate_dataset([blank_sensor], path, ExpertConfig(), 1000, 0.25, 0.1, seed=2)
    std = float(np.std(data.states[:, 1]))
    assert abs(std - 0.25) <= 0.15 * 0.25


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        generate_dataset([blank_sensor], straight_path(), ExpertConfig(), 0)


def synthetic(n, seed, const=None):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(size=(n,) + SHAPE)
    labels = np.full(n, const) if const is not None else 1.5 * (obs.mean(axis=(1, 2, 3)) - 0.5) * 4
    return ImitationDataset(obs, np.full(n, -1), labels)


def test_bc_constant_label():
    data = synthetic(64, 0, const=0.7)
    net = PolicyNet.init(SHAPE, (8,), seed=0)
    res = train_policy_bc(data, net, epochs=500, lr=1e-2, batch_size=8, noise_std=0.0)
    pred = policy_forward_batch(res.net, data.observations)
    assert np.max(np.abs(pred - 0.7)) < 1e-2


def test_bc_zero_epochs_returns_init():
    data = synthetic(16, 1)
    net = PolicyNet.init(SHAPE, (8,), seed=1)
    res = train_policy_bc(data, net, epochs=0)
    for a, b in zip(res.net.params(), net.params()):
        np.testing.assert_array_equal(a, b)
    assert res.loss_history == [mse(net, data)]


def test_bc_validation_loss_improves():
    data = synthetic(400, 2)
    train, val = data.split(0.1, seed=0)
    assert len(val) == 40
    res = train_policy_bc(train, PolicyNet.init(SHAPE, (16, 8), seed=2), epochs=60, lr=3e-3, val_data=val)
    assert res.loss_history[-1] < res.loss_history[0]
    assert res.val_history[-1] < res.val_history[0]


def test_bc_rejects_empty():
    with pytest.raises(ValueError):
        train_policy_bc(ImitationDataset(np.zeros((0,) + SHAPE), np.zeros(0, int), np.zeros(0)),
                        PolicyNet.init(SHAPE, (4,)))


# --- files ----------------------------------------------------------------

def test_policy_file_round_trip(tmp_path):
    net = PolicyNet.init(SHAPE, (8, 4), goal_dim=2, steering_limit=3.0, seed=9)
    save_policy(tmp_path / "p.pnet", net)
    back = load_policy(tmp_path / "p.pnet")
    q = net.quantized()
    assert back.sizes == q.sizes and back.input_shape == q.input_shape and back.goal_dim == 2
    assert back.steering_limit == 3.0
    for a, b in zip(back.params(), q.params()):
        np.testing.assert_array_equal(a, b)
    raw = (tmp_path / "p.pnet").read_bytes()
    (tmp_path / "bad.pnet").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_policy(tmp_path / "bad.pnet")


def test_dataset_directory_round_trip(tmp_path):
    data = synthetic(5, 3)
    data.goals[:] = [0, 1, 0, 1, -1]
    save_dataset(tmp_path / "ds", data)
    back = load_dataset(tmp_path / "ds")
    assert back.observations.shape == data.observations.shape
    assert np.max(np.abs(back.observations - data.observations)) <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(back.goals, data.goals)
    np.testing.assert_array_equal(back.labels, data.labels)
