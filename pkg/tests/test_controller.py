import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from neurodrive import autodiff as ad
from neurodrive import controller as ctl
from neurodrive.robot import ReferenceTrajectory, RobotSpec

STATIC_POSE = [0.4, 0.8, -0.3, 0.5]


@pytest.fixture(scope="module")
def robot():
    return RobotSpec.desk()


@pytest.fixture(scope="module")
def static_run(robot):
    env = ctl.TrackingEnv(robot)
    ref = ReferenceTrajectory.static(STATIC_POSE, 100)
    policy, disc, tlog = ctl.rl_train(env, [ref], ctl.ControllerConfig(iterations=40), seed=0)
    return env, ref, policy, disc, tlog


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("pose", [np.zeros(4), np.array(STATIC_POSE)])
def test_rest_at_target_stays_at_rest(robot, pose):
    state = ctl.EnvState.rest(robot, q=pose)
    for _ in range(50):
        state, tau = ctl.env_step(robot, state, pose)
        np.testing.assert_array_equal(tau, 0.0)
    np.testing.assert_array_equal(state.q[0], pose)
    np.testing.assert_array_equal(state.qd, 0.0)


def test_constant_torque_gives_linear_velocity():
    free = RobotSpec.desk(
        damping=np.zeros(4), joint_limits=np.tile([-1e6, 1e6], (4, 1)), velocity_limits=np.full(4, 1e6), torque_limits=np.full(4, 1e3)
    )
    torque = np.array([2.0, 0.0, -1.0, 0.5])
    accel = torque / free.inertia
    state = ctl.EnvState.rest(free)
    h = free.dt / free.substeps
    for step in range(1, 31):
        state = ctl.apply_torque(free, state, torque)
        t = step * free.dt
        np.testing.assert_allclose(state.qd[0], accel * t, rtol=1e-12, atol=1e-12)
        # semi-implicit Euler position: h^2 a m(m+1)/2 after m substeps, within a*h*t/2 of a t^2/2
        m = step * free.substeps
        np.testing.assert_allclose(state.q[0], accel * h * h * m * (m + 1) / 2, rtol=1e-10, atol=1e-12)
        assert np.all(np.abs(state.q[0] - 0.5 * accel * t * t) <= 0.5 * np.abs(accel) * h * t + 1e-12)


def test_energy_never_increases_without_torque(robot):
    state = ctl.EnvState.rest(robot, q=[0.0, 1.0, 0.0, 1.0], qd=[1.5, -2.0, 0.7, 3.0], batch=3)
    state.qd[1] *= -1
    energy = [state.kinetic_energy(robot)]
    for _ in range(200):
        state = ctl.apply_torque(robot, state, np.zeros(4))
        energy.append(state.kinetic_energy(robot))
    energy = np.array(energy)
    assert np.all(np.diff(energy, axis=0) <= 1e-15)
    assert np.all(energy[-1] < 0.05 * energy[0])


def test_nan_state_sets_fault_only_on_that_episode(robot):
    state = ctl.EnvState.rest(robot, batch=3)
    state.q[1, 2] = np.nan
    nxt, _ = ctl.env_step(robot, state, np.zeros(4))
    np.testing.assert_array_equal(nxt.fault, [False, True, False])


def test_wrong_action_length_rejected(robot):
    with pytest.raises(ValueError, match="3 entries"):
        ctl.env_step(robot, ctl.EnvState.rest(robot), np.zeros(3))


# ---------------------------------------------------------------------------
# observations and AMP features
# ---------------------------------------------------------------------------
def test_paper_scale_proprio_length():
    paper = RobotSpec.paper_scale()
    assert paper.n_joints == 20
    assert ctl.observation_size(paper, n_ee=0, n_feet=0) == 96


@pytest.mark.parametrize("make", [RobotSpec.desk, RobotSpec.paper_scale])
def test_observation_length_matches_declared_size(make):
    r = make()
    ref = ReferenceTrajectory.static(np.zeros(r.n_joints), 10)
    env = ctl.TrackingEnv(r)
    sim = ctl.simulate(ctl.RandomPolicy(r), env, [ref, ref], [0, 3], 5)
    assert sim.obs.shape == (5, 2, env.obs_dim(ref))
    assert np.all(np.isfinite(sim.obs))


def test_amp_features_are_positions_velocities_end_effectors(robot):
    rng = np.random.default_rng(0)
    q, qd = rng.uniform(-0.5, 0.5, (3, 4)), rng.standard_normal((3, 4))
    feat = ctl.amp_features(robot, q, qd)
    assert feat.shape == (3, ctl.amp_feature_size(robot))
    np.testing.assert_array_equal(feat[:, :4], q)
    np.testing.assert_array_equal(feat[:, 4:8], qd)
    np.testing.assert_array_equal(feat[:, 8:], robot.end_effectors(q).reshape(3, -1))


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("d, expected", [(1.0, 1.0), (-1.0, 0.0), (3.0, 0.0), (0.0, 0.75), (10.0, 0.0)])
def test_style_reward_values(d, expected):
    assert ctl.style_reward(d) == pytest.approx(expected, abs=1e-15)


@given(st.floats(-1e6, 1e6))
def test_style_reward_range(d):
    r = ctl.style_reward(d)
    assert 0.0 <= r <= 1.0
    if abs(d - 1.0) > 1e-6:
        assert r < 1.0


def test_regularization_zero_inputs():
    z = np.zeros(4)
    assert ctl.regularization_rewards(z, z, z, z, z) == (1.0, 1.0, 1.0, 1.0)


def test_unit_action_change():
    r_rate, *_ = ctl.regularization_rewards(np.array([0.6, 0.8, 0.0]), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    assert r_rate == pytest.approx(0.36788, abs=1e-5)
    assert r_rate == pytest.approx(math.exp(-1.0), rel=1e-15)


@settings(max_examples=200)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_regularization_matches_norm_oracle(seed, n):
    rng = np.random.default_rng(seed)
    a, prev, qd, qdd, tau = (rng.standard_normal(n) * rng.uniform(0.01, 2) for _ in range(5))
    got = ctl.regularization_rewards(a, prev, qd, qdd, tau)
    expected = (
        math.exp(-math.sqrt(sum((x - y) ** 2 for x, y in zip(a, prev)))),
        math.exp(-sum(x * x for x in qd)),
        math.exp(-sum(x * x for x in qdd)),
        math.exp(-math.sqrt(sum(x * x for x in tau))),
    )
    for g, e in zip(got, expected):
        assert abs(g - e) <= 1e-12


vectors = arrays(np.float64, 5, elements=st.floats(-5, 5))


@given(vectors, vectors, vectors, vectors, vectors)
def test_regularization_range_and_equality_case(a, prev, qd, qdd, tau):
    got = ctl.regularization_rewards(a, prev, qd, qdd, tau)
    args = (a - prev, qd, qdd, tau)
    for value, vec in zip(got, args):
        assert 0.0 < value <= 1.0
        if not vec.any():
            assert value == 1.0
        elif np.sum(vec**2) > 1e-12:
            assert value < 1.0


def test_perfect_transition_earns_weight_sum():
    w = ctl.RewardWeights()
    q = np.array(STATIC_POSE)
    z = np.zeros(4)
    terms = ctl.reward_terms(q, q, 1.0, q, q, z, z, z)
    assert float(ctl.total_reward(terms, w)) == pytest.approx(w.total(), abs=1e-15)
    assert w.total() == pytest.approx(1.25)


def test_zero_weights_give_zero():
    rng = np.random.default_rng(1)
    v = [rng.standard_normal(4) for _ in range(7)]
    terms = ctl.reward_terms(v[0], v[1], 0.3, v[2], v[3], v[4], v[5], v[6])
    zero = ctl.RewardWeights(0, 0, 0, 0, 0, 0)
    assert float(ctl.total_reward(terms, zero)) == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError, match="style"):
        ctl.RewardWeights(style=-0.1)


@settings(max_examples=100)
@given(st.integers(0, 10_000))
def test_total_reward_matches_hand_sum(seed):
    rng = np.random.default_rng(seed)
    q, q_ref, a, prev, qd, qdd, tau = (rng.uniform(-1, 1, 4) for _ in range(7))
    d = float(rng.uniform(-2, 3))
    w = ctl.RewardWeights(*rng.uniform(0, 1, 6))
    got = float(ctl.total_reward(ctl.reward_terms(q, q_ref, d, a, prev, qd, qdd, tau), w))
    by_hand = (
        w.tracking * math.exp(-sum((x - y) ** 2 for x, y in zip(q, q_ref)))
        + w.style * max(0.0, 1 - 0.25 * (d - 1) ** 2)
        + w.action_rate * math.exp(-math.sqrt(sum((x - y) ** 2 for x, y in zip(a, prev))))
        + w.velocity * math.exp(-sum(x * x for x in qd))
        + w.acceleration * math.exp(-sum(x * x for x in qdd))
        + w.torque * math.exp(-math.sqrt(sum(x * x for x in tau)))
    )
    assert got == pytest.approx(by_hand, abs=1e-12)


# ---------------------------------------------------------------------------
# AMP loss
# ---------------------------------------------------------------------------
def _constant_disc(real_value, policy_value, real_rows):
    real_rows = {tuple(r) for r in real_rows}

    def disc(x):
        data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        vals = np.array([real_value if tuple(r) in real_rows else policy_value for r in data])
        return x[:, 0] * 0.0 + vals if isinstance(x, ad.Tensor) else vals

    return disc


def test_amp_optimum_is_zero():
    rng = np.random.default_rng(0)
    real, fake = rng.standard_normal((5, 6)), rng.standard_normal((7, 6))
    loss = ctl.amp_loss(real, fake, _constant_disc(1.0, -1.0, real), grad_penalty=5.0)
    assert loss.item() == 0.0


def test_amp_zero_discriminator_gives_one():
    rng = np.random.default_rng(1)
    real, fake = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
    loss = ctl.amp_loss(real, fake, _constant_disc(0.0, 0.0, real), grad_penalty=0.0)
    assert loss.item() == 1.0


def test_constant_discriminator_has_no_penalty():
    disc = ctl.Discriminator(3, hidden=8, seed=0)
    for p in (disc.l1.weight, disc.l2.weight, disc.out.weight):
        p.data[:] = 0.0
    disc.out.bias.data[:] = 0.4
    rng = np.random.default_rng(2)
    real, fake = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    with_pen = ctl.amp_loss(real, fake, disc, grad_penalty=10.0).item()
    without = ctl.amp_loss(real, fake, disc, grad_penalty=0.0).item()
    assert with_pen == without == pytest.approx(0.5 * 0.36 + 0.5 * 1.96)


@pytest.mark.parametrize("seed", range(5))
def test_amp_loss_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    disc = ctl.Discriminator(3, hidden=5, seed=seed)
    disc.out.weight.data[:] = rng.standard_normal(disc.out.weight.shape)
    real, fake = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
    lam = float(rng.uniform(0.1, 10))
    got = ctl.amp_loss(real, fake, disc, lam).item()
    assert abs(got - oracles.amp_loss(real, fake, disc, lam)) <= 1e-8


def test_amp_penalty_gradient_reaches_parameters():
    disc = ctl.Discriminator(3, hidden=5, seed=3)
    rng = np.random.default_rng(3)
    real, fake = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
    worst = oracles.gradient_check(disc, lambda: ctl.amp_loss(real, fake, disc, 5.0))
    assert max(worst.values()) < 1e-4


def test_amp_empty_batch_rejected():
    disc = ctl.Discriminator(3, hidden=4)
    with pytest.raises(ValueError):
        ctl.amp_loss(np.zeros((0, 6)), np.zeros((2, 6)), disc, 1.0)
    with pytest.raises(ValueError):
        ctl.amp_loss(np.zeros((2, 6)), np.zeros((0, 6)), disc, 1.0)


# ---------------------------------------------------------------------------
# returns and PPO
# ---------------------------------------------------------------------------
@given(st.floats(-10, 10), st.floats(0.0, 0.999), st.integers(1, 300))
def test_constant_reward_return(r, gamma, horizon):
    ret = ctl.discounted_returns([r] * horizon, gamma)
    assert abs(ret[0] - r * (1 - gamma**horizon) / (1 - gamma)) <= 1e-9 * max(1.0, abs(r) * horizon)


def test_zero_discount_is_single_step():
    rewards = [0.3, -1.0, 2.5, 0.0]
    np.testing.assert_array_equal(ctl.discounted_returns(rewards, 0.0), rewards)


def test_gae_with_unit_lambda_is_bootstrapped_return():
    rng = np.random.default_rng(0)
    rewards = rng.standard_normal((6, 2))
    values = rng.standard_normal((6, 2))
    last = np.array([0.5, -1.0])
    dones = np.zeros((6, 2))
    adv, ret = ctl.gae(rewards, values, last, dones, 0.9, 1.0)
    for b in range(2):
        expected = ctl.discounted_returns(list(rewards[:, b]) + [last[b]], 0.9)[:-1]
        np.testing.assert_allclose(ret[:, b], expected, atol=1e-12)
    np.testing.assert_allclose(adv, ret - values, atol=1e-12)


def test_gae_done_cuts_bootstrap():
    rewards = np.ones((3, 1))
    adv, ret = ctl.gae(rewards, np.zeros((3, 1)), np.array([100.0]), np.array([[0.0], [1.0], [0.0]]), 0.5, 1.0)
    np.testing.assert_allclose(ret[:, 0], [1.5, 1.0, 51.0])


def test_zero_advantage_update_keeps_policy():
    rng = np.random.default_rng(0)
    obs_dim, n_act, n = 7, 3, 64
    policy = ctl.Policy(obs_dim, n_act, hidden=16, seed=1)
    value = ctl.ValueNet(obs_dim, hidden=16, seed=1)
    obs, q_ref = rng.standard_normal((n, obs_dim)), rng.standard_normal((n, n_act))
    actions, logp = policy.act(obs, q_ref, rng)
    batch = ctl.PpoBatch(obs, q_ref, actions, logp, np.zeros(n), rng.standard_normal(n))
    before = policy.state_dict()
    cfg = ctl.PpoConfig(minibatch=16)
    opt_pi = ad.AdamW(policy.parameters(), lr=cfg.policy_lr, weight_decay=0.0)
    opt_v = ad.AdamW(value.parameters(), lr=cfg.value_lr, weight_decay=0.0)
    ctl.ppo_update(policy, value, batch, cfg, opt_pi, opt_v, rng)
    assert ctl.policy_kl(policy, before, obs, q_ref) < 1e-8


def test_policy_mean_is_residual_on_reference():
    policy = ctl.Policy(5, 2, hidden=8, seed=0, action_scale=0.5)
    for p in (policy.out.weight, policy.out.bias):
        p.data[:] = 0.0
    q_ref = np.array([[0.3, -0.7]])
    a, _ = policy.act(np.ones((1, 5)), q_ref)
    np.testing.assert_array_equal(a, q_ref)


# ---------------------------------------------------------------------------
# rollouts and training
# ---------------------------------------------------------------------------
def test_zero_horizon_rejected(robot):
    env = ctl.TrackingEnv(robot)
    with pytest.raises(ValueError, match="horizon"):
        ctl.rollout(ctl.RandomPolicy(robot), env, ReferenceTrajectory.static(STATIC_POSE, 10), 0)


def test_transition_count_equals_horizon(robot):
    env = ctl.TrackingEnv(robot)
    transitions, metrics = ctl.rollout(ctl.RandomPolicy(robot), env, ReferenceTrajectory.static(STATIC_POSE, 10), 25)
    assert len(transitions) == 25 == metrics["steps"]
    t = transitions[0]
    assert len(t.amp_pair) == 2 and len(t.amp_pair[0]) == ctl.amp_feature_size(robot)
    np.testing.assert_array_equal(t.next_obs, transitions[1].obs)
    assert set(t.terms) == set(ctl.REWARD_TERMS)
    assert all(np.isfinite(tr.reward) for tr in transitions)


class _NanPolicy:
    def act(self, obs, q_ref, rng=None):
        return np.full(np.shape(q_ref), np.nan), np.zeros(len(q_ref))


def test_fault_ends_episode_early(robot):
    env = ctl.TrackingEnv(robot)
    transitions, metrics = ctl.rollout(_NanPolicy(), env, ReferenceTrajectory.static(STATIC_POSE, 10), 20)
    assert len(transitions) == 1 == metrics["steps"]
    assert transitions[0].done and transitions[0].reward == 0.0


def test_trained_policy_beats_random(robot, static_run):
    env, ref, policy, disc, _ = static_run
    _, trained = ctl.rollout(policy, env, ref, 100, disc)
    _, random = ctl.rollout(ctl.RandomPolicy(robot, seed=0), env, ref, 100, disc)
    assert trained["rmse"] < 0.05 < random["rmse"]


def test_training_log_columns(static_run, tmp_path):
    *_, tlog = static_run
    assert len(tlog.rows) == 40
    for k in ("return", "disc_loss", *(f"mean_{t}" for t in ctl.REWARD_TERMS)):
        assert np.all(np.isfinite(tlog.column(k)))
    tlog.write_csv(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["iteration", "env_steps", "return"]
    with pytest.raises(ValueError):
        ctl.ControllerLog().write_csv(tmp_path / "empty.csv")


def test_checkpoint_round_trip(static_run, tmp_path):
    env, ref, policy, disc, _ = static_run
    ctl.save_controller(tmp_path / "c.ndtk", policy, disc)
    p2, d2 = ctl.load_controller(tmp_path / "c.ndtk")
    _, a = ctl.rollout(policy, env, ref, 30, disc)
    _, b = ctl.rollout(p2, env, ref, 30, d2)
    assert a == b


def test_training_is_deterministic(robot):
    env = ctl.TrackingEnv(robot)
    ref = ReferenceTrajectory.static(STATIC_POSE, 30)
    cfg = ctl.ControllerConfig(iterations=3, n_envs=4, horizon=20, disc_warmup=2)
    runs = [ctl.rl_train(env, [ref], cfg, seed=5)[2].rows for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_needs_references(robot):
    with pytest.raises(ValueError):
        ctl.rl_train(ctl.TrackingEnv(robot), [], ctl.ControllerConfig(iterations=1))


def test_divergence_reports_iteration(robot):
    ref = ReferenceTrajectory.static(STATIC_POSE, 30)
    ref.q[5] = np.nan
    cfg = ctl.ControllerConfig(iterations=3, n_envs=4, horizon=30, disc_warmup=0)
    with pytest.raises(ctl.TrainingDivergedError, match="iteration 0") as info:
        ctl.rl_train(ctl.TrackingEnv(robot), [ref], cfg, seed=0)
    assert info.value.step == 0
