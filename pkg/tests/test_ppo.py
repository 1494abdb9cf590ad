from dataclasses import replace

import numpy as np
import pytest

from epictrl import ppo
from epictrl.nn import AdamState, Network, TrainingError, forward


def const_actor(loc):
    """One-layer actor whose output is ``loc`` whatever the input."""
    loc = np.atleast_1d(np.asarray(loc, dtype=float))
    return Network([np.zeros((1, loc.size))], [loc])


# -- clip function and surrogate ---------------------------------------------------------

def test_clip_g_examples():
    assert ppo.clip_g(0.2, 1.0) == 1.2
    assert ppo.clip_g(0.2, -1.0) == -0.8
    assert ppo.clip_g(0.3, 0.0) == 0.0


def test_surrogate_examples():
    A = np.array([0.5, -1.0, 2.0])
    assert ppo.surrogate_loss(np.ones(3), A, 0.2) == -A.mean()
    assert ppo.clipped_objective([2.0], [1.0], 0.2)[0] == 1.2
    assert ppo.clipped_objective([0.5], [-1.0], 0.2)[0] == -0.8


def test_clip_bound_property(rng):
    r = rng.uniform(0.01, 3, 500)
    A = rng.normal(size=500)
    obj = ppo.clipped_objective(r, A, 0.2)
    assert np.all(obj <= np.maximum(r * A, ppo.clip_g(0.2, A)))
    inside = (r >= 0.8) & (r <= 1.2)
    np.testing.assert_array_equal(obj[inside], (r * A)[inside])


def test_non_finite_ratio_raises():
    with pytest.raises(TrainingError):
        ppo.surrogate_loss([1.0, np.inf], [1.0, 1.0], 0.2)


# -- advantages ---------------------------------------------------------------------------

def test_gae_lambda_zero_is_one_step_td(rng):
    r, v = rng.normal(size=12), rng.normal(size=12)
    d = np.zeros(12, bool)
    d[[5, 11]] = True
    adv = ppo.gae(r, v, d, 0.99, 0.0).advantages
    nxt = np.append(v[1:], 0.0)
    nxt[d] = 0.0
    np.testing.assert_array_equal(adv, r + 0.99 * nxt - v)


def test_gae_lambda_one_is_reward_to_go(rng):
    r = rng.normal(size=12)
    d = np.zeros(12, bool)
    d[[3, 11]] = True
    b = ppo.gae(r, np.zeros(12), d, 1.0, 1.0)
    expect = np.concatenate([np.cumsum(r[:4][::-1])[::-1], np.cumsum(r[4:][::-1])[::-1]])
    np.testing.assert_allclose(b.advantages, expect, rtol=0, atol=1e-13)
    np.testing.assert_array_equal(b.returns, b.advantages)


def test_gae_three_step_hand_unroll():
    g, lam = 0.99, 0.95
    r = [1.0, -2.0, 0.5]
    v = [0.3, -0.1, 0.7]
    d3 = 0.5 - 0.7
    d2 = -2.0 + g * 0.7 + 0.1
    d1 = 1.0 + g * -0.1 - 0.3
    a3 = d3
    a2 = d2 + g * lam * a3
    a1 = d1 + g * lam * a2
    b = ppo.gae(r, v, [False, False, True], g, lam)
    np.testing.assert_allclose(b.advantages, [a1, a2, a3], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.returns, np.array([a1, a2, a3]) + v, rtol=0, atol=1e-12)


def test_normalize_statistics(rng):
    b = ppo.normalize(ppo.gae(rng.normal(size=50), rng.normal(size=50),
                              np.arange(50) % 10 == 9, 0.99, 0.95))
    assert b.normalized
    assert abs(b.advantages.mean()) < 1e-12 and abs(b.advantages.std() - 1) < 1e-6


# -- policy --------------------------------------------------------------------------------

def test_small_std_approaches_deterministic_mean(rng):
    actor = const_actor([0.3, -1.0, 2.0])
    bounds = np.array([0.005, 0.04, 0.04])
    mean, lp0, _ = ppo.sample_action(actor, np.zeros(1), 0.0, bounds, rng)
    assert lp0 == 0.0
    a, _, _ = ppo.sample_action(actor, np.zeros(1), 1e-9, bounds, rng)
    np.testing.assert_allclose(a, mean, rtol=1e-8)
    np.testing.assert_allclose(mean, bounds / (1 + np.exp(-np.array([0.3, -1.0, 2.0]))),
                               rtol=1e-14)


def test_samples_stay_within_bounds(rng):
    bounds = np.tile([0.005, 0.04, 0.04], 3)
    actor = const_actor(rng.normal(scale=3, size=9))
    for _ in range(10_000):
        a, lp, _ = ppo.sample_action(actor, np.zeros(1), 0.4, bounds, rng)
        assert np.all(a >= 0) and np.all(a <= bounds) and np.isfinite(lp)


def test_log_prob_matches_histogram_density():
    rng = np.random.default_rng(7)
    bound, loc, std = 0.04, 0.6, 0.7
    u = loc + std * rng.standard_normal(1_000_000)
    a = ppo.squash(u, bound)
    counts, edges = np.histogram(a, bins=40, range=(0.0, bound))
    width = edges[1] - edges[0]
    empirical = counts / (len(a) * width)
    # bin-averaged analytic density from 50 interior points per bin
    fine = edges[:-1, None] + width * (np.arange(50) + 0.5) / 50
    dens = np.exp(ppo.log_prob(const_actor([loc]), np.zeros((fine.size, 1)),
                               fine.reshape(-1, 1), std, [bound])).reshape(40, 50)
    analytic = dens.mean(axis=1)
    # sparse tail bins carry sampling noise well above the tolerance
    dense = counts >= 2000
    assert dense.sum() >= 30
    np.testing.assert_allclose(empirical[dense], analytic[dense], rtol=0.05)


def test_sampled_log_prob_equals_log_prob(rng):
    actor = ppo.init_actor(15, 9, rng)
    bounds = np.tile([0.005, 0.04, 0.04], 3)
    obs = rng.uniform(size=15)
    a, lp, u = ppo.sample_action(actor, obs, 0.3, bounds, rng)
    np.testing.assert_allclose(ppo.log_prob(actor, obs, a, 0.3, bounds), lp, rtol=1e-9)
    np.testing.assert_allclose(ppo.unsquash(a, bounds), u, rtol=1e-8)


def test_exploration_schedule():
    cfg = ppo.PPOConfig()
    assert ppo.exploration_std(0, cfg) == 0.4
    assert ppo.exploration_std(999, cfg) == 0.4
    assert ppo.exploration_std(1000, cfg) == pytest.approx(0.4 - 0.0046)
    stds = [ppo.exploration_std(n, cfg) for n in range(0, 200_000, 500)]
    assert all(x >= y for x, y in zip(stds, stds[1:]))
    assert stds[-1] == 0.05 and ppo.exploration_std(10**7, cfg) == 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        ppo.PPOConfig(gamma=1.5)
    with pytest.raises(ValueError):
        ppo.PPOConfig(clip_epsilon=0)
    cfg = ppo.PPOConfig(hidden=(8,))
    assert ppo.PPOConfig.from_dict(cfg.to_dict()) == cfg


# -- update ---------------------------------------------------------------------------------

BOUNDS = np.tile([0.005, 0.04, 0.04], 3)


def filled_buffer(rng, actor, critic, episodes=2, horizon=12, std=0.4, reward=None):
    buf = ppo.Buffer()
    for _ in range(episodes):
        for t in range(horizon):
            obs = rng.uniform(size=15)
            cobs = np.append(obs, t / horizon)
            a, lp, u = ppo.sample_action(actor, obs, std, BOUNDS, rng)
            r = reward(a) if reward else float(rng.normal())
            buf.add(obs, cobs, u, lp, r, forward(critic, cobs)[0], t == horizon - 1, std)
    return buf


def nets(rng):
    actor, critic = ppo.init_actor(15, 9, rng), ppo.init_critic(16, rng)
    return actor, critic, AdamState.for_network(actor), AdamState.for_network(critic)


def surrogate_on(buf, actor, cfg):
    u = np.stack(buf.pre_actions)
    std = np.asarray(buf.stds)[:, None]
    old = np.asarray(buf.log_probs) + ppo.log_jacobian(u, BOUNDS)
    new = ppo.gaussian_log_prob(u, forward(actor, np.stack(buf.obs)), std)
    adv = ppo.normalize(ppo.gae(buf.rewards, buf.values, buf.dones, cfg.gamma,
                                cfg.gae_lambda)).advantages
    return np.exp(new - old), adv


def test_ratio_identity_before_any_step(rng):
    actor, critic, ao, co = nets(rng)
    buf = filled_buffer(rng, actor, critic)
    r, _ = surrogate_on(buf, actor, ppo.PPOConfig())
    np.testing.assert_allclose(r, 1.0, atol=1e-6)


def test_zero_epochs_leaves_parameters(rng):
    actor, critic, ao, co = nets(rng)
    buf = filled_buffer(rng, actor, critic)
    a2, c2, _, _, diag = ppo.update(actor, critic, ao, co, buf, replace(ppo.PPOConfig(), k_epochs=0),
                                    BOUNDS)
    for x, y in zip(actor.arrays() + critic.arrays(), a2.arrays() + c2.arrays()):
        np.testing.assert_array_equal(x, y)
    assert diag.mean_ratio == pytest.approx(1.0, abs=1e-9) and diag.epochs == 0


def test_update_does_not_decrease_surrogate(rng):
    cfg = ppo.PPOConfig()
    for _ in range(5):
        actor, critic, ao, co = nets(rng)
        buf = filled_buffer(rng, actor, critic, reward=lambda a: -float(np.sum(a / BOUNDS)))
        r0, adv = surrogate_on(buf, actor, cfg)
        before = -ppo.surrogate_loss(r0, adv, cfg.clip_epsilon)
        a2, *_ = ppo.update(actor, critic, ao, co, buf, cfg, BOUNDS)
        r1, _ = surrogate_on(buf, a2, cfg)
        assert -ppo.surrogate_loss(r1, adv, cfg.clip_epsilon) >= before


def test_critic_loss_decreases_on_constant_target(rng):
    actor, critic, ao, co = nets(rng)
    # one-step episodes with reward c give return target c everywhere
    buf = ppo.Buffer()
    for _ in range(30):
        obs = rng.uniform(size=15)
        cobs = np.append(obs, 0.0)
        a, lp, u = ppo.sample_action(actor, obs, 0.4, BOUNDS, rng)
        buf.add(obs, cobs, u, lp, 2.5, forward(critic, cobs)[0], True, 0.4)
    cfg = replace(ppo.PPOConfig(), k_epochs=1)
    losses = []
    for _ in range(20):
        actor, critic, ao, co, diag = ppo.update(actor, critic, ao, co, buf, cfg, BOUNDS)
        losses.append(diag.value_loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_incomplete_buffer_rejected(rng):
    actor, critic, ao, co = nets(rng)
    buf = filled_buffer(rng, actor, critic, episodes=1)
    with pytest.raises(ppo.IncompleteBufferError):
        ppo.update(actor, critic, ao, co, buf, ppo.PPOConfig(), BOUNDS, episodes=10)
    buf.add(np.zeros(15), np.zeros(16), np.zeros(9), 0.0, 0.0, 0.0, False, 0.4)
    with pytest.raises(ppo.IncompleteBufferError):
        ppo.update(actor, critic, ao, co, buf, ppo.PPOConfig(), BOUNDS)
    buf.truncate_to_last_done()
    assert len(buf) == 12 and buf.complete()
    buf.clear()
    assert len(buf) == 0 and buf.episodes() == 0


def test_buffer_rejects_non_finite_log_prob():
    with pytest.raises(TrainingError):
        ppo.Buffer().add(np.zeros(15), np.zeros(16), np.zeros(9), np.nan, 0.0, 0.0, True, 0.4)
