import numpy as np
import pytest

from conftest import jurisdiction, random_scenario, scenario
from epictrl.env import (ACTION_DIM, SARL_AGENT, ActionBounds, BudgetSchedule, ContractError,
                         CostModel, EnvModel, HIVEnv, RewardConfig, action_to_rates,
                         aggregate_sarl, compute_cost, env_step, observe,
                         reward)
from epictrl.epi import (CareStage, EpiParams, MixingMatrix, StepOutcome, baseline_rates,
                         init_population, step_year)

IDENT = MixingMatrix.identity()


def outcome(nj=1, infections=0.0, tests=0.0, care=0.0, prep=0.0):
    def arr(v):
        a = np.zeros((nj, 3))
        a[:, 0] = v
        return a
    return StepOutcome(arr(infections), arr(tests), arr(care), arr(prep))


def care_block(unaware, aware, art_novls, art_vls):
    x = np.zeros((4, 5))
    x[CareStage.Unaware, 1] = unaware
    x[CareStage.AwareNoART, 1] = aware
    x[CareStage.ARTNoVLS, 2] = art_novls
    x[CareStage.ARTVLS, 3] = art_vls
    return x


def shares(state, params, i, k):
    x = state.infected[i, k].sum(axis=-1)
    pwh = x.sum()
    return x[CareStage.Unaware] / pwh, (x[CareStage.ARTNoVLS] + x[CareStage.ARTVLS]) / pwh


# -- observations -----------------------------------------------------------------------

def test_observe_worked_example():
    sc = scenario([jurisdiction("A", susceptible=9500, infected=care_block(100, 50, 150, 200))])
    ob = observe(init_population(sc), "A", sc.params())
    np.testing.assert_allclose(ob.p, 0.05, rtol=1e-15)
    np.testing.assert_allclose(ob.mu_u, 0.2, rtol=1e-15)
    np.testing.assert_allclose(ob.mu_a, 0.1, rtol=1e-15)
    np.testing.assert_allclose(ob.mu_art, 0.7, rtol=1e-15)
    assert ob.vector.shape == (15,)


def test_observe_zero_pwh_convention():
    sc = scenario([jurisdiction("A")])
    ob = observe(init_population(sc), "A", sc.params())
    for f in ("p", "mu_u", "mu_a", "mu_art"):
        assert np.all(getattr(ob, f) == 0)


def test_observe_all_suppressed():
    sc = scenario([jurisdiction("A", infected=care_block(0, 0, 0, 400))])
    ob = observe(init_population(sc), "A", sc.params())
    assert np.all(ob.mu_art == 1) and np.all(ob.mu_u == 0) and np.all(ob.mu_a == 0)


def test_prep_observation_is_coverage_among_indicated():
    sc = scenario([jurisdiction("A", prep=0.3)], epi=EpiParams(prep_indicated_fraction=0.2))
    ob = observe(init_population(sc), "A", sc.params())
    np.testing.assert_allclose(ob.mu_prep, 0.3, rtol=1e-15)


def test_aggregate_single_equals_observe(rng):
    sc = random_scenario(rng, 3)
    st = init_population(sc)
    for j in st.jurisdictions:
        np.testing.assert_array_equal(aggregate_sarl(st, [j], sc.params()).values,
                                      observe(st, j, sc.params()).values)


def test_aggregate_symmetric_mean():
    a = jurisdiction("A", susceptible=9600, infected=care_block(400, 0, 0, 0))
    b = jurisdiction("B", susceptible=9400, infected=care_block(600, 0, 0, 0))
    sc = scenario([a, b])
    ob = aggregate_sarl(init_population(sc), ["A", "B"], sc.params())
    np.testing.assert_allclose(ob.p, 0.05, rtol=1e-14)


def test_aggregate_unequal_pooled_counts():
    a = jurisdiction("A", susceptible=1000, infected=care_block(10, 20, 30, 40))
    b = jurisdiction("B", susceptible=50_000, infected=care_block(300, 100, 50, 550))
    sc = scenario([a, b])
    ob = aggregate_sarl(init_population(sc), ["A", "B"], sc.params())
    pwh = 100 + 1000
    assert ob.p[0] == pytest.approx(pwh / (pwh + 51_000), rel=1e-12)
    assert ob.mu_u[0] == pytest.approx(310 / pwh, rel=1e-12)
    assert ob.mu_a[0] == pytest.approx(120 / pwh, rel=1e-12)
    assert ob.mu_art[0] == pytest.approx(670 / pwh, rel=1e-12)


def test_aggregate_requires_jurisdictions():
    sc = scenario([jurisdiction("A")])
    with pytest.raises(ContractError):
        aggregate_sarl(init_population(sc), [], sc.params())


# -- action to rates --------------------------------------------------------------------

def _desk_like():
    return scenario([jurisdiction("A", susceptible=50_000, infected=care_block(300, 200, 150, 350))])


def test_zero_action_returns_baseline():
    sc = _desk_like()
    st = init_population(sc)
    r = action_to_rates(st, np.zeros(ACTION_DIM), "A", sc.params(), IDENT)
    base = baseline_rates(st, sc.params())
    np.testing.assert_array_equal(r.diagnostic, base.diagnostic)
    np.testing.assert_array_equal(r.care_entry, base.care_entry)
    np.testing.assert_array_equal(r.dropout, base.dropout)
    np.testing.assert_array_equal(r.prep_coverage, base.prep_coverage)
    assert not r.saturation.any()


def test_unaware_request_saturates_without_unaware():
    # suppressed only: nobody transmits, so no new unaware cases can appear
    sc = scenario([jurisdiction("A", infected=care_block(0, 0, 0, 300))])
    st = init_population(sc)
    params = sc.params()
    a = np.tile([0.005, 0.0, 0.0], 3)
    r = action_to_rates(st, a, "A", params, IDENT)
    assert r.saturation[0, :, 0].all()
    np.testing.assert_allclose(r.diagnostic.max(axis=-1), params.rate_cap, rtol=1e-14)


def test_unaware_round_trip():
    sc = _desk_like()
    st = init_population(sc)
    params = sc.params()
    base_next, _ = step_year(st, baseline_rates(st, params), IDENT, params)
    a = np.tile([0.005, 0.0, 0.0], 3)
    r = action_to_rates(st, a, "A", params, IDENT)
    nxt, _ = step_year(st, r, IDENT, params)
    assert not r.saturation.any()
    for k in range(3):
        u0, _ = shares(base_next, params, 0, k)
        u1, _ = shares(nxt, params, 0, k)
        assert abs((u0 - u1) - 0.005) < 1e-6


def test_art_round_trip_is_relative_to_diagnosis_adjusted_projection():
    sc = _desk_like()
    st = init_population(sc)
    params = sc.params()
    a_unaware = np.tile([0.004, 0.0, 0.0], 3)
    ref = step_year(st, action_to_rates(st, a_unaware, "A", params, IDENT), IDENT, params)[0]
    both = np.tile([0.004, 0.03, 0.0], 3)
    nxt = step_year(st, action_to_rates(st, both, "A", params, IDENT), IDENT, params)[0]
    for k in range(3):
        _, art0 = shares(ref, params, 0, k)
        _, art1 = shares(nxt, params, 0, k)
        assert abs((art1 - art0) - 0.03) < 1e-6


def test_prep_target_capped_and_flagged():
    sc = scenario([jurisdiction("A", prep=0.99)])
    st = init_population(sc)
    r = action_to_rates(st, np.tile([0, 0, 0.04], 3), "A", sc.params(), IDENT)
    np.testing.assert_allclose(r.prep_coverage, 1.0)
    assert r.saturation[0, :, 2].all()


def test_action_targets_only_named_jurisdiction():
    sc = scenario([jurisdiction("A", infected=care_block(300, 200, 150, 350)),
                   jurisdiction("B", infected=care_block(300, 200, 150, 350))])
    st = init_population(sc)
    r = action_to_rates(st, np.tile([0.005, 0.04, 0.04], 3), "B", sc.params(), IDENT)
    np.testing.assert_array_equal(r.multipliers[0], 1.0)
    assert np.all(r.multipliers[1] > 1.0)


# -- cost and reward --------------------------------------------------------------------

def test_cost_examples():
    model = CostModel(cost_per_test=50)
    assert compute_cost(outcome(), model, 0) == 0
    assert compute_cost(outcome(tests=1000), model, 0) == 50_000
    busy = outcome(tests=123, care=45, prep=6)
    plain = compute_cost(busy, CostModel(overhead_fraction=0.0), 0)
    assert compute_cost(busy, CostModel(overhead_fraction=0.1), 0) == pytest.approx(plain * 1.1,
                                                                                   rel=1e-15)


def test_reward_examples():
    cfg = RewardConfig(penalty_weight=1, penalty_scale=10_000)
    assert reward(outcome(), 5.0, 5.0, 0, cfg) == 0
    assert reward(outcome(infections=100), 10.0, 20.0, 0, cfg) == -100
    assert reward(outcome(infections=100), 2e6, 1e6, 0, cfg) == -200


def test_reward_decomposition_and_signed_option(rng):
    cfg = RewardConfig()
    signed = RewardConfig(signed_penalty=True)
    for _ in range(50):
        inf, c, b = rng.uniform(0, 500), rng.uniform(0, 2e6), rng.uniform(0, 2e6)
        r = reward(outcome(infections=inf), c, b, 0, cfg)
        pen = r + inf
        assert pen <= 0
        if c <= b:
            assert pen == 0
        rs = reward(outcome(infections=inf), c, b, 0, signed)
        assert rs + inf == pytest.approx(-(c - b) / 10_000, rel=1e-12, abs=1e-9)


def test_budget_schedule_per_year_and_scaling():
    b = BudgetSchedule({"A": [1.0, 2.0, 3.0], "B": 5.0})
    assert b.budget("A", 1) == 2.0 and b.budget("A", 10) == 3.0 and b.budget("B", 7) == 5.0
    assert b.scaled(10).budget("A", 0) == 10.0


def test_action_bounds_scaling():
    assert ActionBounds().scaled(2) == ActionBounds(0.01, 0.08, 0.08)


# -- env_step ---------------------------------------------------------------------------

def test_episode_length_and_done_flag():
    sc = _desk_like()
    env = HIVEnv(sc, "marl")
    env.reset()
    steps, done = 0, False
    while not done:
        _, _, done, info = env.step({"A": np.zeros(ACTION_DIM)})
        steps += 1
    assert steps == 12 and env.state.year == 2031 and info["year"] == 2030


def test_out_of_bounds_action_is_rejected():
    sc = _desk_like()
    st = init_population(sc)
    with pytest.raises(ContractError):
        env_step(st, {"A": np.full(ACTION_DIM, 0.5)}, "marl", EnvModel.from_scenario(sc))
    with pytest.raises(ContractError):
        env_step(st, {"B": np.zeros(ACTION_DIM)}, "marl", EnvModel.from_scenario(sc))


def test_sarl_broadcast_matches_identical_marl_actions(rng):
    sc = random_scenario(rng, 3)
    st = init_population(sc)
    model = EnvModel.from_scenario(sc)
    a = rng.uniform(0, model.bounds.vector())
    s_next, _, s_rew, _, s_info = env_step(st, {SARL_AGENT: a}, "sarl", model)
    m_next, _, _, _, m_info = env_step(st, {j: a for j in st.jurisdictions}, "marl", model)
    np.testing.assert_array_equal(s_next.infected, m_next.infected)
    np.testing.assert_array_equal(s_info["actions"], m_info["actions"])
    pooled = -s_info["outcome"].new_infections.sum() - max(
        s_info["costs"].sum() - s_info["budgets"].sum(), 0) / 10_000
    assert s_rew[SARL_AGENT] == pytest.approx(pooled, rel=1e-12)


def test_marl_symmetry_in_decoupled_twins():
    inf = care_block(300, 200, 150, 350)
    sc = scenario([jurisdiction("A", infected=inf), jurisdiction("B", infected=inf)],
                  mixing=IDENT)
    env = HIVEnv(sc, "marl")
    env.reset()
    a = np.tile([0.003, 0.02, 0.01], 3)
    for _ in range(12):
        _, rew, done, _ = env.step({"A": a, "B": a})
        assert rew["A"] == rew["B"]
