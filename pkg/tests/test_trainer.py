from dataclasses import replace

import numpy as np
import pytest

from conftest import jurisdiction, scenario
from epictrl import trainer as T
from epictrl.config import desk_scenario
from epictrl.env import SARL_AGENT
from epictrl.epi import IntegrationError, MixingMatrix
from epictrl.nn import init_network, save_network


def care(unaware=300, aware=200, art_novls=150, art_vls=350):
    x = np.zeros((4, 5))
    x[0, 1], x[1, 1], x[2, 2], x[3, 3] = unaware, aware, art_novls, art_vls
    return x


def small(n=1, **kw):
    jurs = [jurisdiction(f"J{i}", susceptible=20_000, infected=care()) for i in range(n)]
    return scenario(jurs, budget=2e5, **kw)


def cfg(**kw):
    return T.TrainConfig(**{"episodes": 10, "seed": 0, **kw})


# -- cadence and buffers ----------------------------------------------------------------------

def test_single_episode_never_updates():
    res = T.train(cfg(episodes=1), small())
    assert res.update_steps == [] and res.diagnostics == []
    ag = next(iter(res.agents.agents.values()))
    assert len(ag.buffer) == 12 and ag.buffer.episodes() == 1


def test_update_fires_at_buffer_boundary():
    res = T.train(cfg(episodes=10), small())
    assert res.update_steps == [120]
    ag = next(iter(res.agents.agents.values()))
    assert len(ag.buffer) == 0


def test_buffer_discipline_over_several_updates():
    res = T.train(cfg(episodes=25), small(2))
    assert res.update_steps == [120, 240]
    assert res.agents.timesteps == 300
    for ag in res.agents.agents.values():
        assert ag.buffer.episodes() == 5 and len(ag.buffer) == 60
    assert [d[0] for d in res.diagnostics] == [1, 1, 2, 2]


def test_aborted_episode_is_dropped(monkeypatch):
    calls = {"n": 0}
    real = T.env_step

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 17:  # fifth step of the second episode
            raise IntegrationError("synthetic blow-up")
        return real(*args, **kw)

    # auto scaling performs one 12-step rollout before training starts
    monkeypatch.setattr(T, "env_step", flaky)
    res = T.train(cfg(episodes=11, reward_scale=1.0), small())
    assert len(res.aborted) == 1 and res.aborted[0].episode == 2
    assert np.isnan(res.curve[1].rewards["J0"])
    assert res.update_steps == [120]
    assert res.agents.timesteps == 120


def test_twin_agents_learn_identically():
    sc = small(2, mixing=MixingMatrix.identity())
    res = T.train(cfg(episodes=20, shared_agent_seed=True), sc)
    a = [r.rewards["J0"] for r in res.curve]
    b = [r.rewards["J1"] for r in res.curve]
    assert a == b
    j0, j1 = res.agents.agents["J0"], res.agents.agents["J1"]
    for x, y in zip(j0.actor.arrays(), j1.actor.arrays()):
        np.testing.assert_array_equal(x, y)


def test_training_is_deterministic(tmp_path):
    sc = small(2)
    r1 = T.train(cfg(episodes=12), sc, out_dir=tmp_path / "a")
    r2 = T.train(cfg(episodes=12), sc, out_dir=tmp_path / "b")
    assert r1.reward_rows() == r2.reward_rows()
    for f in sorted((tmp_path / "a/checkpoints/final").iterdir()):
        assert f.read_bytes() == (tmp_path / "b/checkpoints/final" / f.name).read_bytes()
    r3 = T.train(cfg(episodes=12, seed=1), sc)
    assert r3.reward_rows() != r1.reward_rows()


def test_sarl_has_single_agent():
    res = T.train(cfg(mode="sarl", episodes=2), small(3))
    assert res.agents.ids() == [SARL_AGENT]


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(mode="both")
    with pytest.raises(ValueError):
        T.TrainConfig(buffer_episodes=0)
    with pytest.raises(ValueError):
        T.TrainConfig(reward_scale=-1.0)


# -- checkpoints --------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    sc = small(2)
    res = T.train(cfg(episodes=10, checkpoint_every=5), sc, out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["ep000005", "ep000010", "final"]
    back = T.load_checkpoint(tmp_path / "checkpoints/final", sc)
    assert back.ids() == res.agents.ids() and back.timesteps == 120
    e1 = T.evaluate(res.agents, sc)
    e2 = T.evaluate(back, sc)
    np.testing.assert_array_equal(e1.incidence, e2.incidence)


def test_checkpoint_mismatches(tmp_path):
    sc = small(2)
    T.train(cfg(episodes=1), sc, out_dir=tmp_path)
    with pytest.raises(T.CheckpointMismatch, match="agents"):
        T.load_checkpoint(tmp_path / "checkpoints/final", small(3))
    save_network(init_network([12, 8, 9], np.random.default_rng(0)),
                 tmp_path / "checkpoints/final/agent00_actor.bin")
    with pytest.raises(T.CheckpointMismatch, match="actor widths"):
        T.load_checkpoint(tmp_path / "checkpoints/final", sc)


# -- evaluation ---------------------------------------------------------------------------

def test_evaluate_disease_free_population():
    sc = scenario([jurisdiction("A")])
    aset = T.init_agents(sc, "marl", 0)
    rep = T.evaluate(aset, sc)
    assert rep.cumulative_incidence() == 0 and rep.percent_change() == 0.0
    assert len(rep.rows()) == 12 and len(rep.trajectory_rows()) == 36


def test_percent_change_helper():
    assert T.percent_change(0.0, 5.0) == 0.0
    assert T.percent_change(200.0, 150.0) == -25.0


def test_evaluation_leaves_training_state_alone():
    sc = small()
    aset = T.init_agents(sc, "marl", 0)
    before = aset.agents["J0"].rng.bit_generator.state
    T.evaluate(aset, sc, episodes=2, deterministic=False)
    assert aset.agents["J0"].rng.bit_generator.state == before
    assert len(aset.agents["J0"].buffer) == 0


def test_deterministic_evaluation_repeats():
    sc = small()
    aset = T.init_agents(sc, "marl", 0)
    rep = T.evaluate(aset, sc, episodes=3)
    assert np.all(rep.incidence == rep.incidence[0])


def test_trained_policy_beats_random():
    sc = desk_scenario()
    res = T.train(cfg(episodes=300), sc)
    trained = T.evaluate(res.agents, sc).agent_rewards
    rand = T.evaluate_random(T.RandomPolicy(sc, "marl", seed=0), sc, episodes=10)
    assert sum(trained[a][0] for a in trained) > sum(rand.values())


# -- drivers --------------------------------------------------------------------------------

def test_max_workers_from_environment(monkeypatch):
    monkeypatch.setenv("EPICTRL_THREADS", "3")
    assert T.max_workers() == 3
    monkeypatch.setenv("EPICTRL_THREADS", "0")
    assert T.max_workers() == 1
    monkeypatch.setenv("EPICTRL_THREADS", "many")
    with pytest.raises(ValueError):
        T.max_workers()


def test_run_jobs_preserves_order_in_processes(monkeypatch):
    monkeypatch.setenv("EPICTRL_THREADS", "2")
    assert T.run_jobs(abs, [-3, 1, -2]) == [3, 1, 2]


def test_compare_modes_labels_and_shapes(monkeypatch):
    monkeypatch.setenv("EPICTRL_THREADS", "1")
    sc = small(2)
    rep = T.compare_modes(sc, budget_multiplier=10, seeds=(0, 1), config=cfg(episodes=2))
    assert set(rep.scenarios) == {"base", "scaled"}
    assert len(rep.runs) == 8
    assert set(rep.marl_minus_sarl()) == {0, 1}
    plain = T.compare_modes(sc, seeds=(0,), config=cfg(episodes=2))
    assert set(plain.scenarios) == {"base"}


def test_mixing_study_identity_scenario_predicts_itself(monkeypatch):
    monkeypatch.setenv("EPICTRL_THREADS", "1")
    sc = small(2, mixing=MixingMatrix.identity())
    rep = T.mixing_study(sc, seeds=(0,), config=cfg(episodes=2))
    pred, real = rep.totals(0)
    assert pred == real
    with pytest.raises(ValueError):
        T.mixing_study(small(1), seeds=(0,), config=cfg(episodes=2))
