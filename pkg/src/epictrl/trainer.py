"""Training loop, evaluation and the experiment drivers built on it.

Every agent owns an actor, a critic with its optimizer states, a rollout buffer
and a private random stream. The environment advances once per year for all
agents together; updates fire whenever the total step count is a multiple of
``buffer_episodes * horizon``.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from epictrl import ppo
from epictrl.config import ScenarioConfig
from epictrl.env import (ACTION_DIM, OBS_DIM, EnvModel, agent_ids, env_step, observe_agents)
from epictrl.epi import N_GROUPS, IntegrationError, MixingMatrix, RiskGroup, init_population
from epictrl.nn import AdamState, Network, forward, load_network, save_network

log = logging.getLogger(__name__)

MODES = ("sarl", "marl")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "marl"
    episodes: int = 2000
    buffer_episodes: int = 10
    seed: int = 0
    # "auto": divide each agent's rewards by its mean per-year reward magnitude
    # under the mid-range action (what a fresh actor plays); a number is used as
    # a fixed multiplier.
    reward_scale: str | float = "auto"
    checkpoint_every: int = 0
    eval_every: int = 0
    shared_agent_seed: bool = False
    ppo: ppo.PPOConfig = field(default_factory=ppo.PPOConfig)

    def __post_init__(self):
        if self.mode.lower() not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.episodes < 1 or self.buffer_episodes < 1:
            raise ValueError("episodes and buffer_episodes must be >= 1")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("checkpoint_every and eval_every must be >= 0")
        if self.reward_scale != "auto" and not float(self.reward_scale) > 0:
            raise ValueError("reward_scale must be 'auto' or a positive number")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "ppo"}
        d["ppo"] = self.ppo.to_dict()
        return d


@dataclass
class Agent:
    agent_id: str
    actor: Network
    critic: Network
    actor_opt: AdamState
    critic_opt: AdamState
    rng: np.random.Generator
    reward_scale: float = 1.0
    buffer: ppo.Buffer = field(default_factory=ppo.Buffer)


@dataclass
class AgentSet:
    mode: str
    agents: dict
    horizon: int
    ppo_cfg: ppo.PPOConfig = field(default_factory=ppo.PPOConfig)
    timesteps: int = 0

    @property
    def std(self) -> float:
        return ppo.exploration_std(self.timesteps, self.ppo_cfg)

    def ids(self) -> list:
        return list(self.agents)


def critic_input(obs: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """Critic sees the observation plus the elapsed fraction of the episode."""
    return np.append(obs, t / horizon)


def _agent_rngs(ids, seed: int, shared: bool) -> dict:
    if shared:
        return {a: (np.random.default_rng(seed), np.random.default_rng([seed, 1])) for a in ids}
    children = np.random.SeedSequence(seed).spawn(2 * len(ids))
    return {a: (np.random.default_rng(children[2 * i]), np.random.default_rng(children[2 * i + 1]))
            for i, a in enumerate(ids)}


def init_agents(scenario: ScenarioConfig, mode: str, seed: int,
                cfg: ppo.PPOConfig = ppo.PPOConfig(), shared_agent_seed: bool = False) -> AgentSet:
    state = init_population(scenario)
    ids = agent_ids(state, mode)
    agents = {}
    for aid, (init_rng, act_rng) in _agent_rngs(ids, seed, shared_agent_seed).items():
        actor = ppo.init_actor(OBS_DIM, ACTION_DIM, init_rng, cfg.hidden)
        critic = ppo.init_critic(OBS_DIM + 1, init_rng, cfg.hidden)
        agents[aid] = Agent(aid, actor, critic, AdamState.for_network(actor, cfg.actor_lr),
                            AdamState.for_network(critic, cfg.critic_lr), act_rng)
    return AgentSet(mode.lower(), agents, scenario.horizon, cfg)


# -- rollouts ----------------------------------------------------------------------

def auto_reward_scales(scenario: ScenarioConfig, mode: str, model: EnvModel | None = None,
                       action_fraction: float = 0.5) -> dict:
    """Per-agent multiplier giving unit mean yearly reward magnitude.

    Measured on a rollout where every agent plays ``action_fraction`` of each
    bound, which for 0.5 is the squashed mean of a freshly initialized actor.
    """
    model = model or EnvModel.from_scenario(scenario)
    state = init_population(scenario)
    ids = agent_ids(state, mode)
    action = action_fraction * model.bounds.vector()
    totals = dict.fromkeys(ids, 0.0)
    for _ in range(scenario.horizon):
        state, _, rewards, _, _ = env_step(state, dict.fromkeys(ids, action), mode, model)
        for a in ids:
            totals[a] += abs(rewards[a])
    return {a: (scenario.horizon / v if v > 0 else 1.0) for a, v in totals.items()}


@dataclass
class EpisodeRecord:
    episode: int
    rewards: dict  # agent -> unscaled episode reward
    aborted: bool = False
    error: str = ""


def run_episode(aset: AgentSet, model: EnvModel, initial, std: float, record: bool = True,
                rollout_rng=None):
    """Roll out one episode. Appends to buffers when ``record``.

    Returns ``(episode_rewards, steps, infos)``. ``rollout_rng`` overrides the
    agents' own streams (used for evaluation so training streams stay untouched).
    """
    state = initial.copy()
    obs = observe_agents(state, aset.mode, model.params)
    totals = dict.fromkeys(aset.agents, 0.0)
    infos = []
    for t in range(aset.horizon):
        joint, cache = {}, {}
        for aid, ag in aset.agents.items():
            o = obs[aid].vector
            rng = rollout_rng if rollout_rng is not None else ag.rng
            a, lp, u = ppo.sample_action(ag.actor, o, std, model.bounds.vector(), rng)
            joint[aid] = a
            cache[aid] = (o, u, lp)
        state, obs, rewards, done, info = env_step(state, joint, aset.mode, model)
        done = done or t == aset.horizon - 1
        infos.append(info)
        for aid, ag in aset.agents.items():
            totals[aid] += rewards[aid]
            if record:
                o, u, lp = cache[aid]
                c_in = critic_input(o, t, aset.horizon)
                v = forward(ag.critic, c_in)[0]
                ag.buffer.add(o, c_in, u, lp, rewards[aid] * ag.reward_scale, v, done, std)
        if done:
            break
    return totals, t + 1, infos


@dataclass
class TrainResult:
    agents: AgentSet
    curve: list  # EpisodeRecord per episode
    diagnostics: list  # (update index, timesteps, agent id, UpdateDiagnostics)
    update_steps: list  # X at which each update fired
    aborted: list
    checkpoints: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)  # (episode, EvaluationReport)

    def reward_rows(self) -> list:
        return [(r.episode, a, v) for r in self.curve for a, v in r.rewards.items()]


def train(config: TrainConfig, scenario: ScenarioConfig, out_dir=None,
          mixing: MixingMatrix | None = None, progress=None) -> TrainResult:
    """Run ``config.episodes`` episodes of rollouts and PPO updates.

    ``mixing`` overrides the scenario's normalized mixing matrix. Checkpoints go
    to ``out_dir/checkpoints`` when ``out_dir`` is given.
    """
    mode = config.mode.lower()
    model = EnvModel.from_scenario(scenario, mixing)
    initial = init_population(scenario)
    aset = init_agents(scenario, mode, config.seed, config.ppo, config.shared_agent_seed)
    if config.reward_scale == "auto":
        scales = auto_reward_scales(scenario, mode, model)
    else:
        scales = dict.fromkeys(aset.agents, float(config.reward_scale))
    for aid, ag in aset.agents.items():
        ag.reward_scale = scales[aid]

    period = config.buffer_episodes * scenario.horizon
    result = TrainResult(aset, [], [], [], [])
    n_updates = 0
    for ep in range(1, config.episodes + 1):
        std = aset.std
        try:
            totals, steps, _ = run_episode(aset, model, initial, std)
        except IntegrationError as exc:
            # drop the partial episode; the next one starts fresh
            for ag in aset.agents.values():
                ag.buffer.truncate_to_last_done()
            log.warning("episode %d aborted: %s", ep, exc)
            rec = EpisodeRecord(ep, dict.fromkeys(aset.agents, float("nan")), True, str(exc))
            result.curve.append(rec)
            result.aborted.append(rec)
            continue
        aset.timesteps += steps
        result.curve.append(EpisodeRecord(ep, totals))
        if aset.timesteps % period == 0:
            n_updates += 1
            result.update_steps.append(aset.timesteps)
            for aid, ag in aset.agents.items():
                ag.actor, ag.critic, ag.actor_opt, ag.critic_opt, diag = ppo.update(
                    ag.actor, ag.critic, ag.actor_opt, ag.critic_opt, ag.buffer, config.ppo,
                    model.bounds.vector(), episodes=config.buffer_episodes)
                diag.mean_episode_reward /= ag.reward_scale
                ag.buffer.clear()
                result.diagnostics.append((n_updates, aset.timesteps, aid, diag))
        if out_dir is not None and config.checkpoint_every and ep % config.checkpoint_every == 0:
            result.checkpoints.append(save_checkpoint(aset, Path(out_dir) / "checkpoints" /
                                                      f"ep{ep:06d}", scenario, config, ep))
        if config.eval_every and ep % config.eval_every == 0:
            result.evaluations.append((ep, evaluate(aset, scenario, mixing=mixing)))
        if progress is not None:
            progress(ep, result)
    if out_dir is not None:
        result.checkpoints.append(save_checkpoint(aset, Path(out_dir) / "checkpoints" / "final",
                                                  scenario, config, config.episodes))
    return result


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(aset: AgentSet, path, scenario: ScenarioConfig, config: TrainConfig,
                    episode: int) -> Path:
    """One actor and one critic file per agent, plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (aid, ag) in enumerate(aset.agents.items()):
        meta = {"agent": aid, "mode": aset.mode, "timesteps": aset.timesteps}
        fa, fc = f"agent{i:02d}_actor.bin", f"agent{i:02d}_critic.bin"
        save_network(ag.actor, path / fa, meta)
        save_network(ag.critic, path / fc, meta)
        files[aid] = {"actor": fa, "critic": fc, "reward_scale": ag.reward_scale}
    manifest = {"mode": aset.mode, "agents": files, "episode": episode,
                "timesteps": aset.timesteps, "std": aset.std, "obs_dim": OBS_DIM,
                "action_dim": ACTION_DIM, "horizon": aset.horizon,
                "config_hash": scenario.config_hash(), "train_config": config.to_dict()}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class CheckpointMismatch(ValueError):
    """Checkpoint does not fit the scenario it is evaluated against."""


def load_checkpoint(path, scenario: ScenarioConfig) -> AgentSet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    mode = manifest["mode"]
    expected = agent_ids(init_population(scenario), mode)
    found = list(manifest["agents"])
    if found != expected:
        raise CheckpointMismatch(f"checkpoint agents {found} do not match scenario agents "
                                 f"{expected}")
    cfg = ppo.PPOConfig.from_dict(manifest["train_config"]["ppo"])
    agents = {}
    for aid, files in manifest["agents"].items():
        actor, _ = load_network(path / files["actor"])
        critic, _ = load_network(path / files["critic"])
        if actor.n_in != OBS_DIM or actor.n_out != ACTION_DIM:
            raise CheckpointMismatch(
                f"agent {aid}: expected actor widths {OBS_DIM}->{ACTION_DIM}, "
                f"found {actor.n_in}->{actor.n_out}")
        if critic.n_in != OBS_DIM + 1:
            raise CheckpointMismatch(f"agent {aid}: expected critic input width {OBS_DIM + 1}, "
                                     f"found {critic.n_in}")
        agents[aid] = Agent(aid, actor, critic, AdamState.for_network(actor, cfg.actor_lr),
                            AdamState.for_network(critic, cfg.critic_lr),
                            np.random.default_rng(0), files.get("reward_scale", 1.0))
    return AgentSet(mode, agents, scenario.horizon, cfg, manifest["timesteps"])


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvaluationReport:
    jurisdictions: list
    years: list
    incidence: np.ndarray  # (episodes, T, J)
    costs: np.ndarray
    budgets: np.ndarray
    rewards: np.ndarray  # per jurisdiction, (episodes, T, J)
    agent_rewards: dict  # agent -> (episodes,) episode totals
    actions: np.ndarray  # (episodes, T, J, 9)
    group_incidence: np.ndarray  # (episodes, T, J, 3)
    saturation: np.ndarray  # (episodes, T, J, 3 groups, 3 components)

    def mean_incidence(self) -> np.ndarray:
        return self.incidence.mean(axis=0)

    def cumulative_incidence(self) -> float:
        """Total new infections over the horizon, averaged over episodes."""
        return float(self.incidence.sum(axis=(1, 2)).mean())

    def percent_change(self, j=None) -> float:
        inc = self.mean_incidence()
        series = inc.sum(axis=1) if j is None else inc[:, j]
        return percent_change(series[0], series[-1])

    def rows(self) -> list:
        out = []
        for e in range(self.incidence.shape[0]):
            for t, year in enumerate(self.years):
                for j, jid in enumerate(self.jurisdictions):
                    out.append((e, year, jid, self.incidence[e, t, j], self.costs[e, t, j],
                                self.budgets[e, t, j], self.rewards[e, t, j]))
        return out

    def trajectory_rows(self) -> list:
        """One row per (episode, year, jurisdiction, risk group).

        Cost, budget and reward are jurisdiction-level and repeat across groups.
        """
        out = []
        for e in range(self.incidence.shape[0]):
            for t, year in enumerate(self.years):
                for j, jid in enumerate(self.jurisdictions):
                    acts = self.actions[e, t, j].reshape(N_GROUPS, 3)
                    for k, g in enumerate(RiskGroup):
                        sat = self.saturation[e, t, j, k]
                        out.append((e, year, jid, g.name, self.group_incidence[e, t, j, k],
                                    self.costs[e, t, j], self.budgets[e, t, j],
                                    self.rewards[e, t, j], *acts[k], *(int(x) for x in sat)))
        return out


def percent_change(first: float, last: float) -> float:
    """Relative change in percent; defined as 0 when the first value is 0."""
    return 0.0 if first == 0 else 100.0 * (last - first) / first


def evaluate(aset: AgentSet, scenario: ScenarioConfig, episodes: int = 1,
             deterministic: bool = True, seed: int = 0, mixing: MixingMatrix | None = None,
             std: float | None = None) -> EvaluationReport:
    """Roll out ``episodes`` episodes without touching buffers or training streams."""
    model = EnvModel.from_scenario(scenario, mixing)
    initial = init_population(scenario)
    if std is None:
        std = 0.0 if deterministic else aset.std
    rng = np.random.default_rng(seed)
    inc, costs, budgets, rew, acts, agent_tot, ginc, sat = [], [], [], [], [], [], [], []
    years = []
    for _ in range(episodes):
        totals, _, infos = run_episode(aset, model, initial, std, record=False, rollout_rng=rng)
        years = [i["year"] for i in infos]
        inc.append([i["outcome"].new_infections.sum(axis=1) for i in infos])
        costs.append([i["costs"] for i in infos])
        budgets.append([i["budgets"] for i in infos])
        rew.append([i["jurisdiction_rewards"] for i in infos])
        acts.append([i["actions"] for i in infos])
        ginc.append([i["outcome"].new_infections for i in infos])
        sat.append([i["outcome"].saturation for i in infos])
        agent_tot.append(totals)
    return EvaluationReport(list(initial.jurisdictions), years, np.array(inc), np.array(costs),
                            np.array(budgets), np.array(rew),
                            {a: np.array([t[a] for t in agent_tot]) for a in aset.agents},
                            np.array(acts), np.array(ginc), np.array(sat))


class RandomPolicy:
    """Uniform actions within bounds, shaped like an ``AgentSet`` for rollouts."""

    def __init__(self, scenario: ScenarioConfig, mode: str, seed: int = 0):
        ids = agent_ids(init_population(scenario), mode)
        self.mode, self.horizon = mode.lower(), scenario.horizon
        self.rng = np.random.default_rng(seed)
        self.agents = dict.fromkeys(ids)


def evaluate_random(policy: RandomPolicy, scenario: ScenarioConfig, episodes: int = 1) -> dict:
    """Mean episode reward per agent under uniform random actions."""
    model = EnvModel.from_scenario(scenario)
    bounds = model.bounds.vector()
    out = dict.fromkeys(policy.agents, 0.0)
    for _ in range(episodes):
        state = init_population(scenario)
        for _ in range(scenario.horizon):
            joint = {a: policy.rng.uniform(0.0, bounds) for a in policy.agents}
            state, _, rewards, _, _ = env_step(state, joint, policy.mode, model)
            for a in out:
                out[a] += rewards[a] / episodes
    return out


# -- experiment drivers ---------------------------------------------------------------

def max_workers() -> int:
    env = os.environ.get("EPICTRL_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"EPICTRL_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def run_jobs(fn, jobs: list) -> list:
    """Map ``fn`` over ``jobs`` with up to ``max_workers()`` processes, order preserved."""
    n = min(max_workers(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class RunSummary:
    """Compact, picklable outcome of one train-then-evaluate job."""

    label: str
    mode: str
    seed: int
    report: EvaluationReport
    curve: list
    aborted: int

    @property
    def cumulative_incidence(self) -> float:
        return self.report.cumulative_incidence()


def _train_and_evaluate(job) -> RunSummary:
    label, scenario, cfg, train_mixing, eval_mixings = job
    res = train(cfg, scenario, mixing=train_mixing)
    reports = {name: evaluate(res.agents, scenario, mixing=m) for name, m in eval_mixings.items()}
    return label, cfg.mode, cfg.seed, reports, res.reward_rows(), len(res.aborted)


def _summaries(raw) -> list:
    return [RunSummary(label, mode, seed, reports["default"], curve, aborted)
            for label, mode, seed, reports, curve, aborted in raw]


@dataclass
class ComparisonReport:
    seeds: list
    action_multiplier: float
    budget_multiplier: float
    runs: dict  # (scenario label, mode, seed) -> RunSummary
    scenarios: dict  # label -> ScenarioConfig

    def cumulative(self, label: str, mode: str) -> list:
        return [self.runs[(label, mode, s)].cumulative_incidence for s in self.seeds]

    def marl_minus_sarl(self, label: str = "base") -> dict:
        """Per-seed differences in cumulative incidence and total cost."""
        out = {}
        for s in self.seeds:
            m, r = self.runs[(label, "marl", s)].report, self.runs[(label, "sarl", s)].report
            out[s] = {"incidence": m.cumulative_incidence() - r.cumulative_incidence(),
                      "cost": float(m.costs.sum(axis=(1, 2)).mean() - r.costs.sum(axis=(1, 2)).mean())}
        return out


def compare_modes(scenario: ScenarioConfig, budget_multiplier: float = 1.0,
                  action_multiplier: float = 1.0, seeds=(0,), config: TrainConfig = TrainConfig(),
                  modes=MODES) -> ComparisonReport:
    """Train and evaluate both modes on the base and the multiplier-scaled scenario."""
    if budget_multiplier <= 0 or action_multiplier <= 0:
        raise ValueError("multipliers must be positive")
    scenarios = {"base": scenario}
    scaled = scenario.scaled(action_multiplier, budget_multiplier)
    if scaled is not scenario:
        scenarios["scaled"] = scaled
    jobs = [(label, sc, replace(config, mode=m, seed=s), None, {"default": None})
            for label, sc in scenarios.items() for m in modes for s in seeds]
    runs = {(r.label, r.mode, r.seed): r for r in _summaries(run_jobs(_train_and_evaluate, jobs))}
    return ComparisonReport(list(seeds), action_multiplier, budget_multiplier, runs, scenarios)


@dataclass
class MixingStudyReport:
    seeds: list
    predicted: dict  # seed -> EvaluationReport under identity mixing
    realized: dict  # seed -> EvaluationReport under the scenario mixing
    aborted: int = 0

    def totals(self, seed) -> tuple:
        return (self.predicted[seed].cumulative_incidence(),
                self.realized[seed].cumulative_incidence())


def mixing_study(scenario: ScenarioConfig, seeds=(0,), config: TrainConfig = TrainConfig()
                 ) -> MixingStudyReport:
    """Train per-jurisdiction agents with mixing switched off, then evaluate them with it on.

    With identity mixing the jurisdictions are decoupled, so one multi-agent run
    trains every jurisdiction's agent independently.
    """
    if len(scenario.jurisdictions) < 2:
        raise ValueError("mixing study needs at least two jurisdictions")
    ident = MixingMatrix.identity()
    jobs = [("mixing", scenario, replace(config, mode="marl", seed=s), ident,
             {"predicted": ident, "realized": None}) for s in seeds]
    raw = run_jobs(_train_and_evaluate, jobs)
    return MixingStudyReport(list(seeds), {r[2]: r[3]["predicted"] for r in raw},
                             {r[2]: r[3]["realized"] for r in raw}, sum(r[5] for r in raw))
