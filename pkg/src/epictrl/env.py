"""The epidemic model seen as a per-agent decision process.

An agent observes 15 proportions (five per risk group), picks 9 proportion-point
changes (three per risk group), and is rewarded with minus its new infections
minus a budget-overrun penalty. In MARL mode each jurisdiction is an agent; in
SARL mode one agent sees pooled counts and its action is applied everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from epictrl import _kernels
from epictrl.epi import (
    N_GROUPS, CareStage, ConfigError, EpiParams, InterventionRates, MixingMatrix, RiskGroup,
    StepOutcome, SystemState, baseline_rates, force_of_infection_all, prep_factor, step_year,
    _maturation,
)

OBS_FIELDS = ("p", "mu_u", "mu_a", "mu_art", "mu_prep")
ACTION_FIELDS = ("unaware", "art", "prep")
OBS_DIM = N_GROUPS * len(OBS_FIELDS)
ACTION_DIM = N_GROUPS * len(ACTION_FIELDS)
SARL_AGENT = "ALL"

INVERSION_TOL = 1e-10
INVERSION_MAX_ITER = 60


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


@dataclass(frozen=True, eq=False)
class Observation:
    """Per risk group: prevalence, care-continuum shares and PrEP coverage."""

    values: np.ndarray  # (3 groups, 5 fields)

    @property
    def vector(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getattr__(self, name):
        if name in OBS_FIELDS:
            return self.values[:, OBS_FIELDS.index(name)]
        raise AttributeError(name)


@dataclass(frozen=True)
class ActionBounds:
    """Upper bounds on yearly proportion-point changes."""

    unaware: float = 0.005
    art: float = 0.04
    prep: float = 0.04

    def __post_init__(self):
        if min(self.unaware, self.art, self.prep) < 0:
            raise ConfigError("action bounds must be non-negative")

    def vector(self) -> np.ndarray:
        return np.tile([self.unaware, self.art, self.prep], N_GROUPS).astype(float)

    def scaled(self, factor: float) -> "ActionBounds":
        return ActionBounds(self.unaware * factor, self.art * factor, self.prep * factor)


@dataclass(frozen=True)
class CostModel:
    cost_per_test: float = 50.0
    cost_retention_per_person_year: float = 1200.0
    cost_prep_per_person_year: float = 4000.0
    overhead_fraction: float = 0.0

    def __post_init__(self):
        if min(self.cost_per_test, self.cost_retention_per_person_year,
               self.cost_prep_per_person_year, self.overhead_fraction) < 0:
            raise ConfigError("cost coefficients must be non-negative")


@dataclass(frozen=True)
class RewardConfig:
    penalty_weight: float = 1.0
    penalty_scale: float = 10_000.0  # currency per infection-equivalent
    signed_penalty: bool = False

    def __post_init__(self):
        if self.penalty_scale <= 0 or self.penalty_weight < 0:
            raise ConfigError("penalty_scale must be > 0 and penalty_weight >= 0")


@dataclass
class BudgetSchedule:
    """Budget per jurisdiction per simulated year (index 0 = start year)."""

    budgets: dict = field(default_factory=dict)  # id -> float | list[float]

    def __post_init__(self):
        for jid, b in self.budgets.items():
            if np.any(np.asarray(b, dtype=float) < 0):
                raise ConfigError(f"budget for {jid} must be non-negative")

    def budget(self, jid, t: int) -> float:
        try:
            b = self.budgets[jid]
        except KeyError:
            raise ConfigError(f"no budget for jurisdiction {jid!r}") from None
        if np.ndim(b) == 0:
            return float(b)
        b = list(b)
        return float(b[min(t, len(b) - 1)])

    def scaled(self, factor: float) -> "BudgetSchedule":
        return BudgetSchedule({jid: (float(b) * factor if np.ndim(b) == 0 else
                                     [float(x) * factor for x in b])
                               for jid, b in self.budgets.items()})


def action_matrix(action) -> np.ndarray:
    """Flat 9-vector (group-major) to a (3 groups, 3 components) array."""
    a = np.asarray(action, dtype=float)
    if a.shape == (ACTION_DIM,):
        return a.reshape(N_GROUPS, len(ACTION_FIELDS))
    if a.shape == (N_GROUPS, len(ACTION_FIELDS)):
        return a
    raise ContractError(f"action must have {ACTION_DIM} entries, got shape {a.shape}")


def check_bounds(action, bounds: ActionBounds, atol: float = 1e-12):
    a = action_matrix(action).reshape(-1)
    hi = bounds.vector()
    if np.any(a < -atol) or np.any(a > hi + atol) or not np.all(np.isfinite(a)):
        raise ContractError(f"action {a} outside bounds [0, {hi}]")


def _continuum_counts(state: SystemState, params: EpiParams, idx=None) -> np.ndarray:
    """Counts per group summed over jurisdictions ``idx``: (3, 7).

    Columns: pwh, susceptible, unaware, aware_no_art, on_art, on_prep, indicated.
    """
    sl = slice(None) if idx is None else idx
    X = state.infected[sl]
    S = state.susceptible[sl]
    by_care = X.sum(axis=-1)  # (J, 3, 4)
    cols = np.stack([
        by_care.sum(axis=-1),
        S,
        by_care[..., CareStage.Unaware],
        by_care[..., CareStage.AwareNoART],
        by_care[..., CareStage.ARTNoVLS] + by_care[..., CareStage.ARTVLS],
        state.on_prep[sl],
        params.prep_indicated_fraction * S,
    ], axis=-1)
    return cols.sum(axis=0)


def _ratios(c: np.ndarray) -> Observation:
    pwh, sus, unaware, aware, art, prep, pool = c.T

    def div(a, b):
        return np.divide(a, b, out=np.zeros_like(a), where=b > 0)

    values = np.stack([div(pwh, pwh + sus), div(unaware, pwh), div(aware, pwh),
                       div(art, pwh), np.minimum(div(prep, pool), 1.0)], axis=-1)
    return Observation(values)


def observe(state: SystemState, j, params: EpiParams) -> Observation:
    """Local observation for jurisdiction ``j``.

    Care-continuum shares are 0 for a group with no people with HIV.
    """
    i = state.index(j)
    return _ratios(_continuum_counts(state, params, [i]))


def aggregate_sarl(state: SystemState, jurisdictions, params: EpiParams) -> Observation:
    """Observation over the pooled counts of several jurisdictions."""
    idx = [state.index(j) for j in jurisdictions]
    if not idx:
        raise ContractError("aggregate_sarl needs at least one jurisdiction")
    return _ratios(_continuum_counts(state, params, idx))


def actions_to_rates(state: SystemState, actions: np.ndarray, params: EpiParams,
                     mixing: MixingMatrix) -> InterventionRates:
    """Rates delivering each jurisdiction's proportion changes over the coming year.

    ``actions`` has shape (J, 9). For every block the diagnostic multiplier is
    bisected so that next year's unaware share ends ``a_unaware`` below its
    baseline projection. Then, with that diagnostic rate fixed, the retention
    multiplier is bisected so the on-ART share ends ``a_art`` above the
    projection without it. Requests that stay infeasible at the rate cap are
    flagged as saturated and get the capped rate.
    """
    nj = state.n_jurisdictions
    acts = np.asarray(actions, dtype=float).reshape(nj, N_GROUPS, len(ACTION_FIELDS))
    base = baseline_rates(state, params)
    lam = force_of_infection_all(state, mixing, params)

    cov0 = base.prep_coverage
    want = cov0 + acts[..., 2]
    sat_prep = want > 1.0
    cov = np.minimum(want, 1.0)
    pool = cov * params.prep_indicated_fraction

    m_cap = np.full((nj, N_GROUPS), params.rate_cap / max(base.diagnostic.max(), 1e-300))
    r_cap = np.full((nj, N_GROUPS), params.rate_cap / max(base.care_entry.max(), 1e-300))
    mult, sat = _kernels.invert_all(
        state.susceptible, state.infected, state.dead, lam, prep_factor(cov, params), pool,
        _maturation(params, state.susceptible.shape), params.background_mortality,
        params.stage_mortality, params.progression_rate, base.diagnostic, base.care_entry,
        base.dropout, params.linkage_fraction, params.test_targeting, params.substeps,
        np.ascontiguousarray(acts[..., 0]), np.ascontiguousarray(acts[..., 1]),
        np.maximum(m_cap, 1.0), np.maximum(r_cap, 1.0), INVERSION_TOL, INVERSION_MAX_ITER)
    m = mult[..., 0:1]
    r = mult[..., 1:2]
    saturation = np.concatenate([sat, sat_prep[..., None]], axis=-1)
    return InterventionRates(base.diagnostic * m, base.care_entry * r, base.dropout / r, cov,
                             saturation=saturation, multipliers=mult)


def action_to_rates(state: SystemState, action, j, params: EpiParams,
                    mixing: MixingMatrix) -> InterventionRates:
    """Rates for jurisdiction ``j`` acting alone; every other block stays at baseline."""
    acts = np.zeros((state.n_jurisdictions, ACTION_DIM))
    acts[state.index(j)] = action_matrix(action).reshape(-1)
    return actions_to_rates(state, acts, params, mixing)


def compute_cost(outcome: StepOutcome, model: CostModel, j) -> float:
    """Yearly intervention cost for jurisdiction index ``j`` (or a list of indices)."""
    sl = j if isinstance(j, (list, tuple, np.ndarray)) else [j]
    c = (outcome.tests_performed[sl].sum() * model.cost_per_test
         + outcome.persons_in_care[sl].sum() * model.cost_retention_per_person_year
         + outcome.persons_on_prep[sl].sum() * model.cost_prep_per_person_year)
    return float(c * (1.0 + model.overhead_fraction))


def penalty(cost: float, budget: float, cfg: RewardConfig) -> float:
    over = cost - budget if cfg.signed_penalty else max(cost - budget, 0.0)
    return cfg.penalty_weight * over / cfg.penalty_scale


def reward(outcome: StepOutcome, cost: float, budget: float, j, cfg: RewardConfig) -> float:
    """Minus new infections in ``j`` minus the scaled budget penalty."""
    sl = j if isinstance(j, (list, tuple, np.ndarray)) else [j]
    return float(-outcome.new_infections[sl].sum() - penalty(cost, budget, cfg))


@dataclass
class EnvModel:
    """Everything about the decision process that stays fixed across steps."""

    params: EpiParams
    mixing: MixingMatrix
    bounds: ActionBounds
    cost: CostModel
    budget: BudgetSchedule
    reward_cfg: RewardConfig
    start_year: int
    horizon: int

    @classmethod
    def from_scenario(cls, scenario, mixing: MixingMatrix | None = None) -> "EnvModel":
        return cls(scenario.params(), mixing or scenario.normalized_mixing(),
                   scenario.action_bounds, scenario.cost, scenario.budget, scenario.reward,
                   scenario.start_year, scenario.horizon)


def agent_ids(state: SystemState, mode: str) -> list:
    mode = mode.lower()
    if mode == "sarl":
        return [SARL_AGENT]
    if mode == "marl":
        return list(state.jurisdictions)
    raise ContractError(f"mode must be 'sarl' or 'marl', got {mode!r}")


def observe_agents(state: SystemState, mode: str, params: EpiParams) -> dict:
    if mode.lower() == "sarl":
        return {SARL_AGENT: aggregate_sarl(state, state.jurisdictions, params)}
    return {jid: observe(state, i, params) for i, jid in enumerate(state.jurisdictions)}


def env_step(state: SystemState, joint_action: dict, mode: str, model: EnvModel):
    """Apply every agent's action, advance the shared simulation one year.

    Returns ``(next_state, observations, rewards, done, info)``; ``info`` carries
    the :class:`StepOutcome`, per-jurisdiction costs, budgets and rewards and
    the applied (J, 9) action array.
    """
    mode = mode.lower()
    agents = agent_ids(state, mode)
    if set(joint_action) != set(agents):
        raise ContractError(f"expected actions for agents {agents}, got {sorted(joint_action)}")
    for a in agents:
        check_bounds(joint_action[a], model.bounds)
    nj = state.n_jurisdictions
    if mode == "sarl":
        acts = np.tile(action_matrix(joint_action[SARL_AGENT]).reshape(-1), (nj, 1))
    else:
        acts = np.stack([action_matrix(joint_action[jid]).reshape(-1) for jid in agents])
    acts = np.clip(acts, 0.0, model.bounds.vector())

    t = state.year - model.start_year
    rates = actions_to_rates(state, acts, model.params, model.mixing)
    nxt, outcome = step_year(state, rates, model.mixing, model.params)

    costs = np.array([compute_cost(outcome, model.cost, i) for i in range(nj)])
    budgets = np.array([model.budget.budget(jid, t) for jid in state.jurisdictions])
    jur_rewards = np.array([reward(outcome, costs[i], budgets[i], i, model.reward_cfg)
                            for i in range(nj)])
    if mode == "sarl":
        rewards = {SARL_AGENT: reward(outcome, costs.sum(), budgets.sum(), list(range(nj)),
                                      model.reward_cfg)}
    else:
        rewards = {jid: float(jur_rewards[i]) for i, jid in enumerate(agents)}
    done = nxt.year >= model.start_year + model.horizon
    info = {"outcome": outcome, "costs": costs, "budgets": budgets,
            "jurisdiction_rewards": jur_rewards, "actions": acts, "year": state.year}
    return nxt, observe_agents(nxt, mode, model.params), rewards, done, info


class HIVEnv:
    """Stateful wrapper: ``reset()`` then ``step(joint_action)`` until done."""

    def __init__(self, scenario, mode: str = "marl", mixing: MixingMatrix | None = None,
                 model: EnvModel | None = None):
        self.scenario = scenario
        self.mode = mode.lower()
        self.model = model or EnvModel.from_scenario(scenario, mixing)
        from epictrl.epi import init_population
        self._initial = init_population(scenario)
        self.agents = agent_ids(self._initial, self.mode)
        self.state = None

    @property
    def jurisdictions(self) -> tuple:
        return self._initial.jurisdictions

    def reset(self) -> dict:
        self.state = self._initial.copy()
        return observe_agents(self.state, self.mode, self.model.params)

    def step(self, joint_action: dict):
        if self.state is None:
            raise ContractError("call reset() before step()")
        self.state, obs, rewards, done, info = env_step(self.state, joint_action, self.mode,
                                                        self.model)
        return obs, rewards, done, info
