"""Multi-jurisdiction compartmental HIV transmission model.

Each (jurisdiction, risk group) block holds a susceptible pool, a PrEP count,
a 4x5 infected array indexed by (care stage, CD4 disease stage) and a
cumulative-dead tally. One call to :func:`step_year` advances every block by one
calendar year with forward-Euler sub-steps.

The force of infection is evaluated from the start-of-year state and held fixed
over the year's sub-steps, so blocks couple only through it. That is what lets
:mod:`epictrl.env` invert actions block by block.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from epictrl import _kernels


class RiskGroup(IntEnum):
    HM = 0
    HF = 1
    MSM = 2


class CareStage(IntEnum):
    Unaware = 0
    AwareNoART = 1
    ARTNoVLS = 2
    ARTVLS = 3


class DiseaseStage(IntEnum):
    Acute = 0
    CD4gt500 = 1
    CD4_351to500 = 2
    CD4_201to350 = 3
    CD4lt200 = 4


N_GROUPS = len(RiskGroup)
N_CARE = len(CareStage)
N_DISEASE = len(DiseaseStage)
TIERS = ("same_jurisdiction", "same_state_other", "other_state")


class ConfigError(ValueError):
    """Invalid scenario or parameter values."""


class IntegrationError(RuntimeError):
    """A compartment went negative during a sub-step."""


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Per risk group, the share of partnerships in each jurisdiction tier.

    ``rows[k]`` is ``(same_jurisdiction, same_state_other, other_state)``.
    """

    rows: np.ndarray  # (3 groups, 3 tiers)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.shape != (N_GROUPS, 3):
            raise ConfigError(f"mixing rows must have shape (3, 3), got {rows.shape}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_cache", {})

    @classmethod
    def from_dict(cls, d: dict) -> "MixingMatrix":
        try:
            return cls(np.array([d[g.name] for g in RiskGroup], dtype=float))
        except KeyError as e:
            raise ConfigError(f"mixing: missing risk group {e.args[0]}") from None

    def to_dict(self) -> dict:
        return {g.name: [float(v) for v in self.rows[g]] for g in RiskGroup}

    @classmethod
    def identity(cls) -> "MixingMatrix":
        """All partnerships inside the own jurisdiction."""
        rows = np.zeros((N_GROUPS, 3))
        rows[:, 0] = 1.0
        return cls(rows)

    def jurisdiction_weights(self, states) -> np.ndarray:
        """Expand the tier rows to per-group ``(J, J)`` partner weights.

        Tier mass is spread equally over the jurisdictions in that tier. A tier
        with no modeled jurisdiction is dropped and the remaining tiers of that
        row are rescaled to sum to one.
        """
        key = tuple(states)
        if key in self._cache:
            return self._cache[key]
        states = list(states)
        nj = len(states)
        same_state = np.array([[states[a] == states[b] for b in range(nj)] for a in range(nj)])
        eye = np.eye(nj, dtype=bool)
        masks = (eye, same_state & ~eye, ~same_state)
        counts = np.stack([m.sum(axis=1) for m in masks], axis=1)  # (J, tiers)
        w = np.zeros((N_GROUPS, nj, nj))
        for k in range(N_GROUPS):
            for a in range(nj):
                avail = counts[a] > 0
                mass = np.where(avail, self.rows[k], 0.0)
                total = mass.sum()
                if total <= 0.0:
                    raise ConfigError(
                        f"mixing row {RiskGroup(k).name} has no weight on any available tier")
                mass = mass / total
                for t, m in enumerate(masks):
                    if avail[t]:
                        w[k, a, m[a]] = mass[t] / counts[a, t]
        self._cache[key] = w
        return w


def renormalize_mixing(raw: MixingMatrix) -> MixingMatrix:
    """Divide each risk group's tier weights by their sum."""
    rows = np.asarray(raw.rows, dtype=float)
    if np.any(rows < 0):
        raise ConfigError("mixing weights must be non-negative")
    sums = rows.sum(axis=1)
    for k, s in enumerate(sums):
        if s <= 0.0:
            raise ConfigError(f"mixing row {RiskGroup(k).name} is all zero")
    return MixingMatrix(rows / sums[:, None])


def _vec(values, n, name):
    a = np.asarray(values, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,):
        raise ConfigError(f"{name} must have {n} entries, got shape {a.shape}")
    return a


@dataclass
class EpiParams:
    """Rates are per year; proportions are in [0, 1].

    Defaults are placeholders chosen for stable, plausible-looking dynamics;
    they are not calibrated to surveillance data.
    """

    diagnostic_rate: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2, 0.2, 0.25, 0.5]))
    dropout_rate: np.ndarray = field(default_factory=lambda: np.full(N_DISEASE, 0.12))
    care_entry_rate: np.ndarray = field(default_factory=lambda: np.full(N_DISEASE, 0.45))
    linkage_fraction: float = 0.7
    transmissibility: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.7, 0.5, 0.0]))
    progression_rate: np.ndarray = field(default_factory=lambda: np.array([4.0, 0.25, 0.25, 0.3, 0.0]))
    stage_mortality: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.004, 0.008, 0.02, 0.12]))
    background_mortality: float = 0.012
    # beta[k, k']: base transmission rate for a susceptible of group k per
    # unit infectious prevalence among partners of group k'
    transmission_rate: np.ndarray = field(default_factory=lambda: np.array([
        [0.0, 0.08, 0.0],
        [0.09, 0.0, 0.09],
        [0.0, 0.08, 0.11],
    ]))
    # contact[k, k']: share of group k's partnerships formed with group k'
    contact: np.ndarray = field(default_factory=lambda: np.array([
        [0.0, 1.0, 0.0],
        [0.95, 0.0, 0.05],
        [0.0, 0.1, 0.9],
    ]))
    prep_efficacy: float = 0.99
    prep_indicated_fraction: np.ndarray | float = 0.1  # scalar or per risk group
    prep_infection_share: float = 0.5
    test_targeting: float = 20.0
    maturation_in: np.ndarray | float = 0.0  # persons/year, scalar or (J, 3)
    substeps: int = 12
    rate_cap: float = 5.0

    def __post_init__(self):
        self.diagnostic_rate = _vec(self.diagnostic_rate, N_DISEASE, "diagnostic_rate")
        self.dropout_rate = _vec(self.dropout_rate, N_DISEASE, "dropout_rate")
        self.care_entry_rate = _vec(self.care_entry_rate, N_DISEASE, "care_entry_rate")
        self.transmissibility = _vec(self.transmissibility, N_CARE, "transmissibility")
        self.progression_rate = _vec(self.progression_rate, N_DISEASE, "progression_rate")
        self.stage_mortality = _vec(self.stage_mortality, N_DISEASE, "stage_mortality")
        self.transmission_rate = np.asarray(self.transmission_rate, dtype=float)
        self.contact = np.asarray(self.contact, dtype=float)
        self.maturation_in = np.asarray(self.maturation_in, dtype=float)
        self.prep_indicated_fraction = _vec(self.prep_indicated_fraction, N_GROUPS,
                                            "prep_indicated_fraction")
        self.validate()

    def validate(self):
        for name in ("diagnostic_rate", "dropout_rate", "care_entry_rate", "transmissibility",
                     "progression_rate", "stage_mortality", "transmission_rate", "contact",
                     "maturation_in"):
            a = getattr(self, name)
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ConfigError(f"{name} must be finite and non-negative")
        for name in ("linkage_fraction", "prep_efficacy", "prep_indicated_fraction",
                     "prep_infection_share"):
            v = getattr(self, name)
            if not np.all((0.0 <= v) & (v <= 1.0)):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.transmission_rate.shape != (N_GROUPS, N_GROUPS):
            raise ConfigError("transmission_rate must be 3x3")
        if self.contact.shape != (N_GROUPS, N_GROUPS):
            raise ConfigError("contact must be 3x3")
        if self.transmissibility[CareStage.ARTVLS] != 0.0:
            raise ConfigError("ARTVLS transmissibility must be 0")
        if self.background_mortality < 0 or self.test_targeting < 1.0:
            raise ConfigError("background_mortality must be >= 0 and test_targeting >= 1")
        if int(self.substeps) < 1:
            raise ConfigError("substeps must be >= 1")
        self.substeps = int(self.substeps)
        if self.rate_cap < max(self.diagnostic_rate.max(), self.care_entry_rate.max()):
            raise ConfigError("rate_cap is below a baseline diagnostic or care-entry rate")
        # worst-case outflow fraction of any infected compartment in one sub-step
        worst = (self.rate_cap + self.dropout_rate.max() + self.progression_rate.max()
                 + self.background_mortality + self.stage_mortality.max())
        if worst / self.substeps >= 1.0:
            raise ConfigError(
                f"substeps={self.substeps} too coarse for rate_cap={self.rate_cap}: "
                f"worst-case outflow fraction per sub-step {worst / self.substeps:.3f} >= 1")

    def with_(self, **changes) -> "EpiParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class CompartmentBlock:
    susceptible: float
    on_prep: float
    infected: np.ndarray  # (4, 5)
    cumulative_dead: float

    @property
    def pwh(self) -> float:
        return float(self.infected.sum())


@dataclass
class SystemState:
    """Occupancies for every (jurisdiction, risk group) block.

    Arrays are indexed ``[jurisdiction, group, ...]`` in the order of
    ``jurisdictions``; ``states`` gives each jurisdiction's state for mixing.
    """

    jurisdictions: tuple
    states: tuple
    year: int
    susceptible: np.ndarray  # (J, 3)
    on_prep: np.ndarray  # (J, 3)
    infected: np.ndarray  # (J, 3, 4, 5)
    dead: np.ndarray  # (J, 3)

    @property
    def n_jurisdictions(self) -> int:
        return len(self.jurisdictions)

    def index(self, j) -> int:
        if isinstance(j, (int, np.integer)):
            if not 0 <= j < self.n_jurisdictions:
                raise KeyError(f"jurisdiction index {j} out of range")
            return int(j)
        try:
            return self.jurisdictions.index(j)
        except ValueError:
            raise KeyError(f"unknown jurisdiction {j!r}") from None

    def block(self, j, k) -> CompartmentBlock:
        i = self.index(j)
        k = RiskGroup(k)
        return CompartmentBlock(float(self.susceptible[i, k]), float(self.on_prep[i, k]),
                                self.infected[i, k].copy(), float(self.dead[i, k]))

    @property
    def blocks(self) -> dict:
        return {(jid, g): self.block(i, g)
                for i, jid in enumerate(self.jurisdictions) for g in RiskGroup}

    def pwh(self) -> np.ndarray:
        """People with HIV per block, shape (J, 3)."""
        return self.infected.sum(axis=(2, 3))

    def alive(self) -> np.ndarray:
        return self.susceptible + self.pwh()

    def total_persons(self) -> np.ndarray:
        """susceptible + infected + dead per block; moves only by maturation."""
        return self.susceptible + self.pwh() + self.dead

    def prep_coverage(self, params: EpiParams) -> np.ndarray:
        """PrEP coverage among the indicated pool, per block."""
        pool = params.prep_indicated_fraction * self.susceptible
        return np.divide(self.on_prep, pool, out=np.zeros_like(pool), where=pool > 0)

    def subset(self, idx) -> "SystemState":
        idx = list(idx)
        return SystemState(tuple(self.jurisdictions[i] for i in idx),
                           tuple(self.states[i] for i in idx), self.year,
                           self.susceptible[idx].copy(), self.on_prep[idx].copy(),
                           self.infected[idx].copy(), self.dead[idx].copy())

    def copy(self) -> "SystemState":
        return SystemState(self.jurisdictions, self.states, self.year, self.susceptible.copy(),
                           self.on_prep.copy(), self.infected.copy(), self.dead.copy())


@dataclass
class StepOutcome:
    """Flows and activity tallies over one simulated year, per block (J, 3)."""

    new_infections: np.ndarray
    tests_performed: np.ndarray
    persons_in_care: np.ndarray
    persons_on_prep: np.ndarray
    saturation: np.ndarray | None = None  # (J, 3, 3) bool: unaware, ART, PrEP
    multipliers: np.ndarray | None = None  # (J, 3, 2): diagnostic, retention

    def activity(self, j: int) -> dict:
        """Person-year tallies for one jurisdiction, summed over risk groups."""
        return {
            "tests_performed": float(self.tests_performed[j].sum()),
            "persons_in_care": float(self.persons_in_care[j].sum()),
            "persons_on_prep": float(self.persons_on_prep[j].sum()),
        }


@dataclass
class InterventionRates:
    """Rates actually applied for one year, per (jurisdiction, group, stage)."""

    diagnostic: np.ndarray  # (J, 3, 5)
    care_entry: np.ndarray  # (J, 3, 5)
    dropout: np.ndarray  # (J, 3, 5)
    prep_coverage: np.ndarray  # (J, 3)
    saturation: np.ndarray = None  # (J, 3, 3) bool
    multipliers: np.ndarray = None  # (J, 3, 2)

    def __post_init__(self):
        nj = self.prep_coverage.shape[0]
        if self.saturation is None:
            self.saturation = np.zeros((nj, N_GROUPS, 3), dtype=bool)
        if self.multipliers is None:
            self.multipliers = np.ones((nj, N_GROUPS, 2))
        for name in ("diagnostic", "care_entry", "dropout", "prep_coverage"):
            if np.any(getattr(self, name) < 0):
                raise ConfigError(f"{name} rates must be non-negative")
        if np.any(self.prep_coverage > 1.0):
            raise ConfigError("prep coverage target must be <= 1")


def baseline_rates(state: SystemState, params: EpiParams) -> InterventionRates:
    """Rates with every control at its baseline and PrEP coverage held constant."""
    shape = (state.n_jurisdictions, N_GROUPS, N_DISEASE)
    return InterventionRates(
        np.broadcast_to(params.diagnostic_rate, shape).copy(),
        np.broadcast_to(params.care_entry_rate, shape).copy(),
        np.broadcast_to(params.dropout_rate, shape).copy(),
        np.minimum(state.prep_coverage(params), 1.0),
    )


def init_population(config) -> SystemState:
    """Build the start-year state from a scenario config.

    ``config`` is a :class:`epictrl.config.ScenarioConfig` or anything with
    ``jurisdictions`` entries carrying ``id``, ``state`` and ``initial`` (per
    group: ``susceptible``, ``infected`` 4x5, optional ``prep_coverage``), plus
    ``start_year`` and ``epi``.
    """
    jurs = list(config.jurisdictions)
    if not jurs:
        raise ConfigError("scenario lists no jurisdictions")
    nj = len(jurs)
    S = np.zeros((nj, N_GROUPS))
    P = np.zeros((nj, N_GROUPS))
    X = np.zeros((nj, N_GROUPS, N_CARE, N_DISEASE))
    indicated = config.epi.prep_indicated_fraction
    for i, jur in enumerate(jurs):
        for g in RiskGroup:
            try:
                init = jur.initial[g.name]
            except KeyError:
                raise ConfigError(f"{jur.id}/{g.name}: missing initial counts") from None
            s = float(init["susceptible"])
            if not s >= 0:
                raise ConfigError(f"{jur.id}/{g.name}/susceptible: negative count {s}")
            inf = np.asarray(init.get("infected", np.zeros((N_CARE, N_DISEASE))), dtype=float)
            if inf.shape != (N_CARE, N_DISEASE):
                raise ConfigError(f"{jur.id}/{g.name}/infected: expected 4x5, got {inf.shape}")
            bad = np.argwhere(~(inf >= 0))
            if bad.size:
                c, d = bad[0]
                raise ConfigError(
                    f"{jur.id}/{g.name}/{CareStage(c).name}-{DiseaseStage(d).name}: "
                    f"negative count {inf[c, d]}")
            cov = float(init.get("prep_coverage", 0.0))
            if not 0.0 <= cov <= 1.0:
                raise ConfigError(f"{jur.id}/{g.name}/prep_coverage must lie in [0, 1]")
            S[i, g] = s
            X[i, g] = inf
            P[i, g] = cov * indicated[g] * s
    return SystemState(tuple(j.id for j in jurs), tuple(j.state for j in jurs),
                       int(config.start_year), S, P, X, np.zeros((nj, N_GROUPS)))


def infectious_prevalence(state: SystemState, params: EpiParams) -> np.ndarray:
    """Transmissibility-weighted infected share of each block's living population."""
    weighted = (state.infected.sum(axis=-1) * params.transmissibility).sum(axis=-1)
    alive = state.alive()
    return np.divide(weighted, alive, out=np.zeros_like(alive), where=alive > 0)


def force_of_infection_all(state: SystemState, mixing: MixingMatrix,
                           params: EpiParams) -> np.ndarray:
    """Per-susceptible infection hazard for every block, shape (J, 3)."""
    prev = infectious_prevalence(state, params)  # (J', k')
    pair = params.transmission_rate * params.contact  # (k, k')
    # explicit broadcast sums keep the reduction order independent of J
    pressure = (prev[:, None, :] * pair[None, :, :]).sum(axis=-1)  # (J', k)
    w = mixing.jurisdiction_weights(state.states)  # (k, J, J')
    lam = (w * pressure.T[:, None, :]).sum(axis=-1)  # (k, J)
    return np.ascontiguousarray(lam.T)


def force_of_infection(state: SystemState, mixing: MixingMatrix, params: EpiParams,
                       j, k) -> float:
    """Force of infection on susceptibles of group ``k`` in jurisdiction ``j``."""
    return float(force_of_infection_all(state, mixing, params)[state.index(j), RiskGroup(k)])


def prep_factor(coverage: np.ndarray, params: EpiParams) -> np.ndarray:
    """Multiplier on new infections from PrEP coverage among the indicated."""
    return 1.0 - coverage * params.prep_efficacy * params.prep_infection_share


def _maturation(params: EpiParams, shape) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(params.maturation_in, shape), dtype=float)


def step_year(state: SystemState, rates: InterventionRates, mixing: MixingMatrix,
              params: EpiParams) -> tuple[SystemState, StepOutcome]:
    """Advance every block by one year under ``rates``.

    Raises :class:`IntegrationError` if any compartment goes negative.
    """
    lam = force_of_infection_all(state, mixing, params)
    cov = np.asarray(rates.prep_coverage, dtype=float)
    pool = cov * params.prep_indicated_fraction
    S1, X1, D1, tallies, ok = _kernels.advance_all(
        state.susceptible, state.infected, state.dead, lam, prep_factor(cov, params), pool,
        _maturation(params, state.susceptible.shape), params.background_mortality,
        params.stage_mortality, params.progression_rate,
        np.ascontiguousarray(rates.diagnostic, dtype=float),
        np.ascontiguousarray(rates.care_entry, dtype=float),
        np.ascontiguousarray(rates.dropout, dtype=float),
        params.linkage_fraction, params.test_targeting, params.substeps)
    if not ok.all():
        j, k = np.argwhere(~ok)[0]
        raise IntegrationError(
            f"negative compartment in {state.jurisdictions[j]}/{RiskGroup(k).name} "
            f"during {state.year}; reduce rates or raise substeps")
    nxt = SystemState(state.jurisdictions, state.states, state.year + 1, S1,
                      cov * params.prep_indicated_fraction * S1, X1, D1)
    outcome = StepOutcome(tallies[..., 0], tallies[..., 1], tallies[..., 2], tallies[..., 3],
                          saturation=rates.saturation.copy(), multipliers=rates.multipliers.copy())
    return nxt, outcome
