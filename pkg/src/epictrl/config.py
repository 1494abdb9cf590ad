"""Scenario configuration: JSON schema, loading, hashing and templates.

Keys starting with ``_`` are comments; the loader ignores them and they do
not contribute to the config hash.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from epictrl.epi import (
    N_CARE, N_DISEASE, ConfigError, EpiParams, MixingMatrix, RiskGroup, renormalize_mixing,
)
from epictrl.env import ActionBounds, BudgetSchedule, CostModel, RewardConfig

SCHEMA_VERSION = 1

# Partnership tiers per risk group: same jurisdiction, other jurisdiction in the
# same state, other states. The HM row sums to 0.99 and is renormalized on use.
REFERENCE_MIXING = {"HM": [0.57, 0.28, 0.14], "HF": [0.65, 0.23, 0.12], "MSM": [0.47, 0.31, 0.22]}

CA_JURISDICTIONS = ["CA1", "CA2", "CA3", "CA4", "CA5", "CA6", "CA7", "CA8"]
FL_JURISDICTIONS = ["FL1", "FL2", "FL3", "FL4", "FL5", "FL6", "FL7", "FL8"]
CA_BUDGET_TOTAL = 54.3e6
FL_BUDGET_TOTAL = 48.4e6

_EPI_ARRAYS = ("prep_indicated_fraction", "diagnostic_rate", "dropout_rate", "care_entry_rate", "transmissibility",
               "progression_rate", "stage_mortality", "transmission_rate", "contact")


@dataclass
class JurisdictionConfig:
    id: str
    state: str
    initial: dict  # group -> {"susceptible", "infected" (4x5), "prep_coverage"}
    maturation_in: dict = field(default_factory=dict)  # group -> persons/year

    def to_dict(self) -> dict:
        init = {}
        for g in RiskGroup:
            b = self.initial[g.name]
            init[g.name] = {
                "susceptible": float(b["susceptible"]),
                "prep_coverage": float(b.get("prep_coverage", 0.0)),
                "infected": np.asarray(b.get("infected", np.zeros((N_CARE, N_DISEASE))),
                                       dtype=float).tolist(),
            }
        return {"id": self.id, "state": self.state, "initial": init,
                "maturation_in": {g.name: float(self.maturation_in.get(g.name, 0.0))
                                  for g in RiskGroup}}


@dataclass
class ScenarioConfig:
    name: str
    jurisdictions: list
    epi: EpiParams = field(default_factory=EpiParams)
    mixing: MixingMatrix = field(default_factory=lambda: MixingMatrix.from_dict(REFERENCE_MIXING))
    cost: CostModel = field(default_factory=CostModel)
    budget: BudgetSchedule = field(default_factory=BudgetSchedule)
    action_bounds: ActionBounds = field(default_factory=ActionBounds)
    reward: RewardConfig = field(default_factory=RewardConfig)
    start_year: int = 2019
    horizon: int = 12

    def __post_init__(self):
        ids = [j.id for j in self.jurisdictions]
        if not ids:
            raise ConfigError("jurisdictions: at least one is required")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"jurisdictions: duplicate ids in {ids}")
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be >= 1")
        for jid in ids:
            self.budget.budget(jid, 0)
        renormalize_mixing(self.mixing)

    @property
    def jurisdiction_ids(self) -> list:
        return [j.id for j in self.jurisdictions]

    def params(self) -> EpiParams:
        """EpiParams with this scenario's per-block maturation attached."""
        mat = np.array([[float(j.maturation_in.get(g.name, 0.0)) for g in RiskGroup]
                        for j in self.jurisdictions])
        return self.epi.with_(maturation_in=mat)

    def normalized_mixing(self) -> MixingMatrix:
        return renormalize_mixing(self.mixing)

    def scaled(self, action_multiplier: float = 1.0, budget_multiplier: float = 1.0
               ) -> "ScenarioConfig":
        if action_multiplier <= 0 or budget_multiplier <= 0:
            raise ConfigError("multipliers must be > 0")
        if action_multiplier == 1.0 and budget_multiplier == 1.0:
            return self
        return replace(self, action_bounds=self.action_bounds.scaled(action_multiplier),
                       budget=self.budget.scaled(budget_multiplier))

    def with_mixing(self, mixing: MixingMatrix) -> "ScenarioConfig":
        return replace(self, mixing=mixing)

    def to_dict(self) -> dict:
        epi = {}
        for f in fields(EpiParams):
            if f.name == "maturation_in":
                continue
            v = getattr(self.epi, f.name)
            epi[f.name] = np.asarray(v).tolist() if f.name in _EPI_ARRAYS else v
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "start_year": int(self.start_year),
            "horizon": int(self.horizon),
            "jurisdictions": [j.to_dict() for j in self.jurisdictions],
            "epi": epi,
            "mixing": self.mixing.to_dict(),
            "cost": {f.name: getattr(self.cost, f.name) for f in fields(CostModel)},
            "budget": {jid: b if np.ndim(b) == 0 else list(b)
                       for jid, b in self.budget.budgets.items()},
            "action_bounds": {f.name: getattr(self.action_bounds, f.name)
                              for f in fields(ActionBounds)},
            "reward": {f.name: getattr(self.reward, f.name) for f in fields(RewardConfig)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = strip_comments(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {version}")

        def section(name, kind):
            raw = d.get(name, {})
            allowed = {f.name for f in fields(kind)}
            unknown = set(raw) - allowed
            if unknown:
                raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
            try:
                return kind(**raw)
            except TypeError as e:
                raise ConfigError(f"{name}: {e}") from None

        if "maturation_in" in d.get("epi", {}):
            raise ConfigError("epi.maturation_in: set maturation per jurisdiction instead")
        try:
            jurs = [JurisdictionConfig(j["id"], j.get("state", j["id"]), j["initial"],
                                       j.get("maturation_in", {}))
                    for j in d["jurisdictions"]]
        except KeyError as e:
            raise ConfigError(f"jurisdictions: missing field {e.args[0]}") from None
        for j in jurs:
            for g in RiskGroup:
                if g.name not in j.initial:
                    raise ConfigError(f"jurisdictions.{j.id}.initial: missing group {g.name}")
        return cls(
            name=d.get("name", "scenario"),
            jurisdictions=jurs,
            epi=section("epi", EpiParams),
            mixing=MixingMatrix.from_dict(d.get("mixing", REFERENCE_MIXING)),
            cost=section("cost", CostModel),
            budget=BudgetSchedule(dict(d.get("budget", {}))),
            action_bounds=section("action_bounds", ActionBounds),
            reward=section("reward", RewardConfig),
            start_year=int(d.get("start_year", 2019)),
            horizon=int(d.get("horizon", 12)),
        )

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def strip_comments(obj):
    if isinstance(obj, dict):
        return {k: strip_comments(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, list):
        return [strip_comments(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    """SHA-256 of the canonical JSON encoding; insensitive to key order."""
    canon = json.dumps(strip_comments(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return ScenarioConfig.from_dict(d)


def save_scenario(scenario: ScenarioConfig | dict, path, comments: dict | None = None):
    d = scenario.to_dict() if isinstance(scenario, ScenarioConfig) else copy.deepcopy(scenario)
    if comments:
        d = {**comments, **d}
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


# -- templates -----------------------------------------------------------------

_PLACEHOLDER_NOTE = ("Placeholder epidemiological values: NOT calibrated to surveillance data. "
                     "Replace initial counts and rates before drawing substantive conclusions.")


def _block(susceptible, pwh, shares, prep_coverage):
    """Spread ``pwh`` over care stages by ``shares`` and a fixed CD4 profile."""
    cd4 = np.array([0.03, 0.32, 0.27, 0.22, 0.16])
    inf = np.outer(np.asarray(shares, dtype=float), cd4) * pwh
    return {"susceptible": float(susceptible), "prep_coverage": float(prep_coverage),
            "infected": inf.round(6).tolist()}


def _jurisdiction(jid, state, pop, prevalence, unaware=0.14, aware=0.20, prep=0.15,
                  scale_maturation=0.012):
    """A jurisdiction with population ``pop`` split HM 46% / HF 49% / MSM 5%."""
    split = {"HM": 0.46, "HF": 0.49, "MSM": 0.05}
    rel_prev = {"HM": 0.35, "HF": 0.25, "MSM": 8.0}  # group prevalence relative to overall
    init, mat = {}, {}
    for g, frac in split.items():
        n = pop * frac
        p = min(prevalence * rel_prev[g], 0.5)
        art = 1.0 - unaware - aware
        shares = [unaware, aware, 0.25 * art, 0.75 * art]
        init[g] = _block(n * (1 - p), n * p, shares, prep)
        mat[g] = round(n * scale_maturation, 3)
    return JurisdictionConfig(jid, state, init, mat)


def desk_scenario() -> ScenarioConfig:
    """Two jurisdictions in one state: a small high-prevalence county and a
    larger low-prevalence remainder. Runs fast enough for desk-scale training."""
    jurs = [
        _jurisdiction("HIGH", "S1", 300_000, 0.02, unaware=0.16, aware=0.22),
        _jurisdiction("LOW", "S1", 1_500_000, 0.002, unaware=0.26, aware=0.20),
    ]
    budget = BudgetSchedule({"HIGH": 15.0e6, "LOW": 16.0e6})
    return ScenarioConfig("desk", jurs, epi=_template_epi(), budget=budget)


def _template_epi() -> EpiParams:
    # PrEP indications concentrate among MSM
    return EpiParams(prep_indicated_fraction=[0.005, 0.005, 0.25])


def _skeleton(ids, state, pops, prevs) -> list:
    return [_jurisdiction(jid, state, pop, prev) for jid, pop, prev in zip(ids, pops, prevs)]


def california_scenario() -> ScenarioConfig:
    pops = [1.4e6, 8.4e6, 2.6e6, 2.0e6, 1.3e6, 1.8e6, 2.7e6, 14.5e6]
    prevs = [0.004, 0.0055, 0.0025, 0.0025, 0.003, 0.002, 0.004, 0.0018]
    jurs = _skeleton(CA_JURISDICTIONS, "CA", pops, prevs)
    budget = BudgetSchedule({j: CA_BUDGET_TOTAL / len(jurs) for j in CA_JURISDICTIONS})
    return ScenarioConfig("california", jurs, epi=_template_epi(), budget=budget)


def florida_scenario() -> ScenarioConfig:
    pops = [1.6e6, 0.8e6, 1.2e6, 2.2e6, 1.1e6, 1.2e6, 0.8e6, 8.0e6]
    prevs = [0.0095, 0.006, 0.0045, 0.011, 0.005, 0.005, 0.004, 0.0035]
    jurs = _skeleton(FL_JURISDICTIONS, "FL", pops, prevs)
    budget = BudgetSchedule({j: FL_BUDGET_TOTAL / len(jurs) for j in FL_JURISDICTIONS})
    return ScenarioConfig("florida", jurs, epi=_template_epi(), budget=budget)


def ca_fl_scenario() -> ScenarioConfig:
    ca, fl = california_scenario(), florida_scenario()
    return ScenarioConfig("california-florida", ca.jurisdictions + fl.jurisdictions,
                          epi=_template_epi(), budget=BudgetSchedule({**ca.budget.budgets, **fl.budget.budgets}))


TEMPLATES = {
    "desk": desk_scenario,
    "california": california_scenario,
    "florida": florida_scenario,
    "ca-fl": ca_fl_scenario,
}


def template_comments(name: str) -> dict:
    return {
        "_comment": f"epictrl scenario template '{name}'. Keys starting with '_' are ignored.",
        "_placeholder": _PLACEHOLDER_NOTE,
        "_units": {
            "rates": "per year", "maturation_in": "persons per year entering susceptibles",
            "budget": "currency per jurisdiction per year (scalar or per-year list)",
            "infected": "rows: Unaware, AwareNoART, ARTNoVLS, ARTVLS; "
                        "columns: Acute, CD4>500, CD4 351-500, CD4 201-350, CD4<200",
            "mixing": "[same jurisdiction, other jurisdiction same state, other states]; "
                      "rows are renormalized to sum to 1",
        },
    }


def write_template(path, name: str = "desk"):
    try:
        scenario = TEMPLATES[name]()
    except KeyError:
        raise ConfigError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None
    save_scenario(scenario, path, comments=template_comments(name))
    return scenario
