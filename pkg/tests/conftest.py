import numpy as np
import pytest

from epictrl.config import JurisdictionConfig, ScenarioConfig
from epictrl.env import BudgetSchedule
from epictrl.epi import EpiParams

GROUPS = ("HM", "HF", "MSM")

# criterion -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def block(susceptible, infected=None, prep=0.0):
    inf = np.zeros((4, 5)) if infected is None else np.asarray(infected, dtype=float)
    return {"susceptible": float(susceptible), "prep_coverage": prep, "infected": inf.tolist()}


def jurisdiction(jid, state="S1", susceptible=10_000.0, infected=None, prep=0.0, maturation=0.0):
    return JurisdictionConfig(jid, state, {g: block(susceptible, infected, prep) for g in GROUPS},
                              {g: maturation for g in GROUPS})


def scenario(jurisdictions, epi=None, budget=1e9, **kw) -> ScenarioConfig:
    budgets = BudgetSchedule({j.id: budget for j in jurisdictions})
    return ScenarioConfig("test", jurisdictions, epi=epi or EpiParams(), budget=budgets, **kw)


def random_jurisdiction(rng, jid, state):
    init = {}
    for g in GROUPS:
        n = rng.uniform(2e3, 2e5)
        prev = rng.uniform(0.0, 0.2)
        inf = rng.dirichlet(np.ones(20)).reshape(4, 5) * n * prev
        init[g] = block(n * (1 - prev), inf, rng.uniform(0, 0.5))
    return JurisdictionConfig(jid, state, init, {g: rng.uniform(0, 500) for g in GROUPS})


def random_scenario(rng, n_jur=None) -> ScenarioConfig:
    nj = int(n_jur or rng.integers(1, 5))
    states = [f"S{rng.integers(0, 2)}" for _ in range(nj)]
    jurs = [random_jurisdiction(rng, f"J{i}", s) for i, s in enumerate(states)]
    epi = EpiParams(transmission_rate=rng.uniform(0.0, 0.3, (3, 3)),
                    prep_indicated_fraction=rng.uniform(0.01, 0.3, 3))
    return scenario(jurs, epi=epi, budget=float(rng.uniform(1e5, 1e7)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
