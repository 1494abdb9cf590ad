"""Project the desk scenario forward with no intervention and with random policies.

Shows the raw simulator and environment: yearly new infections, costs against
budget, and the reward each jurisdiction would receive.

    python3 demos/baseline_projection.py
"""
import numpy as np

from epictrl.config import desk_scenario
from epictrl.env import EnvModel, env_step
from epictrl.epi import init_population


def rollout(scenario, policy):
    model = EnvModel.from_scenario(scenario)
    state = init_population(scenario)
    rows = []
    for _ in range(scenario.horizon):
        joint = {j: policy(model) for j in state.jurisdictions}
        state, _, rewards, _, info = env_step(state, joint, "marl", model)
        rows.append((info["year"], info["outcome"].new_infections.sum(axis=1), info["costs"],
                     info["budgets"], rewards))
    return rows


def show(title, rows, ids):
    print(f"\n{title}")
    print("year  " + "  ".join(f"{j:>10} inf  {j:>6} cost/budget" for j in ids))
    for year, inc, cost, budget, _ in rows:
        cells = [f"{inc[i]:14.1f}  {cost[i] / budget[i]:18.2f}" for i in range(len(ids))]
        print(f"{year}  " + "  ".join(cells))
    total = sum(r[1].sum() for r in rows)
    print(f"cumulative new infections: {total:.0f}")


def main():
    sc = desk_scenario()
    ids = sc.jurisdiction_ids
    show("No intervention (all proportion changes 0)", rollout(sc, lambda m: np.zeros(9)), ids)
    rng = np.random.default_rng(0)
    show("Uniform random actions within bounds",
         rollout(sc, lambda m: rng.uniform(0, m.bounds.vector())), ids)
    show("Maximum actions", rollout(sc, lambda m: m.bounds.vector()), ids)


if __name__ == "__main__":
    main()
