"""Train one aggregated agent and one agent per jurisdiction, then compare.

A shortened version of the directional experiment in the acceptance suite. With
the default 600 episodes it takes a few minutes on one core; pass --episodes 2000
for the full-length run.

    python3 demos/train_marl_vs_sarl.py --episodes 600 --seed 0
"""
import argparse

from epictrl.config import desk_scenario
from epictrl.trainer import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sc = desk_scenario()
    results = {}
    for mode in ("sarl", "marl"):
        res = train(TrainConfig(mode=mode, episodes=args.episodes, seed=args.seed), sc)
        rep = evaluate(res.agents, sc)
        results[mode] = rep
        print(f"{mode}: {len(res.update_steps)} updates, cumulative incidence "
              f"{rep.cumulative_incidence():.0f}, change first->last year "
              f"{rep.percent_change():+.1f}%")
        for j, jid in enumerate(rep.jurisdictions):
            acts = rep.actions[0, :, j].mean(axis=0).reshape(3, 3)
            print(f"  {jid}: mean action per group (unaware, art, prep) "
                  + "; ".join(", ".join(f"{x:.4f}" for x in g) for g in acts))
    gap = results["marl"].cumulative_incidence() - results["sarl"].cumulative_incidence()
    print(f"MARL minus SARL cumulative incidence: {gap:+.0f}")


if __name__ == "__main__":
    main()
