"""Train agents in a world without cross-jurisdiction mixing, then deploy them with it.

The decoupled model's own projection ("predicted") understates the incidence the
same policies produce once partnerships cross jurisdiction lines ("realized").

    python3 demos/mixing_blind_spot.py --episodes 400
"""
import argparse

from epictrl.config import desk_scenario
from epictrl.trainer import TrainConfig, mixing_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    study = mixing_study(desk_scenario(), seeds=(args.seed,),
                         config=TrainConfig(episodes=args.episodes))
    pred, real = study.predicted[args.seed], study.realized[args.seed]
    print("year  predicted  realized")
    for t, year in enumerate(pred.years):
        print(f"{year}  {pred.mean_incidence()[t].sum():9.1f}  {real.mean_incidence()[t].sum():8.1f}")
    print(f"total  {pred.cumulative_incidence():8.0f}  {real.cumulative_incidence():8.0f}")


if __name__ == "__main__":
    main()
