"""``epictrl`` command line: config init | train | evaluate | compare | mixing-study.

Exit codes: 0 success, 2 configuration or usage error, 3 aborted run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from epictrl import reporting as rp
from epictrl.config import TEMPLATES, ConfigError, ScenarioConfig, load_scenario, write_template
from epictrl.epi import IntegrationError
from epictrl.nn import TrainingError
from epictrl.trainer import (CheckpointMismatch, TrainConfig, compare_modes, evaluate,
                             load_checkpoint, mixing_study, train)

log = logging.getLogger("epictrl")

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED = 0, 2, 3


class UsageError(Exception):
    pass


class AbortedRun(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # Accepted before or after the subcommand; only the top level sets defaults.
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, **({"default": 0} if defaults else kw),
                   help="random seed (default 0)")
    p.add_argument("--out-dir", type=Path, **({"default": Path("epictrl-out")} if defaults else kw),
                   help="directory for all outputs (default ./epictrl-out)")
    p.add_argument("--quiet", action="store_true", **({"default": False} if defaults else kw),
                   help="only print warnings and errors")
    return p


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(defaults=False)
    parser = _Parser(prog="epictrl", parents=[_global_flags(defaults=True)],
                     description="Train and evaluate HIV intervention policies with PPO.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cfg = sub.add_parser("config", help="scenario configuration files")
    cfg_sub = cfg.add_subparsers(dest="config_command", required=True, parser_class=_Parser)
    init = cfg_sub.add_parser("init", parents=[common], help="write a commented template")
    init.add_argument("path", type=Path)
    init.add_argument("--template", choices=sorted(TEMPLATES) + ["all"], default="desk",
                      help="desk (2 jurisdictions), california, florida, ca-fl, or all "
                           "(path is then a directory)")
    init.add_argument("--force", action="store_true", help="overwrite existing files")

    def training_flags(p, default_episodes=2000):
        p.add_argument("--episodes", type=_positive(int), default=default_episodes)
        p.add_argument("--buffer-episodes", type=_positive(int), default=10)
        p.add_argument("--plot", action="store_true", help="also render PNG charts")

    tr = sub.add_parser("train", parents=[common], help="train SARL or MARL agents")
    tr.add_argument("config", type=Path)
    tr.add_argument("--mode", choices=["sarl", "marl"], default="marl")
    training_flags(tr)
    tr.add_argument("--checkpoint-every", type=int, default=0, metavar="EPISODES")
    tr.add_argument("--eval-every", type=int, default=0, metavar="EPISODES")

    ev = sub.add_parser("evaluate", parents=[common], help="roll out saved policies")
    ev.add_argument("checkpoint", type=Path, help="checkpoint directory with manifest.json")
    ev.add_argument("config", type=Path)
    ev.add_argument("--episodes", type=_positive(int), default=1)
    ev.add_argument("--stochastic", action="store_true",
                    help="sample actions at the checkpoint's exploration std")

    cmp = sub.add_parser("compare", parents=[common], help="SARL vs MARL under scaled scenarios")
    cmp.add_argument("config", type=Path)
    cmp.add_argument("--action-multiplier", type=_positive(float), default=1.0)
    cmp.add_argument("--budget-multiplier", type=_positive(float), default=1.0)
    cmp.add_argument("--seeds", type=int, nargs="+", help="defaults to --seed")
    training_flags(cmp)

    mix = sub.add_parser("mixing-study", parents=[common],
                         help="train without mixing, evaluate with mixing")
    mix.add_argument("config", type=Path)
    mix.add_argument("--seeds", type=int, nargs="+", help="defaults to --seed")
    training_flags(mix)
    return parser


# -- commands -----------------------------------------------------------------------

def _out(args) -> Path:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


def cmd_config_init(args) -> int:
    names = sorted(TEMPLATES) if args.template == "all" else [args.template]
    if args.template == "all":
        args.path.mkdir(parents=True, exist_ok=True)
        targets = [args.path / f"{n}.json" for n in names]
    else:
        args.path.parent.mkdir(parents=True, exist_ok=True)
        targets = [args.path]
    for name, target in zip(names, targets):
        if target.exists() and not args.force:
            raise UsageError(f"{target} exists; pass --force to overwrite")
        write_template(target, name)
        log.info("wrote %s template to %s", name, target)
    return EXIT_OK


def _train_config(args, mode: str, seed: int) -> TrainConfig:
    return TrainConfig(mode=mode, episodes=args.episodes, buffer_episodes=args.buffer_episodes,
                       seed=seed, checkpoint_every=getattr(args, "checkpoint_every", 0),
                       eval_every=getattr(args, "eval_every", 0))


def _write_evaluation(out: Path, report, stem: str = "") -> dict:
    return {
        f"{stem}evaluation": rp.write_csv(out / f"{stem}evaluation.csv", "evaluation",
                                          report.rows()),
        f"{stem}summary": rp.write_csv(out / f"{stem}summary.csv", "summary",
                                       rp.summary_rows(report)),
        f"{stem}trajectory": rp.write_csv(out / f"{stem}trajectory.csv", "trajectory",
                                          report.trajectory_rows()),
    }


def cmd_train(args) -> int:
    started = rp.now()
    scenario = load_scenario(args.config)
    cfg = _train_config(args, args.mode, args.seed)
    out = _out(args)

    def progress(ep, res):
        if ep % 100 == 0:
            last = res.curve[-100:]
            means = {a: sum(r.rewards[a] for r in last) / len(last) for a in last[-1].rewards}
            log.info("episode %d  mean reward (last 100): %s", ep,
                     ", ".join(f"{a}={v:.1f}" for a, v in means.items()))

    result = train(cfg, scenario, out_dir=out, progress=progress)
    outputs = {"rewards": rp.write_csv(out / "rewards.csv", "rewards", result.reward_rows()),
               "diagnostics": rp.write_csv(out / "diagnostics.csv", "diagnostics",
                                           rp.diagnostic_rows(result.diagnostics)),
               "checkpoint": result.checkpoints[-1]}
    outputs.update(_write_evaluation(out, evaluate(result.agents, scenario)))
    if args.plot:
        outputs["reward_plot"] = rp.plot_rewards(result.reward_rows(), out / "rewards.png")
    rp.write_manifest(out / "run_manifest.json", "train", scenario.config_hash(), args.seed,
                      outputs, started, {"train_config": cfg.to_dict(),
                                         "aborted_episodes": len(result.aborted)})
    if result.aborted:
        raise AbortedRun(f"{len(result.aborted)} episode(s) aborted; first: "
                         f"{result.aborted[0].error}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = rp.now()
    scenario = load_scenario(args.config)
    if not (args.checkpoint / "manifest.json").is_file():
        raise ConfigError(f"{args.checkpoint}: no manifest.json (not a checkpoint directory)")
    aset = load_checkpoint(args.checkpoint, scenario)
    report = evaluate(aset, scenario, episodes=args.episodes, deterministic=not args.stochastic,
                      seed=args.seed)
    out = _out(args)
    outputs = _write_evaluation(out, report)
    rp.write_manifest(out / "run_manifest.json", "evaluate", scenario.config_hash(), args.seed,
                      outputs, started, {"checkpoint": str(args.checkpoint),
                                         "episodes": args.episodes,
                                         "deterministic": not args.stochastic})
    log.info("cumulative incidence %.1f, change first->last year %.2f%%",
             report.cumulative_incidence(), report.percent_change())
    return EXIT_OK


def _scenario_entry(sc: ScenarioConfig) -> dict:
    return {"config_hash": sc.config_hash(),
            "action_bounds": sc.to_dict()["action_bounds"],
            "budget": sc.to_dict()["budget"]}


def cmd_compare(args) -> int:
    started = rp.now()
    scenario = load_scenario(args.config)
    seeds = args.seeds if args.seeds else [args.seed]
    cfg = _train_config(args, "marl", seeds[0])
    report = compare_modes(scenario, args.budget_multiplier, args.action_multiplier, seeds, cfg)
    out = _out(args)
    inc, diff, summ = rp.compare_rows(report)
    outputs = {"compare_incidence": rp.write_csv(out / "compare_incidence.csv",
                                                 "compare_incidence", inc),
               "compare_difference": rp.write_csv(out / "compare_difference.csv",
                                                  "compare_difference", diff),
               "compare_summary": rp.write_csv(out / "compare_summary.csv", "compare_summary",
                                               summ)}
    if args.plot:
        series = {}
        for (label, mode, seed), run in sorted(report.runs.items()):
            if seed == seeds[0]:
                series[f"{label} {mode}"] = (run.report.years,
                                             run.report.mean_incidence().sum(axis=1))
        outputs["incidence_plot"] = rp.plot_incidence(series, out / "compare_incidence.png")
    scaled = scenario.scaled(args.action_multiplier, args.budget_multiplier)
    rp.write_manifest(out / "run_manifest.json", "compare", scenario.config_hash(), seeds,
                      outputs, started, {
                          "action_multiplier": args.action_multiplier,
                          "budget_multiplier": args.budget_multiplier,
                          "scenarios": {"base": _scenario_entry(scenario),
                                        "scaled": _scenario_entry(scaled)},
                          "train_config": cfg.to_dict(),
                          "aborted_episodes": sum(r.aborted for r in report.runs.values())})
    if any(r.aborted for r in report.runs.values()):
        raise AbortedRun("episodes were aborted during comparison training")
    return EXIT_OK


def cmd_mixing_study(args) -> int:
    started = rp.now()
    scenario = load_scenario(args.config)
    if len(scenario.jurisdictions) < 2:
        raise ConfigError("mixing study needs at least two jurisdictions")
    seeds = args.seeds if args.seeds else [args.seed]
    cfg = _train_config(args, "marl", seeds[0])
    study = mixing_study(scenario, seeds, cfg)
    out = _out(args)
    inc, diff = rp.mixing_rows(study)
    outputs = {"mixing_incidence": rp.write_csv(out / "mixing_incidence.csv",
                                                "mixing_incidence", inc),
               "mixing_difference": rp.write_csv(out / "mixing_difference.csv",
                                                 "mixing_difference", diff)}
    if args.plot:
        s = seeds[0]
        series = {"without mixing": (study.predicted[s].years,
                                     study.predicted[s].mean_incidence().sum(axis=1)),
                  "with mixing": (study.realized[s].years,
                                  study.realized[s].mean_incidence().sum(axis=1))}
        outputs["incidence_plot"] = rp.plot_incidence(series, out / "mixing_incidence.png")
    rp.write_manifest(out / "run_manifest.json", "mixing-study", scenario.config_hash(), seeds,
                      outputs, started, {"train_config": cfg.to_dict(),
                                         "aborted_episodes": study.aborted})
    if study.aborted:
        raise AbortedRun("episodes were aborted during mixing-study training")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "mixing-study": cmd_mixing_study}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"epictrl: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    try:
        if args.command == "config":
            return cmd_config_init(args)
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointMismatch, UsageError) as e:
        print(f"epictrl: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AbortedRun, TrainingError, IntegrationError) as e:
        print(f"epictrl: aborted: {e}", file=sys.stderr)
        return EXIT_ABORTED
    except OSError as e:
        print(f"epictrl: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
