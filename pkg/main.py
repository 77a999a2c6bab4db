"""
symcc: command-line entry point.

    python main.py simulate --policy sp1 --pairs 2 --seed 1 --out runs/sim
    python main.py collect  --config configs/pipeline.json --out runs/data
    python main.py regress  --config configs/pipeline.json --dataset runs/data/dataset.csv
    python main.py evaluate --phase one --policy runs/regress/hall_of_fame.json
    python main.py analyze  --policy sp1 --figure contour
"""

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from analysis import FIGURES, AnalysisConfig, run_analysis
from cc_env import CollectionConfig, ExperienceDataset, Scenario, collect_many, simulate
from config import (
    APP_ICON,
    APP_TITLE,
    UNIT_SCALE,
    ConfigError,
    ConfigInvalid,
    SymccError,
    __version__,
    build_section,
    configure_logging,
    load_config,
    section_dict,
)
from dsr_engine import DegenerateDataset, RegressionConfig, RegressionDataset, best_expression, fitness, run_regression, write_hall_of_fame
from eval_harness import EvaluationConfig, run_phase, write_phase_outputs
from expr_core import ExpressionError
from policies import SymbolicPolicy, resolve_policy
from utils import convert_df_to_csv, write_json, write_manifest

logger = logging.getLogger(__name__)

SECTIONS = {
    "scenario": Scenario,
    "collection": CollectionConfig,
    "regression": RegressionConfig,
    "evaluation": EvaluationConfig,
    "analysis": AnalysisConfig,
}


class MissingInput(SymccError):
    """A stage input (dataset, hall of fame) does not exist."""


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    collection: CollectionConfig
    regression: RegressionConfig
    evaluation: EvaluationConfig
    analysis: AnalysisConfig
    path: str | None = None

    def resolved(self, *names):
        return {name: section_dict(getattr(self, name)) for name in names}


# --- Config resolution ---

def _override(obj, flag, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return obj
    try:
        return replace(obj, **changes)
    except ConfigInvalid as e:
        raise ConfigInvalid(flag, str(e).split(": ", 1)[-1]) from e


def resolve_config(args):
    """Config file sections, then CLI flag overrides."""
    data = load_config(args.config) if args.config else {}
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    sections = {name: build_section(cls, data.get(name), name) for name, cls in SECTIONS.items()}

    sections["scenario"] = _override(sections["scenario"], "--duration",
                                     duration_s=getattr(args, "duration", None))
    sections["scenario"] = _override(sections["scenario"], "--capacity",
                                     bottleneck_capacity_mbps=getattr(args, "capacity", None))
    sections["collection"] = _override(sections["collection"], "--epsilon", epsilon=args.epsilon)
    sections["regression"] = _override(sections["regression"], "--units", units=args.units)
    sections["regression"] = _override(sections["regression"], "--seed", seed=args.seed)
    sections["regression"] = _override(sections["regression"], "--jobs", n_jobs=args.jobs)
    sections["regression"] = _override(sections["regression"], "--iterations",
                                       max_iterations=getattr(args, "iterations", None))
    sections["regression"] = _override(sections["regression"], "--controller",
                                       controller=getattr(args, "controller", None))
    sections["evaluation"] = _override(sections["evaluation"], "--policy", policy=args.policy)
    sections["evaluation"] = _override(sections["evaluation"], "--jobs", jobs=args.jobs)
    sections["evaluation"] = _override(sections["evaluation"], "--phase", phase=getattr(args, "phase", None))
    sections["analysis"] = _override(sections["analysis"], "--policy", policy=args.policy)
    sections["analysis"] = _override(sections["analysis"], "--figure", figure=getattr(args, "figure", None))
    return RunConfig(**sections, path=args.config)


def load_policy(text, units):
    """Built-in name, infix expression, constant:/external: spec or a hall-of-fame JSON path."""
    if text.endswith(".json"):
        path = Path(text)
        if not path.exists():
            raise MissingInput(f"hall of fame not found: {path}")
        tree, stored_units = best_expression(path)
        return SymbolicPolicy(tree, units=stored_units, name=f"best of {path}")
    try:
        return resolve_policy(text, units=units)
    except ValueError as e:
        raise ConfigInvalid("--policy", str(e)) from e


def _pairs(text):
    try:
        values = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("pair counts must be >= 1")
    return values


def _pair_count(text):
    values = _pairs(text)
    if len(values) != 1:
        raise argparse.ArgumentTypeError(f"simulate runs one scenario; expected a single pair count, got {text!r}")
    return values[0]


def _out_dir(args):
    return Path(args.out) if args.out else Path("runs") / args.command


# --- Subcommands ---

def cmd_simulate(args):
    cfg = resolve_config(args)
    scenario = _override(cfg.scenario, "--pairs", pair_count=args.pairs)
    seed = args.seed or 0
    policy_text = args.policy or "sp1"
    out = _out_dir(args)
    with load_policy(policy_text, cfg.regression.units) as policy:
        trace = simulate(scenario, policy, seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_bytes(trace.to_csv())
    (out / "link.csv").write_bytes(convert_df_to_csv(trace.link))
    (out / "flows.csv").write_bytes(convert_df_to_csv(trace.flow_frame()))
    write_json(out / "trace.json", {**trace.metadata, "ports": trace.ports, "policy": policy.describe()})
    write_manifest(out, "simulate", cfg.path, seed, {"scenario": section_dict(scenario), "policy": policy_text})
    print(f"✅ {len(trace.windows)} window records for {scenario.describe()} written to {out}")
    return 0


def cmd_collect(args):
    cfg = resolve_config(args)
    collection = _override(cfg.collection, "--pairs", pair_counts=args.pairs)
    seed = args.seed or 0
    out = _out_dir(args)
    scenarios = collection.scenarios(cfg.scenario, seed)
    with load_policy(collection.expert, cfg.regression.units) as expert:
        dataset = collect_many(expert, scenarios, collection.epsilon, seed, jobs=args.jobs or 1)
    out.mkdir(parents=True, exist_ok=True)
    path = dataset.save(out / "dataset.csv")
    write_manifest(out, "collect", cfg.path, seed,
                   {"scenario": section_dict(cfg.scenario), "collection": section_dict(collection)})
    classes = dataset.behaviour_classes()
    print(f"✅ {len(dataset)} experiences written to {path}")
    print(f"   classes: {classes['increase']} increase, {classes['stabilize']} stabilize, "
          f"{classes['decrease']} decrease")
    if min(classes.values()) == 0:
        print("⚠️ dataset is missing at least one behaviour class")
    return 0


def _read_dataset(path):
    if not path:
        raise MissingInput("regress needs --dataset")
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"dataset not found: {path}")
    try:
        return ExperienceDataset.load(path)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _regression_data(dataset, path, units):
    try:
        return RegressionDataset.from_experience(dataset, units=units)
    except (ValueError, DegenerateDataset) as e:
        raise ConfigError(f"{path}: {e}") from e


def cmd_regress(args):
    cfg = resolve_config(args)
    units = cfg.regression.units
    data = _regression_data(_read_dataset(args.dataset), args.dataset, units)
    holdout = _regression_data(_read_dataset(args.holdout), args.holdout, units) if args.holdout else None
    out = _out_dir(args)
    hof = run_regression(data, cfg.regression)
    path = write_hall_of_fame(hof, out)
    resolved = cfg.resolved("regression")
    resolved["dataset"] = str(args.dataset)

    best = hof.best
    print(f"✅ best expression: {best.infix}  (fitness {best.fitness:.6f}, {best.complexity} tokens)")
    print("Pareto front (complexity, fitness, expression):")
    for entry in hof.pareto_front():
        print(f"  {entry.complexity:>3}  {entry.fitness:.6f}  {entry.infix}")
    if holdout is not None:
        score = fitness(best.expression, holdout)
        resolved["holdout"] = str(args.holdout)
        write_json(out / "holdout.json", {"dataset": str(args.holdout), "fitness": score, "infix": best.infix})
        print(f"   held-out fitness: {score:.6f}")
    write_manifest(out, "regress", cfg.path, cfg.regression.seed, resolved)
    print(f"   hall of fame written to {path}")
    return 0


def cmd_evaluate(args):
    cfg = resolve_config(args)
    evaluation = _override(cfg.evaluation, "--duration", duration_s=args.duration)
    seed = args.seed or 0
    spec = evaluation.phase_spec(base=cfg.scenario, seed=seed)
    out = _out_dir(args)
    with load_policy(evaluation.policy, cfg.regression.units) as policy:
        result = run_phase(spec, policy, jobs=evaluation.jobs)
    write_phase_outputs(result, out)
    write_manifest(out, "evaluate", cfg.path, seed,
                   {"scenario": section_dict(cfg.scenario), "evaluation": section_dict(evaluation)})
    summary = result.summary()
    print(f"✅ phase {spec.name}: {summary['scenarios']} scenarios under {policy.name} written to {out}")
    if not summary["loss_free"]:
        print("⚠️ some scenarios lost packets; see loss_report.pdf")
    return 0


def cmd_analyze(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    with load_policy(cfg.analysis.policy, cfg.regression.units) as policy:
        tables, summary = run_analysis(policy, cfg.analysis, cfg.scenario)
    out.mkdir(parents=True, exist_ok=True)
    for name, frame in tables.items():
        (out / f"{name}.csv").write_bytes(convert_df_to_csv(frame))
    write_json(out / "analysis.json", summary)
    write_manifest(out, "analyze", cfg.path, args.seed, cfg.resolved("scenario", "analysis"))
    print(f"✅ {cfg.analysis.figure} tables for {policy.name}: {', '.join(tables)} written to {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "collect": cmd_collect,
    "regress": cmd_regress,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--jobs", type=int, help="parallel workers")
    common.add_argument("--policy", help="sp1, sp2, sp3, scripted-expert, constant:<a>, "
                                         "external:<command>, an infix expression or a hall_of_fame.json")
    common.add_argument("--epsilon", type=float, help="exploration probability for collect")
    common.add_argument("--duration", type=float, help="simulated seconds per run")
    common.add_argument("--units", choices=sorted(UNIT_SCALE), help="time units fed to expressions")
    common.add_argument("-v", "--verbose", action="store_true", help="log at INFO")

    parser = argparse.ArgumentParser(prog=APP_TITLE, description=f"{APP_ICON} symbolic congestion-control workbench")
    parser.add_argument("--version", action="version", version=f"{APP_TITLE} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run one scenario and write its trace")
    p.add_argument("--pairs", type=_pair_count, help="sender/receiver pairs")
    p.add_argument("--capacity", type=float, help="bottleneck capacity in Mbps")

    p = sub.add_parser("collect", parents=[common], help="epsilon-greedy experience collection")
    p.add_argument("--pairs", type=_pairs, help="comma-separated pair counts, one run each")
    p.add_argument("--capacity", type=float, help="bottleneck capacity in Mbps")

    p = sub.add_parser("regress", parents=[common], help="deep symbolic regression on a dataset")
    p.add_argument("--dataset", help="experience CSV from collect")
    p.add_argument("--holdout", help="second experience CSV to score the best expression on")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.add_argument("--controller", choices=["tabular", "recurrent"])

    p = sub.add_parser("evaluate", parents=[common], help="run a phase grid under one policy")
    p.add_argument("--phase", choices=["one", "two", "custom"])

    p = sub.add_parser("analyze", parents=[common], help="interpretability tables of a policy")
    p.add_argument("--figure", choices=FIGURES)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MissingInput, ExpressionError) as e:
        logger.error("%s", e)
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except SymccError as e:
        logger.error("%s", e)
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
