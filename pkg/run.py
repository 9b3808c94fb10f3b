"""
VFM Lab: multi-task virtual flow metering experiments
Main entry point: generate, train, evaluate, ablate
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from data.synth_asset import ScenarioError
from data.well_data import WellDataError
from src.config import (
    GRID_PRESETS,
    MODEL_KINDS,
    ConfigError,
    ExperimentConfig,
    default_jobs,
    load_environment,
    load_experiment_config,
    load_scenario_config,
    output_root,
    resolve_output,
)
from src.experiment import DEFAULT_SCENARIO, evaluate_bundle, generate_dataset, run_ablation, run_experiment
from src.vfm_models import Variant

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

logger = logging.getLogger("vfm")


class UsageError(Exception):
    """Bad command-line arguments"""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _comma_list(choices):
    def parse(text: str) -> List[str]:
        items = [item.strip() for item in text.split(",") if item.strip()]
        unknown = [item for item in items if item not in choices]
        if unknown or not items:
            raise argparse.ArgumentTypeError(f"expected a comma list of {', '.join(choices)}, got {text!r}")
        return items
    return parse


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="run.py", description="Multi-task virtual flow meter experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for DEBUG logging")
    parser.add_argument("--env-file", default=None, help=".env file with VFM_OUTPUT_ROOT / VFM_JOBS")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    generate = commands.add_parser("generate", help="simulate a synthetic asset into a dataset CSV")
    generate.add_argument("--config", default=str(DEFAULT_SCENARIO), help="scenario TOML")
    generate.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    generate.add_argument("--out", default=None, help="dataset CSV path (default <output root>/dataset.csv)")
    generate.add_argument("--jobs", type=int, default=None)

    train = commands.add_parser("train", help="train the requested model families into a bundle")
    train.add_argument("--config", default=None, help="experiment TOML")
    train.add_argument("--data", default=None, help="dataset CSV (default: generate from the scenario)")
    train.add_argument("--models", type=_comma_list(MODEL_KINDS), default=None)
    train.add_argument("--grid", choices=sorted(GRID_PRESETS), default=None, help="grid preset")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default=None, help="bundle directory")
    train.add_argument("--jobs", type=int, default=None)

    evaluate = commands.add_parser("evaluate", help="rebuild reports for every checkpoint in a bundle")
    evaluate.add_argument("--bundle", required=True)
    evaluate.add_argument("--data", default=None, help="dataset CSV (default: the bundle's copy)")

    ablate = commands.add_parser("ablate", help="universal-model ablation table over seeds")
    ablate.add_argument("--config", default=None, help="experiment TOML")
    ablate.add_argument("--data", default=None)
    ablate.add_argument("--seeds", type=_int_list, default=None)
    ablate.add_argument("--variants", type=_comma_list([v.value for v in Variant]),
                        default=[v.value for v in Variant])
    ablate.add_argument("--grid", choices=sorted(GRID_PRESETS), default=None)
    ablate.add_argument("--seed", type=int, default=None, help="root seed for the splits")
    ablate.add_argument("--out", default=None)
    ablate.add_argument("--jobs", type=int, default=None)
    return parser


def experiment_config(args) -> ExperimentConfig:
    """Config file (or defaults) with the command-line overrides applied"""
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    raw = config.model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "models", None):
        raw["models"] = args.models
    if getattr(args, "grid", None):
        raw["grid"] = {"preset": args.grid}
    if getattr(args, "data", None):
        raw["dataset"] = args.data
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError("command line", [(".".join(map(str, err["loc"])), None, err["msg"]) for err in e.errors()])


def _jobs(args, config: Optional[ExperimentConfig] = None) -> int:
    if getattr(args, "jobs", None):
        return args.jobs
    if config is not None and config.n_jobs:
        return config.n_jobs
    return default_jobs()


def run_generate(args) -> int:
    scenario = load_scenario_config(args.config)
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})
    out = Path(args.out) if args.out else output_root() / "dataset.csv"
    result = generate_dataset(scenario, out, n_jobs=_jobs(args))
    print(f"Generated {result['n_observations']} observations for {result['n_wells']} wells")
    print(f"  dataset:  {result['dataset']}")
    print(f"  manifest: {result['manifest']}")
    return EXIT_OK


def run_train(args) -> int:
    config = experiment_config(args)
    out = Path(args.out) if args.out else resolve_output(config.output_dir)
    result = run_experiment(config, out, n_jobs=_jobs(args, config))
    print("=" * 60)
    print(f"Bundle: {result['bundle']}")
    print(f"Models: {len(result['models']) - len(result['failures'])}/{len(result['models'])} trained")
    for key, error in sorted(result["failures"].items()):
        print(f"  FAILED {key}: {error}")
    print("=" * 60)
    return EXIT_OK if result["success"] else EXIT_RUNTIME


def run_evaluate(args) -> int:
    result = evaluate_bundle(args.bundle, args.data)
    print(f"Wrote {len(result['reports'])} report files")
    for key, error in sorted(result["failures"].items()):
        print(f"  missing {key}: {error}")
    return EXIT_OK if result["success"] else EXIT_RUNTIME


def run_ablate(args) -> int:
    config = experiment_config(args)
    out = Path(args.out) if args.out else resolve_output(config.output_dir) / "ablation"
    result = run_ablation(config, out, seeds=args.seeds, variants=args.variants, n_jobs=_jobs(args, config))
    print(result["table"].to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "generate": run_generate,
    "train": run_train,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_VALIDATION
    load_environment(args.env_file)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, WellDataError) as e:
        print(f"Invalid input:\n{e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ScenarioError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("%s failed", args.command)
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
