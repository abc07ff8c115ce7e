import argparse
import logging
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import torch
from dotenv import load_dotenv

from config import ExperimentConfig, settings
from presets import PRESETS, preset_data, preset_names
from schemas import ConfigValidationError, apply_overrides, load_experiment, read_config_file
from services.experiment_service import ExperimentService, with_seed

logger = logging.getLogger(__name__)

COMMANDS = ("train", "simulate", "metrics", "oracle-check", "preset-list")
EXIT_OK = 0
EXIT_INVALID_CONFIG = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Nash-DQN offset-credit market simulator.",
        epilog="Any config field can be overridden with --section.field=value, e.g. --train.lr=0.003 or --classes.0.requirement=30.",
    )
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", type=str, help="YAML experiment file")
    parser.add_argument("--preset", type=str, help=f"Built-in experiment (default: {settings.default_preset})")
    parser.add_argument("--seed", type=int, help="Seed for network init, training and evaluation")
    parser.add_argument("--out", type=str, help=f"Artifact directory (default: under {settings.output_dir})")
    parser.add_argument("--threads", type=int, help=f"Torch CPU threads (default: {settings.threads})")
    parser.add_argument("--checkpoint", type=str, help="Checkpoint to evaluate (default: <out>/checkpoint.pt)")
    parser.add_argument(
        "--display-submissions",
        action="store_true",
        help="Show compliance-date submissions in inventory bands (display only)",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    return parser


def split_overrides(extra: Sequence[str]) -> List[str]:
    """Collect `--a.b=value` and `--a.b value` tokens left over by argparse."""
    overrides, i = [], 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise ConfigValidationError({"_overrides": [f"unrecognized argument '{token}'"]})
        if "=" in token:
            overrides.append(token[2:])
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            overrides.append(f"{token[2:]}={extra[i + 1]}")
            i += 2
        else:
            raise ConfigValidationError({"_overrides": [f"override '{token}' has no value"]})
    return overrides


def resolve_config(args: argparse.Namespace, overrides: Sequence[str]) -> ExperimentConfig:
    if args.config:
        data = read_config_file(args.config)
        if args.preset:
            data.setdefault("preset", args.preset)
    else:
        name = args.preset or settings.default_preset
        if name not in PRESETS:
            raise ConfigValidationError({"preset": [f"unknown preset '{name}', choose from {preset_names()}"]})
        data = preset_data(name)
    cfg = load_experiment(apply_overrides(data, overrides))
    return with_seed(cfg, args.seed)


def print_summary(title: str, rows: Dict[str, Any]):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for key, value in rows.items():
        print(f"{key}: {value}")
    print("=" * 60)


def print_presets():
    print("Built-in presets:")
    for name, data in PRESETS.items():
        agents = sum(c.get("population", 1) for c in data["classes"])
        print(f"  {name:<16} {agents} agents, {len(data['classes'])} classes")


def run(command: str, args: argparse.Namespace, overrides: Sequence[str]) -> int:
    if command == "preset-list":
        print_presets()
        return EXIT_OK

    cfg = resolve_config(args, overrides)
    torch.set_num_threads(args.threads or settings.threads)
    service = ExperimentService(cfg, args.out or cfg.eval.out_dir)

    print(f"🚀 {command} started at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"   Preset: {cfg.preset or 'custom'}")
    print(f"   Agents: {cfg.num_agents}")
    print(f"   Config hash: {service.config_hash}")
    print(f"   Output: {service.out_dir}")

    if command == "train":
        print_summary("TRAINING SUMMARY", service.train())
    elif command == "simulate":
        ensemble = service.simulate(args.checkpoint)
        print_summary("SIMULATION SUMMARY", {"paths": ensemble.num_paths, "agents": len(ensemble.labels)})
    elif command == "metrics":
        summary = service.compute_metrics(args.checkpoint, args.display_submissions)
        print("\n" + summary.to_string(index=False))
    elif command == "oracle-check":
        print_summary("ORACLE CHECK", service.oracle_check(args.checkpoint))

    print(f"\n🎉 {command} completed at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function for command-line usage."""
    load_dotenv()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    try:
        return run(args.command, args, split_overrides(extra))
    except ConfigValidationError as e:
        logger.error(f"❌ Invalid configuration: {e.messages}")
        return EXIT_INVALID_CONFIG
    except Exception as e:
        logger.exception(f"❌ Fatal error: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
