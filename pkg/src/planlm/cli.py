"""Command-line entry point: ``planlm <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .actions import ActionError
from .checkpoint import CheckpointError
from .config import STAGES, ConfigError, ExperimentConfig, parse_value
from .corpus import CorpusError
from .evaluation import EvaluationError
from .experiment import Experiment, LockError, StageError
from .planner import NumericError
from .probe import ProbeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_BUSY = 5

SUBCOMMANDS = ("prepare", "cluster", "pretrain-lm", "pretrain-planner", "finetune", "eval",
               "generate", "probe", "sweep", "run")


def parse_flags(extra: list[str]) -> dict:
    """``--trainer.mode soft``, ``--mode=soft`` -> ``{"trainer.mode": "soft", ...}`` (raw keys)."""
    flags = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise ConfigError(f"flag --{key} needs a value")
            i += 1
            value = extra[i]
        flags[key] = parse_value(value)
        i += 1
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planlm",
        description="Planner-conditioned byte language models: data, training, evaluation.",
        epilog="Any config key can be given as a flag, e.g. --trainer.unfreeze never or "
               "--unfreeze=never; environment variables PLM_SECTION__KEY override the "
               "config file and are overridden by flags.")
    parser.add_argument("command", choices=SUBCOMMANDS,
                        help="stage to run ('run' executes run.stages in order)")
    parser.add_argument("--config", help="JSON file of dotted config keys")
    parser.add_argument("--show-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.resolve(args.config, flags=parse_flags(extra))
        if args.show_config:
            print(cfg.to_json())
            return EXIT_OK
        exp = Experiment(cfg)
        stages = None if args.command == "run" else [args.command]
        results = exp.run(stages)
        _summarize(results)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LockError as e:
        print(f"busy: {e}", file=sys.stderr)
        return EXIT_BUSY
    except (StageError, CorpusError, ActionError, CheckpointError, EvaluationError, ProbeError,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def _summarize(results: dict) -> None:
    for stage, value in results.items():
        if hasattr(value, "to_json") and stage in ("eval", "probe"):
            print(value.to_json())
        elif stage == "sweep":
            for r in value:
                print(json.dumps({"predicted_fraction": r.meta.get("predicted_fraction"),
                                  "ppl": r.ppl, "plan_match_acc": r.plan_match_acc}))
        elif stage == "generate":
            for s in value:
                print(s["text"])
        else:
            print(f"{stage}: done")


assert set(SUBCOMMANDS) - {"run"} == set(STAGES)

if __name__ == "__main__":
    sys.exit(main())
