"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Optional, Sequence

from dotenv import load_dotenv

from beam_align.configuration import RunConfig
from beam_align.errors import ArtifactIOError, BeamAlignError
from beam_align.pipeline import explain_sample, run_attack, run_calibrate, run_eval, run_generate, run_train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file; built-in defaults when omitted")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration value (repeatable); VALUE is parsed as JSON",
    )
    common.add_argument("--seed", type=int, help="Global seed; overrides the file and $BEAM_ALIGN_SEED")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Root logger level",
    )

    parser = argparse.ArgumentParser(
        prog="beam-align",
        description="Deep-learning mmWave beam alignment with DkNN credibility",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="Synthesize channels and write the dataset")
    generate.add_argument("--verify-labels", action="store_true", help="Recount every label exhaustively")
    generate.add_argument("--export-channels", action="store_true", help="Also write channels and the narrow codebook")

    train = commands.add_parser("train", parents=[common], help="Train the classifier")
    train.add_argument("--force", action="store_true", help="Overwrite an existing checkpoint")

    commands.add_parser("calibrate", parents=[common], help="Build the DkNN index and calibration scores")

    attack = commands.add_parser("attack", parents=[common], help="Write FGSM adversarial features")
    attack.add_argument("--sweep", action="store_true", help="Also write one file per attack.sweep_relative_epsilons entry")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate every method and write the report")
    evaluate.add_argument("--allow-lineage-mismatch", action="store_true", help="Evaluate artifacts of differing lineage")
    evaluate.add_argument("--explain", type=int, metavar="UE_ID", help="Also print the neighbor report of one sample")

    explain = commands.add_parser("explain", parents=[common], help="Print the DkNN verdict of one sample")
    explain.add_argument("sample_id", type=int, help="UE id of the sample")

    run = commands.add_parser("run", parents=[common], help="Run the whole pipeline graph")
    run.add_argument("--force", action="store_true", help="Overwrite an existing checkpoint")
    run.add_argument("--verify-labels", action="store_true", help="Recount every label exhaustively")
    run.add_argument("--export-channels", action="store_true", help="Also write channels and the narrow codebook")
    run.add_argument("--allow-lineage-mismatch", action="store_true", help="Evaluate artifacts of differing lineage")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """File, then environment, then ``--set`` and ``--seed``."""
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    config = config.with_environment().with_overrides(args.overrides)
    if args.seed is not None:
        config = config.with_overrides([f"seed={args.seed}"])
    return config


def _emit(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _run_graph(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    from beam_align.graph import graph

    result = graph.invoke(
        {
            "force": args.force,
            "verify_labels": args.verify_labels,
            "export_channels": args.export_channels,
            "allow_lineage_mismatch": args.allow_lineage_mismatch,
        },
        {"configurable": {**config.to_dict(), "apply_environment": False}},
    )
    return result["summaries"]


def dispatch(args: argparse.Namespace) -> Any:
    """Run the stage selected by ``args.command`` and return its summary."""
    config = load_config(args)
    logger.info("Run %s: seed=%d workspace=%s lineage=%s", args.command, config.seed, config.paths.workspace, config.lineage_hash()[:12])
    if args.command == "generate":
        return run_generate(config, verify=args.verify_labels, export=args.export_channels)
    if args.command == "train":
        return run_train(config, force=args.force)
    if args.command == "calibrate":
        return run_calibrate(config)
    if args.command == "attack":
        return run_attack(config, sweep=args.sweep)
    if args.command == "eval":
        summary = run_eval(config, allow_lineage_mismatch=args.allow_lineage_mismatch)
        if args.explain is not None:
            summary["explain"] = explain_sample(config, args.explain)
        return summary
    if args.command == "explain":
        return explain_sample(config, args.sample_id)
    return _run_graph(config, args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)
    try:
        _emit(dispatch(args))
    except BeamAlignError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s: %s", ArtifactIOError.__name__, e)
        return ArtifactIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
