import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from benchmark_config import RuntimeSettings, apply_overrides, load_config, parse_override

SUBCOMMANDS = {
    "cylinder": ("cylinder", "cylinder_tet", "Convergence study of the pulled cylinder"),
    "oblate": ("oblate", "oblate_tet", "Convergence study of the oblate spheroid"),
    "stiffened-beam": ("stiffened-beam", "stiffened_beam", "Beam stiffened by embedded plane membranes"),
    "bending-beam": ("bending-beam", "bending_beam", "Bending beam with an embedded cylinder membrane"),
    "conditioning": ("conditioning-sweep", "conditioning_plane", "Condition number against cut size"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="membrane-cutfem",
        description="Cut finite element studies of elastic membranes on level-set surfaces",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, (_, default_config, help_text) in SUBCOMMANDS.items():
        sub = subparsers.add_parser(command, help=help_text)
        sub.add_argument("--config", default=default_config,
                         help=f"JSON config path or name in configs/ (default: {default_config})")
        sub.add_argument("--out", default=None, help="Output root for batch folders (default: $MEMBRANE_CUTFEM_OUT or runs)")
        sub.add_argument("--deterministic", action="store_true", default=None,
                         help="Run refinement levels sequentially")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="Override a config entry, e.g. --set stabilization.tau0=0.5")
        sub.add_argument("--log-level", default=None, help="Logging level (default: $MEMBRANE_CUTFEM_LOG_LEVEL or INFO)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    runtime = RuntimeSettings.from_env()

    logging.basicConfig(
        level=(args.log_level or runtime.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    benchmark, _, _ = SUBCOMMANDS[args.command]
    try:
        config = load_config(args.config)
        if args.overrides:
            config = apply_overrides(config, dict(parse_override(text) for text in args.overrides))
    except (FileNotFoundError, ValueError) as e:
        print(f"Error loading config: {e}")
        return 2
    if config.benchmark != benchmark:
        print(f"Config '{config.name}' describes a {config.benchmark} study, not {benchmark}")
        return 2

    # imported late so --help stays fast
    from study_orchestrator import StudyOrchestrator

    deterministic = runtime.deterministic if args.deterministic is None else args.deterministic
    orchestrator = StudyOrchestrator(config, out_dir=args.out or runtime.out_dir, deterministic=deterministic)
    result = orchestrator.run()
    print(f"\nStudy {'succeeded' if result['success'] else 'failed'}: {result['message']}")
    return 0 if result["success"] else 1


if __name__ == "__main__":
    sys.exit(main())
