import argparse
import logging
import sys
from typing import Any, List, Optional, Sequence

from app.config import load_run_config, settings
from app.core import BPSolveApp, ExitCode
from app.errors import BPSolveError, ConfigError
from app.processors.records import echo_config

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "autonomous", "bifurcation", "multiplicity", "verify")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="Output directory (default: BPSOLVE_OUTPUT_DIR)")
    common.add_argument("--seed", type=int, help="Seed for all randomness")
    common.add_argument("--threads", type=int, help="Worker threads for multi-start and sweeps")
    common.add_argument("--quick", action="store_true", help="Small grids for the verify suite")

    parser = argparse.ArgumentParser(
        prog="bpsolve",
        description="Constrained variational solver for the Schroedinger-Bopp-Podolsky system",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="Minimize from a centred Gaussian start")
    sub.add_parser("autonomous", parents=[common], help="Radial ground state of the constant-potential problem")
    sub.add_parser("bifurcation", parents=[common], help="Sweep the constraint level c")
    sub.add_parser("multiplicity", parents=[common], help="Concentration and multiplicity experiment")
    sub.add_parser("verify", parents=[common], help="Run the self-check suite")
    return parser


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    return str(value)


def print_table(rows: Sequence[Sequence[Any]]) -> None:
    for row in rows:
        print("  ".join(_format(v) for v in row))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        cfg = load_run_config(args.config, overrides={"output_dir": args.out, "seed": args.seed})
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return int(ExitCode.CONFIG)

    seed = cfg.seed if cfg.seed is not None else settings.SEED
    threads = args.threads or settings.THREADS
    out_dir = cfg.output_dir or settings.OUTPUT_DIR
    echo_config(out_dir, cfg)

    app = BPSolveApp(seed=seed, threads=threads)
    handler = getattr(app, args.command)
    try:
        result = handler(cfg, out_dir=out_dir, quick=args.quick)
    except (BPSolveError, OSError) as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return int(ExitCode.CONFIG)

    print(f"{args.command}: {result['status']}")
    print_table(result.get("table", []))
    print(f"records: {result['records_path']}")
    return int(result["exit_code"])


if __name__ == "__main__":
    sys.exit(main())
