"""Valley Atlas - command-line entry point.

Subcommands map to pipeline stages; every stage reads and writes the run directory.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 resource cap hit.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from components.pipeline import STAGES, cmd_demo, cmd_search, demo_config
from utils.env_loader import get_default_out_dir, get_default_workers, get_log_level
from utils.errors import ConfigError, ValleyError
from utils.run_config import RunConfig, load_config

logger = logging.getLogger(__name__)

COMMANDS = ("train", "search", "characterize", "sample", "compare", "oracle", "demo")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="app.py",
        description="Local-valley analysis of Ising and RBM energy landscapes.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="configuration keys and defaults:\n" + "".join(f"  {line}\n" for line in RunConfig().to_text().splitlines())
        + "  sampler.<name>.<key>=...   (kind: sa | sqa | ingest | exhaustive)\n",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="key=value run configuration file")
    parser.add_argument("--seed", type=_u64, help="global seed (overrides the config)")
    parser.add_argument("--workers", type=_positive, help="parallel workers (default: VALLEYS_WORKERS or 1)")
    parser.add_argument("--out", type=Path, help="run directory (default: VALLEYS_OUT_DIR or ./runs)")
    parser.add_argument("--resume", action="store_true", help="continue a search from its checkpoint")
    return parser


def configure(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < command-line flags."""
    if args.command == "demo":
        cfg = demo_config(args.config)
    else:
        cfg = load_config(args.config)
    if args.config is None:
        cfg = cfg.with_overrides(workers=get_default_workers(), out_dir=get_default_out_dir())
    return cfg.with_overrides(
        seed=args.seed,
        workers=args.workers,
        out_dir=str(args.out) if args.out is not None else None,
    )


def run(args: argparse.Namespace) -> List[str]:
    cfg = configure(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "demo":
        return [r.summary for r in cmd_demo(cfg, out_dir)]
    if args.command == "search":
        return [cmd_search(cfg, out_dir, resume=args.resume).summary]
    if args.resume:
        raise ConfigError("--resume only applies to the search command")
    return [STAGES[args.command](cfg, out_dir).summary]


def main(argv: Optional[List[str]] = None) -> int:
    """Main application flow."""
    logging.basicConfig(level=get_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        for line in run(args):
            print(line)
    except ValleyError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
