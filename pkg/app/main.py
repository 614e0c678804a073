"""Command-line entry point: simulate, fit, loo, report."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import deque
from datetime import datetime, timezone

from app import __version__
from app.config import RunConfig, config_hash, load_run_config, settings
from app.errors import ConfigError, ConvergenceWarning, WivJMError
from app.pipeline import fit_study, loo_fit, report_study, simulate_study

LOG_LEVELS = {"DEBUG": 10, "INFO": 20, "WARNING": 30, "ERROR": 40}

logger = logging.getLogger("app.main")


class BufferLogHandler(logging.Handler):
    """Keeps warnings from this run so they can be repeated at exit."""

    def __init__(self, maxlen: int = 200):
        super().__init__(level=logging.WARNING)
        self.records: deque = deque(maxlen=maxlen)

    def emit(self, record: logging.LogRecord):
        self.records.append({
            "timestamp": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": self.format(record),
        })


def configure_logging(level: str) -> BufferLogHandler:
    logging.basicConfig(
        level=LOG_LEVELS.get(level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        force=True,
    )
    handler = BufferLogHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wivjm", description="Bayesian joint models with curvature-based WIV.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.log_level, choices=sorted(LOG_LEVELS))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate synthetic datasets")
    p.add_argument("--config", required=True, help="TOML run file with a [scenario] table")
    p.add_argument("--out", required=True)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--jobs", type=int, default=settings.effective_jobs)

    p = sub.add_parser("fit", help="Fit a joint model to one dataset or a directory of replicates")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default=None, help="Approach label used by report")
    p.add_argument("--jobs", type=int, default=settings.effective_jobs)

    p = sub.add_parser("loo", help="PSIS-LOO for a fit directory")
    p.add_argument("--fit", required=True)

    p = sub.add_parser("report", help="Bias, coverage and LOOIC tables for a study")
    p.add_argument("--study", required=True)
    p.add_argument("--out", required=True)
    return parser


def _study_exit(summary: dict) -> int:
    if summary.get("errors"):
        first = next(r for r in summary["results"] if r["status"] == "error")
        logger.error(f"{summary['errors']} of {summary['total']} jobs failed")
        return int(first.get("exit_code", 1))
    if summary.get("flagged"):
        raise ConvergenceWarning(f"{summary['flagged']} of {summary['total']} fits have R-hat above threshold")
    return 0


def _load(path: str) -> RunConfig:
    cfg = load_run_config(path)
    logger.info(f"Config {path} (hash {config_hash(cfg)[:12]})")
    return cfg


def run(args: argparse.Namespace) -> int:
    if args.command == "simulate":
        cfg = _load(args.config)
        if cfg.scenario is None:
            raise ConfigError(f"{args.config}: key 'scenario': required for simulate")
        if args.replicates < 1:
            raise ConfigError("--replicates must be at least 1")
        result = simulate_study(cfg.scenario, args.out, args.replicates, args.jobs, config_hash(cfg))
        return _study_exit(result) if "results" in result else 0

    if args.command == "fit":
        cfg = _load(args.config)
        result = fit_study(cfg, args.data, args.out, args.jobs, args.label)
        if "results" in result:
            return _study_exit(result)
        if result["flagged"]:
            raise ConvergenceWarning(f"R-hat above threshold for {', '.join(result['flagged'])}",
                                     flagged=result["flagged"])
        return 0

    if args.command == "loo":
        loo_fit(args.fit)
        return 0

    report_study(args.study, args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    buffer = configure_logging(args.log_level)
    try:
        code = run(args)
    except WivJMError as e:
        log = logger.warning if isinstance(e, ConvergenceWarning) else logger.error
        log(f"{type(e).__name__}: {e}")
        code = e.exit_code
    except KeyboardInterrupt:
        logger.error("Interrupted")
        code = 130
    if buffer.records:
        logger.info(f"{len(buffer.records)} warning(s) during this run; last: {buffer.records[-1]['message']}")
    return code


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
