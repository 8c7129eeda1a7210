import argparse
import json
import logging
import sys
import uuid
from pathlib import Path

from pidsbench import config
from pidsbench.errors import ConfigError, PidsbenchError

logger = logging.getLogger(__name__)

EXPERIMENTS = ("run_n_times",)
TUNING_MODES = ("hyperparameters",)
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class PidsbenchArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"status": "error", "message": message}))
        sys.exit(1)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _configure_logging(log_path: Path, verbose: bool) -> list[logging.Handler]:
    log_path.parent.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter(LOG_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr), logging.FileHandler(log_path)]
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    return handlers


def _release_logging(handlers: list[logging.Handler]) -> None:
    root = logging.getLogger()
    for handler in handlers:
        root.removeHandler(handler)
        handler.close()


def build_config(args, overrides: list[str], config_dir: Path) -> config.ConfigTree:
    """Resolve the run's configuration.

    Flow:
    1. Load the system YAML (with its ``_include_yml`` chain)
    2. Merge the tuned overlay for (system, dataset) when --tuned is given
    3. Merge the experiment document when --experiment is given
    4. Apply dotted overrides from the command line, in order
    """
    from pidsbench.experiments import resolve_tuned

    cfg = config.load_config(config.resolve_include(args.system, config_dir), config_dir)
    if args.tuned:
        cfg = config.merge_overlay(cfg, resolve_tuned(args.system, args.dataset, config_dir))
    if args.experiment:
        if args.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {args.experiment!r}; allowed: {', '.join(EXPERIMENTS)}",
                              "experiment")
        experiment_dir = config_dir / "experiments"
        overlay = config.load_config(config.resolve_include(args.experiment, experiment_dir), experiment_dir)
        cfg = config.merge_overlay(cfg, overlay)
    return config.apply_overrides(cfg, config.parse_override_args(overrides))


def _handle_run(args, overrides: list[str]) -> int:
    from pidsbench.experiments import SweepSpec, run_n_times, run_sweep
    from pidsbench.pipeline import run_pipeline

    cache_root = config.get_cache_root()
    data_dir = config.get_data_dir()
    config_dir = config.get_config_dir()
    run_id = uuid.uuid4().hex[:12]
    log_path = cache_root / "logs" / f"{run_id}.log"
    handlers = _configure_logging(log_path, args.verbose)
    try:
        cfg = build_config(args, overrides, config_dir)
        violations = config.validate_config(cfg)
        if violations:
            for v in violations:
                logger.error("Invalid config: %s", v)
            _emit({"status": "error", "message": "invalid configuration",
                   "violations": [str(v) for v in violations]})
            return 1
        if args.cpu:
            logger.debug("--cpu given; execution is always on the CPU")

        if args.tuning_mode:
            tuning_file = args.tuning_file or config_dir / "tuning" / f"tuning_{args.system}.yml"
            report = run_sweep(
                cfg, SweepSpec.from_file(tuning_file), args.dataset,
                cache_root=cache_root, data_dir=data_dir, sweep_id=args.sweep_id, system=args.system,
            )
            _emit({"status": "ok", "log": str(log_path), "sweep_report": str(report.report_path),
                   "failed": len(report.by_status("failed"))})
        elif args.experiment == "run_n_times":
            section = cfg.get("experiment.run_n_times", {}) or {}
            out_dir = cache_root / "experiments" / run_id
            run_n_times(
                cfg, args.dataset, cache_root=cache_root, data_dir=data_dir,
                iterations=int(section.get("iterations", 5)),
                restart_from=args.force_restart or section.get("restart_from", "training"),
                out_dir=out_dir, system=args.system,
            )
            _emit({"status": "ok", "log": str(log_path), "instability_report": str(out_dir / "instability.jsonl")})
        else:
            result = run_pipeline(
                cfg, args.dataset, cache_root=cache_root, data_dir=data_dir,
                restart_from=args.force_restart, fresh_root=args.restart_from_scratch,
                system=args.system, run_id=run_id,
            )
            _emit({"status": "ok", "run_id": result.run_id, "log": str(log_path),
                   "metrics": str(result.metrics_path), "executed": result.executed})
        return 0
    except ConfigError as e:
        logger.error("%s", e)
        _emit({"status": "error", "message": str(e), "log": str(log_path)})
        return 1
    except (PidsbenchError, OSError) as e:
        logger.error("Run failed: %s", e)
        _emit({"status": "error", "message": str(e), "log": str(log_path)})
        return 2
    finally:
        _release_logging(handlers)


def _handle_generate(args) -> int:
    from pidsbench.synthetic import generate_synthetic

    out_dir = Path(args.out) if args.out else config.get_data_dir() / args.dataset
    try:
        events, labels = generate_synthetic(
            seed=args.seed, n_benign_events=args.events, n_attack_chains=args.attacks,
            span_hours=args.hours, out_dir=out_dir, dataset_id=args.dataset,
        )
    except (PidsbenchError, OSError) as e:
        _emit({"status": "error", "message": str(e)})
        return 2
    _emit({"status": "ok", "events": str(events), "labels": str(labels)})
    return 0


def build_parser() -> PidsbenchArgumentParser:
    parser = PidsbenchArgumentParser(
        description="pidsbench - build and evaluate provenance-based intrusion detection pipelines",
        prog="pidsbench",
        allow_abbrev=False,
    )
    subparsers = parser.add_subparsers(dest="subcommand", parser_class=PidsbenchArgumentParser)

    # pidsbench run
    run_parser = subparsers.add_parser(
        "run",
        help="Run a system's pipeline on a dataset",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Run SYSTEM on DATASET. Extra --<dotted.key>=<value> flags override the config.",
        allow_abbrev=False,
    )
    run_parser.add_argument("system", help="System config name under the config directory")
    run_parser.add_argument("dataset", help="Dataset identifier under the data directory")
    run_parser.add_argument("--tuned", action="store_true", help="Merge config/tuned/<dataset>/<system>.yml")
    run_parser.add_argument("--experiment", default=None, help="Experiment to run (run_n_times)")
    run_parser.add_argument("--tuning_mode", choices=TUNING_MODES, default=None)
    run_parser.add_argument("--tuning_file", default=None, help="Sweep file (default config/tuning/tuning_<system>.yml)")
    run_parser.add_argument("--force_restart", default=None, metavar="STAGE",
                            help="Re-run this stage and everything after it")
    run_parser.add_argument("--restart_from_scratch", action="store_true",
                            help="Run every stage under a fresh scratch root")
    run_parser.add_argument("--cpu", action="store_true", help="Accepted for compatibility; no effect")
    run_parser.add_argument("--sweep_id", default=None, help="Join an existing sweep directory")
    run_parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    # pidsbench generate
    gen_parser = subparsers.add_parser("generate", help="Write a synthetic dataset", allow_abbrev=False)
    gen_parser.add_argument("dataset", help="Dataset identifier (directory name)")
    gen_parser.add_argument("--seed", type=int, default=0)
    gen_parser.add_argument("--events", type=int, default=20000, help="Benign events")
    gen_parser.add_argument("--attacks", type=int, default=3, help="Attack chains")
    gen_parser.add_argument("--hours", type=int, default=6, help="Span of the trace")
    gen_parser.add_argument("--out", default=None, help="Output directory (default <data_dir>/<dataset>)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)

    if args.subcommand is None:
        parser.print_help()
        return 0
    if args.subcommand == "generate":
        if extras:
            parser.error(f"unrecognized arguments: {' '.join(extras)}")
        return _handle_generate(args)

    bad = [t for t in extras if not (t.startswith("--") and "=" in t)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    return _handle_run(args, extras)


if __name__ == "__main__":
    sys.exit(main())
