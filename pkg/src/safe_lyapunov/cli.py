"""Command line entry point: ``safe-lyapunov {run,verify,baseline,plot,schema}``.

``run`` exits with status 0 only when the run recorded no safety
violation; errors in the config or inputs give status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config, schema

log = logging.getLogger("safe_lyapunov")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML experiment config (default: pendulum preset)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--iterations", type=int, help="override run.iterations")
    p.add_argument("--output-dir", metavar="PATH", help="override run.output_dir")
    p.add_argument("--beta-mode", choices=["fixed", "theoretical"], help="override beta.mode")


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.iterations is not None:
        cfg.run.iterations = args.iterations
    if args.output_dir is not None:
        cfg.run.output_dir = args.output_dir
    if args.beta_mode is not None:
        cfg.beta.mode = args.beta_mode
    return cfg.validate()


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    result = run_experiment(cfg)
    if args.plot:
        from .plotting import plot_run

        plot_run(cfg.run.output_dir)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    if result.summary["violations"]:
        log.error("%d safety violation(s)", result.summary["violations"])
        return 1
    return 0


def _cmd_verify(args) -> int:
    from .experiment import verify_only

    cfg = _config(args)
    report = verify_only(
        cfg,
        checkpoint=args.checkpoint,
        observations=args.observations,
        output_dir=cfg.run.output_dir if args.output_dir is not None else None,
        check_oracle=args.oracle,
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_baseline(args) -> int:
    from .experiment import baseline_suite

    report = baseline_suite(seed=args.seed if args.seed is not None else 0, random_instances=args.instances)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["ok"] else 1


def _cmd_plot(args) -> int:
    from .plotting import plot_run

    for path in plot_run(args.run_dir, args.output_dir):
        print(path)
    return 0


def _cmd_schema(args) -> int:
    print(schema())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safe-lyapunov", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the safe learning loop")
    _common(p)
    p.add_argument("--plot", action="store_true", help="render SVG panels after the run")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="certify a stored policy without learning")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="policy file (default: prior-optimal policy)")
    p.add_argument("--observations", metavar="PATH", help="observations.csv to condition the model on")
    p.add_argument("--oracle", action="store_true", help="also check the certificate against simulation")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("baseline", help="sandwich check and set-property suite on toy instances")
    p.add_argument("--seed", type=int, help="seed for the random instances (default 0)")
    p.add_argument("--instances", type=int, default=100, help="number of random instances")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("plot", help="render SVG panels from a run directory")
    p.add_argument("run_dir", help="directory written by 'run'")
    p.add_argument("--output-dir", metavar="PATH", help="where to write the SVGs (default RUN_DIR/plots)")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("schema", help="print every config key with its default")
    p.set_defaults(func=_cmd_schema)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
