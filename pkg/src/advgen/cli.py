"""Command line front end.

Subcommands:
    run <config>                        execute a run, write manifest/metrics/plots
    sweep <config> [--preset NAME]      execute an (epsilon, mu) sweep
    plots <manifest>                    re-render figures from an existing manifest
    validate <config>                   parse and validate a config, report problems
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiment import (
    ConfigError,
    emit_plots_for,
    load_manifest,
    parse_config_file,
    resolve_output_dir,
    run_experiment,
    run_sweep_experiment,
    write_manifest,
)
from .metrics import SWEEP_PRESETS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advgen",
        description="Adversarial image generation and evaluation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment")
    p_run.add_argument("config", help="path to the JSON config")

    p_sweep = sub.add_parser("sweep", help="run an (epsilon, mu) sweep")
    p_sweep.add_argument("config", help="path to the JSON config")
    p_sweep.add_argument(
        "--preset",
        choices=sorted(SWEEP_PRESETS),
        help="sweep protocol preset; overrides the config's sweep section",
    )

    p_plots = sub.add_parser("plots", help="re-render figures from a manifest")
    p_plots.add_argument("manifest", help="path to manifest.json")

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("config", help="path to the JSON config")

    return parser


def _print_metrics(manifest: dict) -> None:
    for row in manifest["metrics"]:
        print(
            f"  eps={row['epsilon']:g} mu={row['mu']:g} n={row['n']}"
            f" rate={row['rate']:.1f}% mean_mse={row['mean_mse']:.6g}"
            + (f" failures={row['n_failures']}" if row.get("n_failures") else "")
        )


def cmd_run(args) -> int:
    cfg = parse_config_file(args.config)
    manifest = run_experiment(cfg)
    out_dir = resolve_output_dir(cfg.output_dir)
    n_ok = sum(1 for r in manifest["instances"] if r["status"] == "ok")
    print(f"run complete: {n_ok} attacked, {manifest['n_prefiltered']} pre-filtered, "
          f"{manifest['n_errors']} errors")
    _print_metrics(manifest)
    print(f"outputs in {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config_file(args.config)
    manifest = run_sweep_experiment(cfg, preset=args.preset)
    out_dir = resolve_output_dir(cfg.output_dir)
    print(f"sweep complete: {len(manifest['metrics'])} grid points over "
          f"{len(manifest['instances'])} instances")
    _print_metrics(manifest)
    print(f"outputs in {out_dir}")
    return 0


def cmd_plots(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    run_dir = manifest_path.parent
    written = emit_plots_for(manifest, run_dir)
    manifest["plots"] = [str(Path(p).relative_to(run_dir)) for p in written]
    write_manifest(manifest_path, manifest)
    for p in written:
        print(p)
    print(f"{len(written)} plots written")
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = parse_config_file(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 1
    print(f"config OK: mode={cfg.mode}, backend={cfg.backend_name}, "
          f"{len(cfg.classes)} classes x {cfg.instances_per_class} instances")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "sweep": cmd_sweep,
        "plots": cmd_plots,
        "validate": cmd_validate,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
