"""Command-line interface.

Exit codes: 0 success, 1 invalid configuration or failed run, 2 usage error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .atomic_model import ConfigurationError
from .config import load_config


def _load(path, **overrides):
    try:
        cfg = load_config(path)
        clean = {k: v for k, v in overrides.items() if v is not None}
        return cfg.with_overrides(**clean) if clean else cfg
    except ConfigurationError as exc:
        click.echo(f"invalid configuration: {exc}", err=True)
        sys.exit(1)


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def cli(verbose):
    """Stochastic Maxwell-Bloch simulator for x-ray emission from a pumped copper medium."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def validate(config_path):
    """Check a configuration file and print its resolved form."""
    from .config import format_config

    cfg = _load(config_path)
    click.echo(format_config(cfg), nl=False)
    click.echo(f"# config hash {cfg.config_hash()}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trajectories", type=int, help="Number of trajectories (overrides run.trajectories).")
@click.option("--seed", type=int, help="Master seed (overrides run.seed).")
@click.option("--first-trajectory", type=int, help="Id of the first trajectory (overrides run.first_trajectory).")
@click.option("--mode", type=click.Choice(["full", "spontaneous", "pump-only", "deterministic"]))
@click.option("--workers", type=int, help="Worker processes (capped by SFX_THREADS).")
@click.option("--output", type=click.Path(file_okay=False), help="Output directory (overrides output.path).")
def run(config_path, trajectories, seed, first_trajectory, mode, workers, output):
    """Integrate an ensemble of trajectories and write the observables."""
    from .ensemble_runner import DivergenceError, run as run_ensemble

    cfg = _load(config_path, **{"run.trajectories": trajectories, "run.seed": seed,
                                "run.first_trajectory": first_trajectory, "run.mode": mode,
                                "run.workers": workers})
    out = Path(output) if output else cfg.resolve_path("output.path")
    try:
        result = run_ensemble(cfg, output=out)
    except DivergenceError as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(1)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(1)
    m = result.manifest
    click.echo(f"{m['trajectories']} trajectories ({result.accumulator.divergent} divergent) "
               f"in {m['wall_seconds']:.1f} s -> {out}")


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--output", required=True, type=click.Path(file_okay=False))
def merge(inputs, output):
    """Merge partial output directories produced with the same configuration."""
    from .ensemble_runner import merge_outputs

    try:
        acc, manifest = merge_outputs(inputs, output)
    except (ValueError, FileNotFoundError) as exc:
        click.echo(f"merge failed: {exc}", err=True)
        sys.exit(1)
    click.echo(f"merged {len(inputs)} outputs, {manifest.get('trajectories', 0)} trajectories -> {output}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), help="Directory for the oracle arrays.")
def oracle(config_path, output):
    """Analytic spontaneous-emission prediction from the field-free kinetics."""
    from .ensemble_runner import run_oracle, write_oracle

    cfg = _load(config_path)
    out = Path(output) if output else cfg.resolve_path("output.path")
    result = run_oracle(cfg)
    write_oracle(out, cfg, result)
    exit_plane = result.photon_number[-1]
    click.echo(f"oracle photon number at exit: {exit_plane[0]:.6g} (s=-1), {exit_plane[1]:.6g} (s=+1) -> {out}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="sfx", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        return 1
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
