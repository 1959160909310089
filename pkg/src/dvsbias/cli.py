"""Command-line experiment runner."""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from . import harness

OUT_ROOT_VAR = "DVSBIAS_OUT"


def _default_out(scenario: str, seed: int, kind: str) -> Path:
    root = Path(os.environ.get(OUT_ROOT_VAR, "out"))
    return root / f"{Path(scenario).stem}_{kind}_seed{seed}"


@click.group()
def main():
    """Event-camera bias-control experiments."""


@main.command("run")
@click.argument("scenario", type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory.")
def run_cmd(scenario, seed, out_dir):
    """Run a scenario closed-loop and write events/telemetry/actions/report."""
    out = Path(out_dir) if out_dir else _default_out(scenario, seed, "run")
    report = harness.run(scenario, seed=seed, out_dir=out)
    _summarize(report, out)
    sys.exit(0 if report.passed else 1)


@main.command("sweep")
@click.argument("scenario", type=click.Path(exists=True))
@click.option("--param", type=click.Choice(sorted(harness.SWEEP_PARAMS)), default=None)
@click.option("--grid", default=None, help="Comma-separated tweak values.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def sweep_cmd(scenario, param, grid, seed, out_dir):
    """Sweep one tweak over a grid (controllers disabled), one run per value."""
    values = [float(v) for v in grid.split(",")] if grid else None
    out = Path(out_dir) if out_dir else _default_out(scenario, seed, "sweep")
    report = harness.sweep(scenario, param=param, grid=values, seed=seed, out_dir=out)
    _summarize(report, out)
    sys.exit(0 if report.passed else 1)


@main.command("validate")
@click.argument("scenario", type=click.Path(exists=True))
def validate_cmd(scenario):
    """Parse and resolve a scenario, reporting problems without running it."""
    try:
        scn = harness.validate(scenario)
    except Exception as e:
        click.echo(f"INVALID: {e}")
        sys.exit(1)
    click.echo(
        f"OK: {scn.name} ({scn.settings.width}x{scn.settings.height}, "
        f"{scn.settings.duration_s}s, {len(scn.schedule.directives)} directives)"
    )


def _summarize(report, out: Path) -> None:
    click.echo(
        f"{report.scenario}: {report.sim_duration_s:.1f}s simulated, "
        f"{report.n_events} events, {len(report.actions)} actions "
        f"({report.wall_seconds:.1f}s wall)"
    )
    for name, ok in report.checks.items():
        click.echo(f"  check {name}: {'PASS' if ok else 'FAIL'}")
    click.echo(f"  outputs in {out}")


if __name__ == "__main__":
    main()
