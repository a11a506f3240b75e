"""``voxmap`` command line: phantom cohorts, template selection,
registration, supervoxel association analysis, and map rendering.

Exit codes: 0 success, 2 partial subject failures, 1 configuration or
fatal error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import ConfigError, load_config
from .manifest import ManifestError, read_manifest
from .nifti import NiftiError, read_volume
from .pipeline import (PipelineError, run_analyze, run_register,
                       run_select_template)
from .volume import GeometryError

_FATAL = (ConfigError, ManifestError, NiftiError, PipelineError,
          GeometryError, FileNotFoundError, ValueError)


def _load(config_path):
    try:
        return load_config(config_path)
    except _FATAL as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
def main():
    """Cohort registration and supervoxel association mapping."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Pipeline config YAML (phantom section).")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Cohort output directory (default: config data_root).")
def phantom(config_path, out_dir):
    """Generate a synthetic phantom cohort with ground truth."""
    from .phantom import generate_cohort

    cfg = _load(config_path)
    if cfg.cohort_spec.n <= 0:
        raise click.ClickException("phantom cohort size n must be >= 1")
    dest = Path(out_dir) if out_dir else Path(cfg.data_root)
    try:
        manifest, _ = generate_cohort(cfg.phantom_spec, cfg.cohort_spec, dest)
    except _FATAL as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"wrote {len(manifest)} subjects under {dest}")
    click.echo(f"manifest: {dest / 'manifest.csv'}")


@main.command("select-template")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--stratify-by-sex", is_flag=True, default=False)
@click.option("--sex", type=click.Choice(["female", "male"]), default=None,
              help="Restrict to one stratum.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Directory for selection CSVs (default: manifest dir).")
def select_template_cmd(manifest_path, stratify_by_sex, sex, out_dir):
    """Pick the template subject(s) closest to the cohort middle."""
    try:
        man = read_manifest(manifest_path)
        dest = Path(out_dir) if out_dir else Path(manifest_path).parent
        chosen = run_select_template(man, stratify_by_sex, dest, sex=sex)
    except _FATAL as exc:
        raise click.ClickException(str(exc)) from exc
    for stratum, sid in chosen.items():
        click.echo(f"{stratum}: {sid}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--reference", "reference_id", required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--jobs", type=int, default=None,
              help="Subject-level parallelism (overrides config).")
@click.option("--reverse/--no-reverse", default=False,
              help="Also register reference onto each subject (for ICE).")
@click.option("--sex", type=click.Choice(["female", "male"]), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def register(manifest_path, reference_id, config_path, jobs, reverse, sex,
             out_dir):
    """Register all cohort subjects onto the reference subject."""
    cfg = _load(config_path)
    if jobs is not None:
        cfg.jobs = max(1, jobs)
    try:
        man = read_manifest(manifest_path)
        if sex:
            man = man.subset(sex=sex)
        if cfg.data_root == Path("."):
            cfg.data_root = Path(manifest_path).parent
        results = run_register(man, reference_id, cfg,
                               out_dir=Path(out_dir) if out_dir else None,
                               reverse=reverse, log=click.echo)
    except _FATAL as exc:
        raise click.ClickException(str(exc)) from exc
    ok = sum(1 for r in results if r.status == "ok")
    skipped = [r for r in results if r.status != "ok"]
    for r in skipped:
        click.echo(f"[{r.subject_id}] skipped: {r.reason}", err=True)
    click.echo(f"registered {ok}/{len(results)} subjects")
    if skipped:
        sys.exit(2)


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--reference", "reference_id", required=True)
@click.option("--covariate", default="age", show_default=True)
@click.option("--channel", type=click.Choice(["jd", "hu", "both"]),
              default="both", show_default=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--explicit-table", is_flag=True, default=False,
              help="Also write the pairwise explicit-measurement table.")
@click.option("--sex", type=click.Choice(["female", "male"]), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def analyze(manifest_path, reference_id, covariate, channel, config_path,
            explicit_table, sex, out_dir):
    """Supervoxel-wise correlation of JD / density maps vs a covariate."""
    cfg = _load(config_path)
    channels = ["jd", "hu"] if channel == "both" else [channel]
    try:
        man = read_manifest(manifest_path)
        if sex:
            man = man.subset(sex=sex)
        if cfg.data_root == Path("."):
            cfg.data_root = Path(manifest_path).parent
        run_analyze(man, reference_id, covariate, channels, cfg,
                    out_dir=Path(out_dir) if out_dir else None,
                    explicit_table=explicit_table, log=click.echo)
    except _FATAL as exc:
        raise click.ClickException(str(exc)) from exc


@main.command()
@click.option("--map", "map_path", type=click.Path(), required=True,
              help="Painted correlation NIfTI from `voxmap analyze`.")
@click.option("--template", "template_path", type=click.Path(), required=True)
@click.option("--slices", required=True,
              help="Comma-separated slice indices, e.g. 30,48,60.")
@click.option("--axis", type=click.Choice(["x", "y", "z"]), default="z",
              show_default=True)
@click.option("--map-only", is_flag=True, default=False,
              help="Black background instead of the template image.")
@click.option("--out", "out_dir", type=click.Path(), default="renders")
def render(map_path, template_path, slices, axis, map_only, out_dir):
    """Render correlation-map slices as PNG overlays."""
    from .render import render_slices
    from .volume import LabelVolume, Volume
    import numpy as np

    try:
        painted = read_volume(map_path)
        template = read_volume(template_path)
        if isinstance(template, LabelVolume):
            template = Volume(template.labels.astype(np.float32),
                              template.spacing, template.origin)
        if isinstance(painted, LabelVolume):
            raise click.ClickException(
                f"{map_path} is a label volume, not a correlation map")
        idx = [int(s) for s in slices.split(",") if s.strip()]
        written = render_slices(painted, template, idx, axis=axis,
                                out_dir=out_dir, map_only=map_only)
    except IndexError as exc:
        raise click.ClickException(str(exc)) from exc
    except _FATAL as exc:
        raise click.ClickException(str(exc)) from exc
    for p in written:
        click.echo(str(p))


if __name__ == "__main__":
    main()
