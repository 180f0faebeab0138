"""Command-line front door: per-site steps, aggregation, and simulation.

Exit codes: 0 success, 2 validation/usage error, 3 numerical non-convergence.
"""

from __future__ import annotations

import json
import os
import pathlib
import sys

import click
import numpy as np

from .data import Basis, ParseError, ValidationError, load_site_csv
from .federation import (
    Broadcast,
    FederatedRun,
    ProtocolError,
    canonical_payload_bytes,
    make_envelope,
    read_envelope,
    verify_envelope,
    write_envelope,
)
from .pipeline import PipelineConfig, source_site_bundle, target_site_bundle
from .simulate import SETTINGS, SimConfig, run_study

EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3


def _seed_option(seed):
    if seed is not None:
        return seed
    env = os.environ.get("FACE_SEED")
    return int(env) if env else 0


@click.group()
def main():
    """Federated adaptive estimation of target average treatment effects."""


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--role", required=True, type=click.Choice(["target", "source"]))
@click.option("--broadcast", "broadcast_path", type=click.Path(exists=True, dir_okay=False),
              help="Target broadcast file (required for source sites).")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--sigma-method", type=click.Choice(["influence", "bootstrap"]), default="influence")
@click.option("--bootstrap-reps", type=int, default=200)
@click.option("--no-cv", is_flag=True, help="Skip the train/validation half summaries.")
@click.option("--seed", type=int, default=None, help="Master seed (default: FACE_SEED or 0).")
def site(data_path, role, broadcast_path, out_path, sigma_method, bootstrap_reps, no_cv, seed):
    """Run Step 1 (target) or Step 2 (source) for one site and write its
    summary envelope.  A target run also prints its broadcast contribution."""
    from .federation import _source_payload, _target_payload

    if role == "source" and broadcast_path is None:
        raise click.UsageError("source sites require --broadcast")
    try:
        data = load_site_csv(data_path, role=role)
        basis = Basis.identity(data.p)
        cfg = PipelineConfig(sigma_method=sigma_method, bootstrap_reps=bootstrap_reps,
                             cv=not no_cv, seed=_seed_option(seed))
        if role == "target":
            bundle = target_site_bundle(data, basis, cfg)
            payload = _target_payload(bundle)
            phase = "target_summary"
        else:
            broadcast = Broadcast.from_dict(
                verify_envelope(read_envelope(broadcast_path), "target_broadcast")
            )
            bundle = source_site_bundle(data, broadcast, basis, cfg)
            payload = _source_payload(bundle)
            phase = "source_summary"
            if not bundle.summary.usable:
                write_envelope(out_path, make_envelope(data.site_id, phase, payload))
                click.echo(f"site {data.site_id}: density ratio did not converge; "
                           "summary marked unusable", err=True)
                sys.exit(EXIT_NONCONVERGENCE)
    except (ParseError, ValidationError, ProtocolError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    write_envelope(out_path, make_envelope(data.site_id, phase, payload))
    if role == "target":
        contribution = {"site_id": data.site_id, "n": data.n,
                        "psi_bar": bundle.summary.psi_bar.tolist()}
        click.echo(json.dumps(contribution, sort_keys=True))
    else:
        click.echo(f"wrote {out_path}")


@main.command()
@click.option("--run-dir", required=True, type=click.Path(file_okay=False))
@click.option("--lambda", "lambda_spec", default="cv", show_default=True,
              help="'cv', a nonnegative number, or 'default' for N^(1/3).")
@click.option("--grid-file", type=click.Path(exists=True, dir_okay=False),
              help="JSON list of lambda values for cv.")
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Result file (default: <run-dir>/result.json).")
def aggregate(run_dir, lambda_spec, grid_file, alpha, out_path):
    """Step 3: read summary envelopes from a run directory, solve the
    penalized aggregation, and print the estimate, variance, CI, and weights."""
    run_dir = pathlib.Path(run_dir)
    if not run_dir.is_dir() or not list(run_dir.glob("site_*.summary.json")):
        click.echo(f"error: no site summaries in {run_dir}", err=True)
        sys.exit(EXIT_VALIDATION)
    if lambda_spec == "default":
        lam = None
    elif lambda_spec == "cv":
        lam = "cv"
    else:
        try:
            lam = float(lambda_spec)
        except ValueError:
            raise click.UsageError(f"--lambda must be 'cv', 'default', or a number, got {lambda_spec!r}")
    grid = None
    if grid_file is not None:
        with open(grid_file, encoding="utf-8") as fh:
            grid = json.load(fh)
    try:
        run = FederatedRun(run_dir)
        result = run.leading_phase(lambda_spec=lam, lambda_grid=grid, alpha=alpha)
    except (ValidationError, ProtocolError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    if out_path is not None and pathlib.Path(out_path) != run.result_path:
        document = {"protocol_version": "face/1", "result": result.to_dict()}
        with open(out_path, "wb") as fh:
            fh.write(canonical_payload_bytes(document))
    click.echo(f"delta_face        {result.delta_face:.6f}")
    click.echo(f"v_hat             {result.v_hat:.6f}")
    click.echo(f"ci                [{result.ci[0]:.6f}, {result.ci[1]:.6f}]")
    click.echo(f"lambda_used       {result.lambda_used:.6g}")
    click.echo(f"selected sites    {sorted(result.selected) or '(none)'}")
    click.echo(f"{'site':<12s} {'eta':>12s}")
    for sid, e in zip(result.site_ids, result.eta):
        click.echo(f"{sid:<12s} {e:>12.6f}")


@main.command()
@click.option("--setting", required=True)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--p", type=int, default=10, show_default=True)
@click.option("--n-target", type=int, default=None, help="Target-site sample size.")
@click.option("--reps", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=None, help="Master seed (default: FACE_SEED or 0).")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--sigma-method", type=click.Choice(["influence", "bootstrap"]), default="bootstrap",
              show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def simulate(setting, k, p, n_target, reps, seed, jobs, sigma_method, out_dir):
    """Replication study for one setting/K; writes report.json and report.txt."""
    if setting not in SETTINGS:
        raise click.UsageError(f"--setting must be one of {', '.join(SETTINGS)}")
    kwargs = {}
    if n_target is not None:
        kwargs["n_target"] = n_target
    try:
        config = SimConfig(setting=setting, k=k, p=p, seed=_seed_option(seed),
                           replications=reps, sigma_method=sigma_method, **kwargs)
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(done, total):
        if done % 50 == 0 or done == total:
            click.echo(f"  {done}/{total} replications", err=True)

    report = run_study(config, jobs=jobs, progress=progress)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    table = report.format_table()
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)


if __name__ == "__main__":
    main()
