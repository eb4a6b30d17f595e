"""Command line entry point: generate | pretrain | train | ablate | evaluate | plot.

Every command resolves one root seed, derives all randomness from it, and
writes exactly one manifest per artifact directory.  Exit codes: 0 success,
2 usage or configuration error, 3 numerical abort (with the path of the last
good checkpoint when one could be written).
"""

import dataclasses
import functools
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from .cohort import CohortFormatError, GenConfig, generate_cohort, load_cohort, save_cohort
from .encoder import pretrain_cohort
from .metrics import EvalReport
from .plot import km_plot_svg
from .train import (
    SeveredGraphDistiller,
    TrainConfig,
    evaluate_state,
    load_checkpoint,
    load_train_config,
    prepare_training,
    save_checkpoint,
    write_history_csv,
)
from .validation import ConfigError, NumericalDivergenceError

ABLATE_ORDER = ("no_hypergraph", "no_kd", "no_ssl", "full", "teacher_eval")
ABLATE_LABELS = {
    "no_hypergraph": "w/o Hypergraph",
    "no_kd": "w/o Knowledge Distillation",
    "no_ssl": "w/o SSL",
    "full": "Ours",
    "teacher_eval": "Teacher",
}
METRIC_COLUMNS = ("acc_group", "acc_grade", "cindex_pfs", "cindex_os")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir, command, config_path, seed, inputs):
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved_seed": seed,
        "input_sha256": {str(p): _sha256(p) for p in inputs if p},
        "out_dir": str(out_dir),
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _guarded(fn):
    """Map domain errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericalDivergenceError as exc:
            click.echo(f"numerical abort: {exc}", err=True)
            if exc.checkpoint_path:
                click.echo(f"last good checkpoint: {exc.checkpoint_path}", err=True)
            sys.exit(3)
        except (ConfigError, CohortFormatError, FileNotFoundError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _parse_seeds(text: str):
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise ConfigError(f"--seeds expects 'a..b' or a single integer, got {text!r}")
        if hi_i < lo_i:
            raise ConfigError(f"--seeds range is empty: {text!r}")
        return list(range(lo_i, hi_i + 1))
    try:
        return [int(text)]
    except ValueError:
        raise ConfigError(f"--seeds expects 'a..b' or a single integer, got {text!r}")


def _worker_cap() -> int:
    raw = os.environ.get("HYPERPRIV_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"HYPERPRIV_THREADS must be an integer, got {raw!r}")


def _load_train_config(config_path) -> TrainConfig:
    return load_train_config(config_path) if config_path else TrainConfig()


@click.group()
def main():
    """Hypergraph distillation experiments on synthetic survival cohorts."""


@main.command("generate")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="cohort.json")
@_guarded
def cmd_generate(config_path, seed, out_path):
    """Generate a synthetic cohort and write it as JSON."""
    if config_path:
        config = GenConfig.from_dict(json.loads(Path(config_path).read_text()))
    else:
        config = GenConfig()
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    cohort = generate_cohort(config)
    save_cohort(cohort, out_path)
    labels = cohort.label_arrays()
    n = cohort.n_patients
    pfa = int((labels["group"] == 0).sum())
    censored = int((~labels["os_event"]).sum() + (~labels["pfs_event"]).sum())
    click.echo(f"wrote {out_path}: {n} patients, PFA {pfa} / PFB {n - pfa}")
    click.echo(
        f"events: pfs {int(labels['pfs_event'].sum())}/{n}, os {int(labels['os_event'].sum())}/{n} "
        f"(pooled censor rate {censored / (2 * n):.3f})"
    )


@main.command("pretrain")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="pretrain_out")
@_guarded
def cmd_pretrain(cohort_path, config_path, seed, out_dir):
    """Contrastively refine MRI embeddings and write the refined cohort."""
    config = _load_train_config(config_path)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    cohort = load_cohort(cohort_path)
    refined, refiner = pretrain_cohort(
        cohort,
        epochs=config.ssl_epochs,
        tau=config.ssl_tau,
        lr=config.ssl_lr,
        seed=config.seed,
        sigma_aug=config.ssl_sigma_aug,
        p_drop=config.ssl_p_drop,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cohort(refined, out / "refined_cohort.json")
    history = getattr(refiner, "loss_history_", [])
    (out / "ssl_loss.csv").write_text(
        "\n".join(["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(history)]) + "\n"
    )
    _write_manifest(out, "pretrain", config_path, config.seed, [cohort_path, config_path])
    final = f"{history[-1]:.4f}" if history else "n/a"
    click.echo(f"wrote {out / 'refined_cohort.json'} (ssl epochs {config.ssl_epochs}, final loss {final})")


def _run_single(cohort_path, config: TrainConfig, out_dir: Path, svg: bool, config_path=None):
    """One training run with its full artifact set; returns the EvalReport."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cohort = load_cohort(cohort_path)
    est = SeveredGraphDistiller(**config.to_dict())
    est.fit(cohort, abort_dir=out_dir)
    report = est.report_
    write_history_csv(est.history_, out_dir / "training_log.csv")
    save_checkpoint(est.state_, config, est.setup_.dims, out_dir / "checkpoint.npz")
    (out_dir / "eval_report.json").write_text(report.to_json())
    (out_dir / "resolved_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    _write_artifacts(report, out_dir, svg)
    _write_manifest(out_dir, "train", config_path, config.seed, [cohort_path, config_path])
    return report


def _write_artifacts(report: EvalReport, out_dir: Path, svg: bool):
    from .metrics import km_to_csv

    km_to_csv(report.pfs, out_dir / "km_pfs.csv")
    km_to_csv(report.os, out_dir / "km_os.csv")
    if svg:
        (out_dir / "km_pfs.svg").write_text(km_plot_svg(report.pfs, "Progression-free survival"))
        (out_dir / "km_os.svg").write_text(km_plot_svg(report.os, "Overall survival"))


def _sweep_job(args):
    cohort_path, config_dict, out_dir, svg = args
    config = TrainConfig.from_dict(config_dict)
    report = _run_single(cohort_path, config, Path(out_dir), svg)
    return config.seed, config.ablation, report.to_dict()


def _run_sweep(jobs):
    """Run (cohort_path, config_dict, out_dir, svg) jobs, possibly in parallel."""
    workers = min(_worker_cap(), len(jobs))
    if workers <= 1:
        return [_sweep_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_job, jobs))


def _aggregate_rows(results):
    """Per-seed metric rows and mean/sd summary from (seed, ablation, report) tuples."""
    rows = []
    for seed, ablation, report in results:
        row = {"seed": seed, "ablation": ablation}
        row.update({m: report[m] for m in METRIC_COLUMNS})
        rows.append(row)
    summary = {}
    for m in METRIC_COLUMNS:
        values = np.array([r[m] for r in rows], dtype=float)
        summary[m] = {
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
            "values": values.tolist(),
        }
    return rows, summary


@main.command("train")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--seeds", "seeds_spec", type=str, default=None, help="Seed sweep, e.g. 1..5.")
@click.option("--ablation", type=click.Choice(ABLATE_ORDER), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="train_out")
@click.option("--no-svg", is_flag=True, default=False, help="Skip SVG rendering.")
@_guarded
def cmd_train(cohort_path, config_path, seed, seeds_spec, ablation, out_dir, no_svg):
    """Train on a cohort; with --seeds, sweep and aggregate."""
    config = _load_train_config(config_path)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    if ablation is not None:
        config = dataclasses.replace(config, ablation=ablation)
    config.validate()
    out = Path(out_dir)
    svg = not no_svg

    if seeds_spec is None:
        report = _run_single(cohort_path, config, out, svg, config_path)
        click.echo(
            f"seed {config.seed} [{config.ablation}]: "
            f"acc_group {report.acc_group:.3f}, acc_grade {report.acc_grade:.3f}, "
            f"cindex_pfs {report.cindex_pfs:.4f}, cindex_os {report.cindex_os:.4f}"
        )
        return

    seeds = _parse_seeds(seeds_spec)
    jobs = [
        (
            cohort_path,
            dataclasses.replace(config, seed=s).to_dict(),
            str(out / f"seed_{s}"),
            svg,
        )
        for s in seeds
    ]
    out.mkdir(parents=True, exist_ok=True)
    results = _run_sweep(jobs)
    rows, summary = _aggregate_rows(results)
    lines = ["seed," + ",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(r["seed"])] + [repr(r[m]) for m in METRIC_COLUMNS]))
    (out / "aggregate.csv").write_text("\n".join(lines) + "\n")
    (out / "aggregate.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_manifest(out, "train-sweep", config_path, seeds, [cohort_path, config_path])
    for m in METRIC_COLUMNS:
        s = summary[m]
        click.echo(f"{m}: {s['mean']:.4f} ± {s['sd']:.4f}")


@main.command("ablate")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seeds", "seeds_spec", type=str, default=None, help="Seed sweep, e.g. 1..5.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="ablate_out")
@click.option("--no-svg", is_flag=True, default=True, help="Skip SVG rendering (default).")
@_guarded
def cmd_ablate(cohort_path, config_path, seeds_spec, out_dir, no_svg):
    """Run every ablation variant across seeds and tabulate the results."""
    config = _load_train_config(config_path)
    config.validate()
    seeds = _parse_seeds(seeds_spec) if seeds_spec else [config.seed]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [
        (
            cohort_path,
            dataclasses.replace(config, seed=s, ablation=variant).to_dict(),
            str(out / variant / f"seed_{s}"),
            not no_svg,
        )
        for variant in ABLATE_ORDER
        for s in seeds
    ]
    results = _run_sweep(jobs)

    by_variant = {v: [] for v in ABLATE_ORDER}
    for seed, variant, report in results:
        by_variant[variant].append((seed, report))

    table_lines = ["variant," + ",".join(METRIC_COLUMNS)]
    runs_lines = ["variant,seed," + ",".join(METRIC_COLUMNS)]
    for variant in ABLATE_ORDER:
        runs = by_variant[variant]
        means = {m: float(np.mean([rep[m] for _, rep in runs])) for m in METRIC_COLUMNS}
        table_lines.append(
            ",".join([ABLATE_LABELS[variant]] + [repr(means[m]) for m in METRIC_COLUMNS])
        )
        for seed, rep in runs:
            runs_lines.append(
                ",".join([ABLATE_LABELS[variant], str(seed)] + [repr(rep[m]) for m in METRIC_COLUMNS])
            )
        click.echo(
            f"{ABLATE_LABELS[variant]:>28}: "
            + ", ".join(f"{m} {means[m]:.4f}" for m in METRIC_COLUMNS)
        )
    (out / "ablation.csv").write_text("\n".join(table_lines) + "\n")
    (out / "ablation_runs.csv").write_text("\n".join(runs_lines) + "\n")
    _write_manifest(out, "ablate", config_path, seeds, [cohort_path, config_path])


@main.command("evaluate")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="evaluate_out")
@click.option("--no-svg", is_flag=True, default=False, help="Skip SVG rendering.")
@_guarded
def cmd_evaluate(cohort_path, checkpoint_path, out_dir, no_svg):
    """Re-score a saved checkpoint against a cohort without training."""
    state, config, dims = load_checkpoint(checkpoint_path)
    cohort = load_cohort(cohort_path)
    setup = prepare_training(cohort, config)
    if setup.dims != dims:
        raise ConfigError(
            f"checkpoint dims {dims.to_dict()} do not match cohort-derived dims {setup.dims.to_dict()}"
        )
    report = evaluate_state(state, setup, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json())
    _write_artifacts(report, out, not no_svg)
    _write_manifest(out, "evaluate", None, config.seed, [cohort_path, checkpoint_path])
    click.echo(
        f"acc_group {report.acc_group:.3f}, acc_grade {report.acc_grade:.3f}, "
        f"cindex_pfs {report.cindex_pfs:.4f}, cindex_os {report.cindex_os:.4f}"
    )


@main.command("plot")
@click.option("--report", "report_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="plot_out")
@_guarded
def cmd_plot(report_path, out_dir):
    """Render KM SVG curves from a saved EvalReport."""
    report = EvalReport.from_json(Path(report_path).read_text())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "km_pfs.svg").write_text(km_plot_svg(report.pfs, "Progression-free survival"))
    (out / "km_os.svg").write_text(km_plot_svg(report.os, "Overall survival"))
    _write_manifest(out, "plot", None, None, [report_path])
    click.echo(f"wrote {out / 'km_pfs.svg'} and {out / 'km_os.svg'}")


if __name__ == "__main__":
    main()
