"""End-to-end command line contract via an in-process runner."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from hyperpriv.cli import ABLATE_LABELS, ABLATE_ORDER, METRIC_COLUMNS, main
from hyperpriv.cohort import load_cohort

from conftest import small_gen_config, small_train_config

TRAIN_ARTIFACTS = {
    "training_log.csv",
    "checkpoint.npz",
    "eval_report.json",
    "resolved_config.json",
    "km_pfs.csv",
    "km_os.csv",
    "manifest.json",
}


def run_cli(args):
    result = CliRunner().invoke(main, args, catch_exceptions=False)
    return result


def run_cli_allow_exit(args):
    # SystemExit from the guard is expected for failure-path tests.
    return CliRunner().invoke(main, args, catch_exceptions=True)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared cohort + config files plus one completed small training run."""
    root = tmp_path_factory.mktemp("cli")
    gen_path = root / "gen_config.json"
    gen_path.write_text(json.dumps(small_gen_config().to_dict()))
    train_path = root / "train_config.json"
    train_path.write_text(json.dumps(small_train_config().to_dict()))
    cohort_path = root / "cohort.json"
    result = run_cli(["generate", "--config", str(gen_path), "--out", str(cohort_path)])
    assert result.exit_code == 0, result.output
    train_out = root / "train_out"
    result = run_cli(
        ["train", "--cohort", str(cohort_path), "--config", str(train_path), "--out", str(train_out)]
    )
    assert result.exit_code == 0, result.output
    return {
        "root": root,
        "gen_config": gen_path,
        "train_config": train_path,
        "cohort": cohort_path,
        "train_out": train_out,
    }


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def test_generate_writes_cohort_and_summary(workspace):
    cohort = load_cohort(workspace["cohort"])
    assert cohort.n_patients == small_gen_config().n_patients


def test_generate_summary_lines(tmp_path, workspace):
    out = tmp_path / "c.json"
    result = run_cli(["generate", "--config", str(workspace["gen_config"]), "--out", str(out)])
    assert result.exit_code == 0
    assert f"{small_gen_config().n_patients} patients" in result.output
    assert "PFA" in result.output and "censor rate" in result.output


def test_generate_seed_flag_overrides_config(tmp_path, workspace):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    c = tmp_path / "c.json"
    run_cli(["generate", "--config", str(workspace["gen_config"]), "--seed", "77", "--out", str(a)])
    run_cli(["generate", "--config", str(workspace["gen_config"]), "--seed", "77", "--out", str(b)])
    run_cli(["generate", "--config", str(workspace["gen_config"]), "--seed", "78", "--out", str(c)])
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()
    assert json.loads(a.read_text())["config"]["seed"] == 77


def test_generate_rejects_invalid_config(tmp_path):
    bad = dict(small_gen_config().to_dict(), censor_rate=1.5)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    result = run_cli_allow_exit(["generate", "--config", str(path), "--out", str(tmp_path / "x.json")])
    assert result.exit_code == 2
    assert "censor_rate" in result.stderr


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def test_pretrain_artifacts_and_determinism(tmp_path, workspace):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        result = run_cli(
            ["pretrain", "--cohort", str(workspace["cohort"]),
             "--config", str(workspace["train_config"]), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert (out / "refined_cohort.json").exists()
        assert (out / "manifest.json").exists()
        lines = (out / "ssl_loss.csv").read_text().strip().split("\n")
        assert lines[0] == "epoch,loss"
        assert len(lines) == 1 + small_train_config().ssl_epochs
    assert (out_a / "refined_cohort.json").read_bytes() == (out_b / "refined_cohort.json").read_bytes()
    refined = load_cohort(out_a / "refined_cohort.json")
    original = load_cohort(workspace["cohort"])
    assert not np.array_equal(refined.mri_array(), original.mri_array())
    assert refined.mri_array().shape == original.mri_array().shape


# ---------------------------------------------------------------------------
# train (single)
# ---------------------------------------------------------------------------


def test_train_writes_full_artifact_set(workspace):
    out = workspace["train_out"]
    names = {p.name for p in out.iterdir()}
    assert TRAIN_ARTIFACTS | {"km_pfs.svg", "km_os.svg"} <= names
    log_lines = (out / "training_log.csv").read_text().strip().split("\n")
    assert log_lines[0] == "epoch,ce_group,ce_grade,ce_location,cox_pfs,cox_os,feat,logit,total"
    assert len(log_lines) == 1 + small_train_config().epochs
    report = json.loads((out / "eval_report.json").read_text())
    assert set(METRIC_COLUMNS) <= set(report)
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved == small_train_config().to_dict()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert str(workspace["cohort"]) in manifest["input_sha256"]


def test_train_rerun_is_byte_identical(tmp_path, workspace):
    out = tmp_path / "again"
    result = run_cli(
        ["train", "--cohort", str(workspace["cohort"]),
         "--config", str(workspace["train_config"]), "--out", str(out)]
    )
    assert result.exit_code == 0
    base = workspace["train_out"]
    assert (out / "eval_report.json").read_bytes() == (base / "eval_report.json").read_bytes()
    assert (out / "training_log.csv").read_bytes() == (base / "training_log.csv").read_bytes()
    assert (out / "km_os.csv").read_bytes() == (base / "km_os.csv").read_bytes()


def test_train_no_svg_flag(tmp_path, workspace):
    out = tmp_path / "nosvg"
    result = run_cli(
        ["train", "--cohort", str(workspace["cohort"]),
         "--config", str(workspace["train_config"]), "--out", str(out), "--no-svg"]
    )
    assert result.exit_code == 0
    names = {p.name for p in out.iterdir()}
    assert "km_pfs.svg" not in names and "km_os.svg" not in names
    assert "km_pfs.csv" in names


def test_train_stdout_summarizes_run(tmp_path, workspace):
    out = tmp_path / "echo"
    result = run_cli(
        ["train", "--cohort", str(workspace["cohort"]),
         "--config", str(workspace["train_config"]), "--out", str(out), "--no-svg"]
    )
    assert f"seed {small_train_config().seed} [full]" in result.output
    assert "cindex_os" in result.output


def test_train_ablation_flag_controls_config(tmp_path, workspace):
    out = tmp_path / "nokd"
    result = run_cli(
        ["train", "--cohort", str(workspace["cohort"]),
         "--config", str(workspace["train_config"]), "--ablation", "no_kd",
         "--out", str(out), "--no-svg"]
    )
    assert result.exit_code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["ablation"] == "no_kd"
    rows = (out / "training_log.csv").read_text().strip().split("\n")[1:]
    header = (out / "training_log.csv").read_text().split("\n")[0].split(",")
    feat_col, logit_col = header.index("feat"), header.index("logit")
    for row in rows:
        cells = row.split(",")
        assert float(cells[feat_col]) == 0.0
        assert float(cells[logit_col]) == 0.0


def test_train_missing_cohort_exits_2(tmp_path):
    result = run_cli_allow_exit(
        ["train", "--cohort", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 2


def test_train_divergence_exits_3_with_checkpoint(tmp_path, workspace):
    config = small_train_config(lr=1e6, epochs=30)
    config_path = tmp_path / "explode.json"
    config_path.write_text(json.dumps(config.to_dict()))
    out = tmp_path / "out"
    result = run_cli_allow_exit(
        ["train", "--cohort", str(workspace["cohort"]),
         "--config", str(config_path), "--out", str(out), "--no-svg"]
    )
    assert result.exit_code == 3
    assert "numerical abort:" in result.stderr
    assert "last good checkpoint:" in result.stderr
    assert (out / "last_good_checkpoint.npz").exists()


# ---------------------------------------------------------------------------
# train (sweep)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep") / "out"
    result = run_cli(
        ["train", "--cohort", str(workspace["cohort"]),
         "--config", str(workspace["train_config"]), "--seeds", "1..3",
         "--out", str(out), "--no-svg"]
    )
    assert result.exit_code == 0, result.output
    return out


def test_sweep_writes_per_seed_runs(sweep):
    for s in (1, 2, 3):
        seed_dir = sweep / f"seed_{s}"
        assert (seed_dir / "eval_report.json").exists()
        resolved = json.loads((seed_dir / "resolved_config.json").read_text())
        assert resolved["seed"] == s


def test_sweep_aggregate_csv(sweep):
    lines = (sweep / "aggregate.csv").read_text().strip().split("\n")
    assert lines[0] == "seed," + ",".join(METRIC_COLUMNS)
    assert len(lines) == 4
    for line, s in zip(lines[1:], (1, 2, 3)):
        cells = line.split(",")
        assert cells[0] == str(s)
        report = json.loads((sweep / f"seed_{s}" / "eval_report.json").read_text())
        for m, cell in zip(METRIC_COLUMNS, cells[1:]):
            assert float(cell) == report[m]


def test_sweep_aggregate_json(sweep):
    summary = json.loads((sweep / "aggregate.json").read_text())
    assert set(summary) == set(METRIC_COLUMNS)
    for m in METRIC_COLUMNS:
        entry = summary[m]
        assert len(entry["values"]) == 3
        assert entry["mean"] == pytest.approx(np.mean(entry["values"]))
        assert entry["sd"] == pytest.approx(np.std(entry["values"], ddof=1))


def test_sweep_rejects_bad_seed_spec(tmp_path, workspace):
    result = run_cli_allow_exit(
        ["train", "--cohort", str(workspace["cohort"]), "--seeds", "five",
         "--out", str(tmp_path / "x")]
    )
    assert result.exit_code == 2
    assert "--seeds" in result.stderr
    result = run_cli_allow_exit(
        ["train", "--cohort", str(workspace["cohort"]), "--seeds", "5..1",
         "--out", str(tmp_path / "y")]
    )
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablate_out(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate") / "out"
    config = small_train_config(epochs=4, ssl_epochs=2)
    config_path = out.parent / "config.json"
    config_path.write_text(json.dumps(config.to_dict()))
    result = run_cli(
        ["ablate", "--cohort", str(workspace["cohort"]), "--config", str(config_path),
         "--seeds", "1..2", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    return out


def test_ablate_directory_layout(ablate_out):
    for variant in ABLATE_ORDER:
        for s in (1, 2):
            assert (ablate_out / variant / f"seed_{s}" / "eval_report.json").exists()


def test_ablate_table_rows_in_fixed_order(ablate_out):
    lines = (ablate_out / "ablation.csv").read_text().strip().split("\n")
    assert lines[0] == "variant," + ",".join(METRIC_COLUMNS)
    labels = [line.split(",")[0] for line in lines[1:]]
    assert labels == [ABLATE_LABELS[v] for v in ABLATE_ORDER]
    assert labels == [
        "w/o Hypergraph", "w/o Knowledge Distillation", "w/o SSL", "Ours", "Teacher",
    ]


def test_ablate_table_means_match_runs(ablate_out):
    runs_lines = (ablate_out / "ablation_runs.csv").read_text().strip().split("\n")
    assert runs_lines[0] == "variant,seed," + ",".join(METRIC_COLUMNS)
    assert len(runs_lines) == 1 + len(ABLATE_ORDER) * 2
    table_lines = (ablate_out / "ablation.csv").read_text().strip().split("\n")[1:]
    for variant, table_line in zip(ABLATE_ORDER, table_lines):
        label = ABLATE_LABELS[variant]
        per_seed = [
            [float(c) for c in line.split(",")[2:]]
            for line in runs_lines[1:]
            if line.split(",")[0] == label
        ]
        assert len(per_seed) == 2
        means = [float(c) for c in table_line.split(",")[1:]]
        assert means == pytest.approx(np.mean(per_seed, axis=0).tolist())


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_reproduces_training_report(tmp_path, workspace):
    out = tmp_path / "eval"
    result = run_cli(
        ["evaluate", "--cohort", str(workspace["cohort"]),
         "--checkpoint", str(workspace["train_out"] / "checkpoint.npz"),
         "--out", str(out), "--no-svg"]
    )
    assert result.exit_code == 0, result.output
    assert (out / "eval_report.json").read_bytes() == (
        workspace["train_out"] / "eval_report.json"
    ).read_bytes()
    assert (out / "km_os.csv").exists()
    assert "cindex_os" in result.output


def test_evaluate_rejects_mismatched_cohort(tmp_path, workspace):
    gen_path = tmp_path / "gen.json"
    gen_path.write_text(json.dumps(small_gen_config(d_c=5).to_dict()))
    other_path = tmp_path / "other.json"
    result = run_cli(["generate", "--config", str(gen_path), "--out", str(other_path)])
    assert result.exit_code == 0
    result = run_cli_allow_exit(
        ["evaluate", "--cohort", str(other_path),
         "--checkpoint", str(workspace["train_out"] / "checkpoint.npz"),
         "--out", str(tmp_path / "eval")]
    )
    assert result.exit_code == 2
    assert "do not match" in result.stderr


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def test_plot_renders_svgs_from_report(tmp_path, workspace):
    out = tmp_path / "plots"
    result = run_cli(
        ["plot", "--report", str(workspace["train_out"] / "eval_report.json"), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    for name in ("km_pfs.svg", "km_os.svg"):
        text = (out / name).read_text()
        assert text.lstrip().startswith("<svg")
        assert "survival" in text.lower()


def test_train_svgs_match_plot_svgs(tmp_path, workspace):
    out = tmp_path / "plots"
    run_cli(["plot", "--report", str(workspace["train_out"] / "eval_report.json"), "--out", str(out)])
    assert (out / "km_os.svg").read_bytes() == (workspace["train_out"] / "km_os.svg").read_bytes()
