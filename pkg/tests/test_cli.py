import pandas as pd
import pytest

from fireshift.cli import build_parser, main
from fireshift.core.batchfire import SUMMARY_COLUMNS, TRACE_COLUMNS
from fireshift.core.datasets import synthetic_blobs, write_csv_dataset
from fireshift.core.fedsim import COMM_COLUMNS, ROUND_COLUMNS
from fireshift.core.shiftlab import DIAGNOSTICS_COLUMNS

BATCH_CONFIG = """
mode = batch
seed = 3
output_dir = "{out}"
num_fragments = 4
dataset.n_samples = 120
shift.kind = rotation_beta
train.eta = 0.05
train.epochs = 3
"""


def _config(tmp_path, body: str, name: str = "exp.cfg") -> str:
    path = tmp_path / name
    path.write_text(body.format(out=tmp_path / "out"))
    return str(path)


def _snapshot(directory) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


# ----------------------------------------------------
# RUN
# ----------------------------------------------------

def test_batch_run_writes_trace_and_manifest(tmp_path):
    assert main(["run", _config(tmp_path, BATCH_CONFIG)]) == 0
    out = tmp_path / "out"
    trace = pd.read_csv(out / "trace.csv")
    assert list(trace.columns) == TRACE_COLUMNS
    assert len(trace) == 12
    manifest = (out / "manifest.txt").read_text()
    assert "# seed: 3" in manifest
    assert "train.lambda = 0.1" in manifest


def test_batch_run_writes_same_seed_baseline(tmp_path):
    assert main(["run", _config(tmp_path, BATCH_CONFIG)]) == 0
    out = tmp_path / "out"
    fire = pd.read_csv(out / "trace.csv")
    baseline = pd.read_csv(out / "trace_baseline.csv")
    assert list(baseline.columns) == TRACE_COLUMNS
    assert len(baseline) == len(fire)
    # same theta0 and first batch, so the first loss agrees
    assert baseline["loss"][0] == fire["loss"][0]
    assert (baseline["penalized_loss"] == baseline["loss"]).all()

    summary = pd.read_csv(out / "summary.csv")
    assert list(summary.columns) == SUMMARY_COLUMNS
    assert list(summary["method"]) == ["fire", "baseline"]
    assert summary["final_val_acc"][0] == pytest.approx(fire["val_acc"].iloc[-1])
    assert summary["final_val_acc"][1] == pytest.approx(baseline["val_acc"].iloc[-1])


def test_batch_run_over_several_fragment_counts(tmp_path):
    body = BATCH_CONFIG.replace("num_fragments = 4", "num_fragments = [2, 4]")
    assert main(["run", _config(tmp_path, body)]) == 0
    out = tmp_path / "out"
    assert len(pd.read_csv(out / "trace_2.csv")) == 6
    assert len(pd.read_csv(out / "trace_baseline_2.csv")) == 6
    fire4 = pd.read_csv(out / "trace_4.csv")
    assert len(fire4) == 12
    assert not (out / "trace.csv").exists()

    summary = pd.read_csv(out / "summary.csv")
    assert list(summary["num_fragments"]) == [2, 2, 4, 4]
    assert list(summary["method"]) == ["fire", "baseline"] * 2
    last_epoch = fire4[fire4["epoch"] == 2]["val_acc"]
    assert len(last_epoch) == 4
    assert summary["batch_acc_mean"][2] == pytest.approx(last_epoch.mean())
    assert summary["batch_acc_var"][2] == pytest.approx(last_epoch.var(ddof=0))
    assert "num_fragments = [2, 4]" in (out / "manifest.txt").read_text()


def test_runs_are_byte_identical(tmp_path):
    cfg = _config(tmp_path, BATCH_CONFIG + "train.lambda_sweep = [0.0, 0.5]\n")
    assert main(["run", cfg]) == 0
    first = _snapshot(tmp_path / "out")
    assert main(["run", cfg]) == 0
    assert _snapshot(tmp_path / "out") == first
    assert set(first) == {"trace.csv", "trace_baseline.csv", "sweep.csv", "summary.csv", "manifest.txt"}


def test_folds_mode(tmp_path):
    assert main(["run", _config(tmp_path, BATCH_CONFIG.replace("mode = batch", "mode = folds"))]) == 0
    assert len(pd.read_csv(tmp_path / "out" / "trace.csv")) == 12


def test_federated_run(tmp_path):
    body = """
mode = federated
output_dir = "{out}"
dataset.n_samples = 90
fed.num_clients = 3
fed.rounds = 2
fed.eta = 0.05
fed.fim_exchange_period = 1
"""
    assert main(["run", _config(tmp_path, body)]) == 0
    rounds = pd.read_csv(tmp_path / "out" / "rounds.csv")
    comm = pd.read_csv(tmp_path / "out" / "comm.csv")
    assert list(rounds.columns) == ROUND_COLUMNS
    assert len(rounds) == 2
    assert list(comm.columns) == COMM_COLUMNS


def test_diagnostics_run(tmp_path):
    body = """
mode = diagnostics
output_dir = "{out}"
num_fragments = 2
dataset.n_samples = 200
shift.kind = rotation_beta
train.eta = 0.1
train.epochs = 5
"""
    assert main(["run", _config(tmp_path, body)]) == 0
    frame = pd.read_csv(tmp_path / "out" / "diagnostics.csv")
    assert list(frame.columns) == DIAGNOSTICS_COLUMNS
    assert len(frame) == 2
    assert (frame["delta_f"] >= 0).all()


def test_verify_theory_command(tmp_path):
    out = tmp_path / "theory"
    assert main(["verify-theory", "--trials", "300", "--seed", "2", "--output-dir", str(out)]) == 0
    theory = pd.read_csv(out / "theory.csv")
    assert len(theory) == 300
    assert theory["holds"].all()
    assert len(pd.read_csv(out / "convergence.csv")) == 3
    manifest = (out / "manifest.txt").read_text()
    assert "theory.convergence.seed = 2" in manifest
    assert "theory.convergence.horizons = [100, 1000, 10000]" in manifest


def test_diagnose_command(tmp_path):
    train = write_csv_dataset(synthetic_blobs(120, seed=1), tmp_path / "train.csv", "y")
    val = write_csv_dataset(synthetic_blobs(80, seed=2), tmp_path / "val.csv", "y")
    out = tmp_path / "diag"
    assert main(["diagnose", str(train), str(val), "--label", "y", "--output-dir", str(out)]) == 0
    frame = pd.read_csv(out / "diagnostics.csv")
    assert len(frame) == 1
    assert 0.0 <= frame["auc"].iloc[0] <= 1.0


# ----------------------------------------------------
# EXIT CODES
# ----------------------------------------------------

def test_config_error_exit_code(tmp_path):
    assert main(["run", _config(tmp_path, "seed = 1\n")]) == 1


def test_model_mismatch_is_config_error(tmp_path):
    assert main(["run", _config(tmp_path, BATCH_CONFIG + "model.input_dim = 3\n")]) == 1


def test_missing_config_exit_code(tmp_path):
    assert main(["run", str(tmp_path / "absent.cfg")]) == 4


def test_bad_csv_exit_code(tmp_path):
    data = tmp_path / "bad.csv"
    data.write_text("x0,x1,label\n1,oops,a\n2,3,b\n")
    body = f'mode = batch\noutput_dir = "{{out}}"\ndataset.kind = csv\ndataset.path = "{data}"\n'
    assert main(["run", _config(tmp_path, body)]) == 2


def test_missing_csv_exit_code(tmp_path):
    body = f'mode = batch\noutput_dir = "{{out}}"\ndataset.kind = csv\ndataset.path = "{tmp_path / "gone.csv"}"\n'
    assert main(["run", _config(tmp_path, body)]) == 4


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["--version"])
    assert info.value.code == 0
    assert "fire" in capsys.readouterr().out
