import logging
from pathlib import Path

from .. import __version__
from .batchfire import (
    SUMMARY_COLUMNS,
    TrainConfig,
    convergence_trend,
    initial_theta,
    summarize_trace,
    sweep_penalty,
    train_fire_batchwise,
    train_sgd_baseline,
)
from .bounds import run_theory_suite
from .config import ExperimentConfig
from .datasets import build_dataset, load_csv_pair
from .errors import ConfigError, FireError, StorageError
from .fedsim import comm_cost_report, comm_frame, run_federated
from .fisher import empirical_fim
from .model import Fragment, ModelSpec, make_folds, split_batches
from .numkernel import Rng
from .reporting import records_frame, write_frame, write_manifest
from .shiftlab import DIAGNOSTICS_COLUMNS, diagnostics, induce_shift

logger = logging.getLogger("Runner")


# ----------------------------------------------------
# DATA
# ----------------------------------------------------

def _prepare_data(config: ExperimentConfig) -> tuple[Fragment, Fragment]:
    train, val = build_dataset(config.dataset, config.seed)
    if config.shift is not None:
        train = induce_shift(train, config.shift, "train", Rng.derive(config.seed, "shift", 0))
        val = induce_shift(val, config.shift, "test", Rng.derive(config.seed, "shift", 1))

    spec = config.model
    if train.input_dim != spec.input_dim:
        raise ConfigError(
            f"model.input_dim = {spec.input_dim} but the dataset has {train.input_dim} features"
        )
    top_label = int(max(train.labels.max(), val.labels.max()))
    if top_label >= spec.num_classes:
        raise ConfigError(f"model.num_classes = {spec.num_classes} but the dataset has label {top_label}")
    return train, val


def _fragments(config: ExperimentConfig, train: Fragment, count: int) -> list[Fragment]:
    if config.mode == "folds":
        return make_folds(train, count, Rng.derive(config.seed, "folds"))
    return split_batches(train, count)


# ----------------------------------------------------
# MODES
# ----------------------------------------------------

def _run_batch(config: ExperimentConfig, out: Path) -> list[Path]:
    """FIRE and the same-seed baseline for every fragment count.

    A single count writes trace.csv and trace_baseline.csv; a list suffixes
    both with the count. summary.csv always holds one row per count and method.
    """
    train, val = _prepare_data(config)
    spec, cfg = config.model, config.train
    theta0 = initial_theta(spec, cfg.seed)
    counts = config.fragment_counts

    written, summary = [], []
    for count in counts:
        suffix = "" if len(counts) == 1 else f"_{count}"
        fragments = _fragments(config, train, count)
        _, trace = train_fire_batchwise(spec, fragments, val, cfg, theta0)
        _, baseline = train_sgd_baseline(spec, fragments, val, cfg, theta0)
        written.append(write_frame(trace.to_frame(), out / f"trace{suffix}.csv"))
        written.append(write_frame(baseline.to_frame(), out / f"trace_baseline{suffix}.csv"))
        summary += [summarize_trace(count, "fire", trace), summarize_trace(count, "baseline", baseline)]
        logger.info(
            f"📊 {count} fragments: fire={trace.final_val_acc:.4f}, baseline={baseline.final_val_acc:.4f}"
        )
        if cfg.lambda_sweep:
            rows = sweep_penalty(spec, fragments, val, cfg, cfg.lambda_sweep)
            written.append(write_frame(records_frame(rows), out / f"sweep{suffix}.csv"))
    written.append(write_frame(records_frame(summary, SUMMARY_COLUMNS), out / "summary.csv"))
    return written


def _run_federated(config: ExperimentConfig, out: Path) -> list[Path]:
    train, val = _prepare_data(config)
    result = run_federated(config.model, train, val, config.fed)
    report = comm_cost_report(result.server, config.model.param_count, config.fed)
    logger.info(
        f"📡 {report.bytes_per_client_round:.0f} bytes per client-round, "
        f"{report.relative_to_fedavg:.3f}x FedAvg"
    )
    return [
        write_frame(result.rounds_frame(), out / "rounds.csv"),
        write_frame(comm_frame(result.server), out / "comm.csv"),
    ]


def _run_diagnostics(config: ExperimentConfig, out: Path) -> list[Path]:
    train, val = _prepare_data(config)
    spec, cfg = config.model, config.train
    theta0 = initial_theta(spec, cfg.seed)
    theta_val, _ = train_sgd_baseline(spec, [val], val, cfg, theta0)
    i_val = empirical_fim(spec, theta_val, val, cfg.fisher)

    reports = []
    for i, frag in enumerate(_fragments(config, train, config.num_fragments)):
        theta_i, _ = train_sgd_baseline(spec, [frag], val, cfg, theta0)
        reports.append(diagnostics(frag, val, theta_i, theta_val, i_val, Rng.derive(config.seed, "diagnostics", i)))
    return [write_frame(records_frame(reports, DIAGNOSTICS_COLUMNS), out / "diagnostics.csv")]


def _run_theory(config: ExperimentConfig, out: Path) -> list[Path]:
    frame = run_theory_suite(config.theory.trials, config.seed, config.theory.workers)
    written = [write_frame(frame, out / "theory.csv")]
    if config.theory.convergence is not None:
        report = convergence_trend(config.theory.convergence)
        written.append(write_frame(report.to_frame(), out / "convergence.csv"))
    return written


_MODES = {
    "batch": _run_batch,
    "folds": _run_batch,
    "federated": _run_federated,
    "diagnostics": _run_diagnostics,
    "verify_theory": _run_theory,
}


# ----------------------------------------------------
# ENTRY
# ----------------------------------------------------

def execute(config: ExperimentConfig) -> list[Path]:
    """Run the configured mode and write its CSVs plus manifest.txt."""
    out = Path(config.output_dir)
    logger.info(f"🚀 Mode {config.mode} (seed={config.seed}) -> {out}")
    written = _MODES[config.mode](config, out)
    header = {"fireshift version": __version__, "seed": config.seed}
    written.append(write_manifest(config.resolved(), header, out / "manifest.txt"))
    logger.info(f"✅ Run complete, {len(written)} files written")
    return written


def run(config: ExperimentConfig) -> int:
    """Exit code: 0 on success, else the error category (1 config, 2 data, 3 numeric, 4 io)."""
    try:
        execute(config)
    except FireError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"❌ I/O failure: {e}")
        return StorageError.exit_code
    return 0


def diagnose_files(
    train_path: str | Path,
    val_path: str | Path,
    label_column: str,
    output_dir: str | Path,
    seed: int = 0,
    cfg: TrainConfig | None = None,
) -> Path:
    """Diagnostics for one CSV fragment against a CSV validation set, linear softmax model."""
    frag, val = load_csv_pair(train_path, val_path, label_column)
    cfg = cfg or TrainConfig(eta=0.1, epochs=200, seed=seed)
    num_classes = max(2, int(max(frag.labels.max(), val.labels.max())) + 1)
    spec = ModelSpec(input_dim=frag.input_dim, num_classes=num_classes)

    theta0 = initial_theta(spec, cfg.seed)
    theta_val, _ = train_sgd_baseline(spec, [val], val, cfg, theta0)
    theta_i, _ = train_sgd_baseline(spec, [frag], val, cfg, theta0)
    i_val = empirical_fim(spec, theta_val, val, cfg.fisher)
    report = diagnostics(frag, val, theta_i, theta_val, i_val, Rng.derive(seed, "diagnostics", 0))
    return write_frame(records_frame([report], DIAGNOSTICS_COLUMNS), Path(output_dir) / "diagnostics.csv")
