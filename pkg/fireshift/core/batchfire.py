"""Batchwise Fisher accumulation trainer.

Per epoch, batches are visited in index order. Each step estimates the batch
FIM, mixes it with the validation FIM, folds it into the global FIM with
momentum, and takes the preconditioned step theta -= eta (I + lambda I_G) g.
I_G keeps accumulating across epochs.
"""
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt

from .datasets import holdout_split, synthetic_blobs
from .errors import ContractViolation, DataError, NonFiniteError
from .fisher import (
    DiagonalFisher,
    FisherConfig,
    apply_preconditioner,
    ema_update,
    empirical_fim,
    mix_fim,
    trace_penalty,
    zero_fisher,
)
from .model import (
    Fragment,
    ModelSpec,
    accuracy,
    check_fragment,
    init_params,
    loss_and_grad,
    split_batches,
)
from .numkernel import ParamVec, Rng, as_param_vec, at_step, ensure_finite
from .shiftlab import ShiftSpec, induce_shift

logger = logging.getLogger("FisherTrainer")

TRACE_COLUMNS = [
    "step", "epoch", "batch", "loss", "grad_norm_sq",
    "precond_grad_norm_sq", "penalized_loss", "val_acc",
]
SUMMARY_COLUMNS = ["num_fragments", "method", "final_val_acc", "batch_acc_mean", "batch_acc_var"]
DEFAULT_PENALTY_GRID = (0.01, 0.05, 0.1, 0.5, 1.0)


# ----------------------------------------------------
# CONFIG + TRACE
# ----------------------------------------------------

class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    eta: PositiveFloat = 0.001
    penalty: float = Field(0.1, ge=0.0, alias="lambda")
    epochs: PositiveInt = 100
    fisher: FisherConfig = FisherConfig()
    seed: int = 0
    lambda_sweep: tuple[float, ...] = ()


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    batch: int
    loss: float
    grad_norm_sq: float
    precond_grad_norm_sq: float
    penalized_loss: float
    val_acc: float


@dataclass
class TrainTrace:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ContractViolation("trace steps must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=TRACE_COLUMNS)

    @property
    def final_val_acc(self) -> float:
        return self.records[-1].val_acc if self.records else float("nan")

    def last_epoch_val_acc(self) -> np.ndarray:
        """Validation accuracy after each batch of the final epoch."""
        if not self.records:
            return np.empty(0)
        last = self.records[-1].epoch
        return np.array([r.val_acc for r in self.records if r.epoch == last])


# ----------------------------------------------------
# TRAINING LOOP
# ----------------------------------------------------

def _validate_inputs(spec: ModelSpec, fragments: Sequence[Fragment], val: Fragment) -> list[Fragment]:
    fragments = list(fragments)
    if not fragments:
        raise DataError("training needs at least one fragment")
    for frag in fragments:
        check_fragment(spec, frag)
    check_fragment(spec, val)
    return fragments


def initial_theta(spec: ModelSpec, seed: int) -> ParamVec:
    return init_params(spec, Rng.derive(seed, "init"))


def train_fire_batchwise(
    spec: ModelSpec,
    fragments: Sequence[Fragment],
    val: Fragment,
    cfg: TrainConfig,
    theta0: ParamVec | None = None,
) -> tuple[ParamVec, TrainTrace]:
    fragments = _validate_inputs(spec, fragments, val)
    theta = initial_theta(spec, cfg.seed) if theta0 is None else as_param_vec(theta0)
    fcfg = cfg.fisher
    lam = cfg.penalty
    accumulate = lam > 0.0

    i_val = empirical_fim(spec, theta, val, fcfg) if accumulate else None
    i_global = zero_fisher(fcfg.variant_kind, spec.param_count, fcfg.rank_k)
    trace = TrainTrace()

    logger.info(
        f"🚀 Training on {len(fragments)} fragments for {cfg.epochs} epochs "
        f"(eta={cfg.eta}, lambda={lam}, fim={fcfg.variant_kind})"
    )
    step = 0
    for epoch in range(cfg.epochs):
        for b, batch in enumerate(fragments):
            refresh = fcfg.refresh_every_batches
            if accumulate and refresh and step > 0 and step % refresh == 0:
                i_val = empirical_fim(spec, theta, val, fcfg)

            with at_step(step):
                loss, grad = loss_and_grad(spec, theta, batch)
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite", step=step)

                if accumulate:
                    i_batch = empirical_fim(spec, theta, batch, fcfg)
                    i_step = mix_fim(i_batch, i_val, fcfg.mix_mu)
                    i_global = ema_update(i_global, i_step, fcfg.momentum_alpha)

                direction = apply_preconditioner(i_global, grad, lam)
                new_theta = theta - cfg.eta * direction
                ensure_finite(new_theta, "parameters", step=step)
                theta = as_param_vec(new_theta, copy=False)

            trace.append(StepRecord(
                step=step,
                epoch=epoch,
                batch=b,
                loss=loss,
                grad_norm_sq=float(grad @ grad),
                precond_grad_norm_sq=float(direction @ direction),
                penalized_loss=loss + lam * trace_penalty(i_global),
                val_acc=accuracy(spec, theta, val),
            ))
            step += 1
        logger.debug(f"epoch {epoch}: loss={trace.records[-1].loss:.6f}")

    logger.info(f"✅ Training finished after {step} steps, val_acc={trace.final_val_acc:.4f}")
    return theta, trace


def train_sgd_baseline(
    spec: ModelSpec,
    fragments: Sequence[Fragment],
    val: Fragment,
    cfg: TrainConfig,
    theta0: ParamVec | None = None,
) -> tuple[ParamVec, TrainTrace]:
    """The same loop with lambda forced to zero."""
    return train_fire_batchwise(spec, fragments, val, cfg.model_copy(update={"penalty": 0.0}), theta0)


# ----------------------------------------------------
# STEP SIZE
# ----------------------------------------------------

class StepSizeVerdict(str, Enum):
    OK = "ok"
    TOO_LARGE = "too_large"


def max_step_size(L_smooth: float, lam: float, G_bound: float) -> float:
    if L_smooth <= 0 or G_bound < 0 or lam < 0:
        raise ContractViolation("need L_smooth > 0, G_bound >= 0 and lambda >= 0")
    return 1.0 / (L_smooth * (1.0 + lam * G_bound) ** 2)


def check_step_size(L_smooth: float, lam: float, G_bound: float, eta: float) -> StepSizeVerdict:
    """eta <= 1 / (L (1 + lambda G)^2)."""
    if eta <= max_step_size(L_smooth, lam, G_bound):
        return StepSizeVerdict.OK
    return StepSizeVerdict.TOO_LARGE


# ----------------------------------------------------
# CONVERGENCE TREND
# ----------------------------------------------------

class ConvergenceConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    dim: PositiveInt = 10
    curvature_min: PositiveFloat = 1.0
    curvature_max: PositiveFloat = 4.0
    noise: PositiveFloat = 1.0
    penalty: float = Field(0.1, ge=0.0, alias="lambda")
    fisher_bound: PositiveFloat = 1.0
    momentum_alpha: float = Field(0.9, ge=0.0, lt=1.0)
    step_scale: PositiveFloat = 0.5
    horizons: tuple[PositiveInt, ...] = (100, 1000, 10000)
    seed: int = 0


@dataclass(frozen=True)
class HorizonResult:
    horizon: int
    eta: float
    step_size: str
    mean_grad_norm_sq: float
    min_grad_norm_sq: float


@dataclass(frozen=True)
class ConvergenceReport:
    horizons: list[HorizonResult]
    slope_mean: float
    slope_min: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(h) for h in self.horizons])


def _run_quadratic(cfg: ConvergenceConfig, horizon: int) -> HorizonResult:
    curvature = np.linspace(cfg.curvature_min, cfg.curvature_max, cfg.dim)
    rng = Rng.derive(cfg.seed, "convergence", horizon)
    eta = cfg.step_scale / np.sqrt(horizon)
    verdict = check_step_size(cfg.curvature_max, cfg.penalty, cfg.fisher_bound, eta)

    theta = np.ones(cfg.dim)
    i_global = zero_fisher("diagonal", cfg.dim)
    norms = np.empty(horizon)
    for t in range(horizon):
        true_grad = curvature * theta
        norms[t] = true_grad @ true_grad
        g = true_grad + cfg.noise * rng.rademacher(cfg.dim)
        # clipped squared gradients keep ||I_G|| <= fisher_bound
        i_new = DiagonalFisher(np.minimum(g * g, cfg.fisher_bound))
        i_global = ema_update(i_global, i_new, cfg.momentum_alpha)
        theta = theta - eta * apply_preconditioner(i_global, g, cfg.penalty)
    return HorizonResult(
        horizon=horizon,
        eta=float(eta),
        step_size=verdict.value,
        mean_grad_norm_sq=float(norms.mean()),
        min_grad_norm_sq=float(norms.min()),
    )


def convergence_trend(cfg: ConvergenceConfig = ConvergenceConfig()) -> ConvergenceReport:
    """Preconditioned SGD on a noisy quadratic with eta = c / sqrt(T)."""
    results = [_run_quadratic(cfg, T) for T in cfg.horizons]
    log_t = np.log10([r.horizon for r in results])
    slope_mean = np.polyfit(log_t, np.log10([r.mean_grad_norm_sq for r in results]), 1)[0]
    slope_min = np.polyfit(log_t, np.log10([r.min_grad_norm_sq for r in results]), 1)[0]
    logger.info(f"📉 Convergence slopes: mean={slope_mean:.3f}, min-so-far={slope_min:.3f}")
    return ConvergenceReport(results, float(slope_mean), float(slope_min))


# ----------------------------------------------------
# PENALTY SWEEP
# ----------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    penalty: float
    final_loss: float
    val_acc: float


def sweep_penalty(
    spec: ModelSpec,
    fragments: Sequence[Fragment],
    val: Fragment,
    cfg: TrainConfig,
    lambdas: Sequence[float] = DEFAULT_PENALTY_GRID,
) -> list[SweepRow]:
    rows = []
    theta0 = initial_theta(spec, cfg.seed)
    for lam in lambdas:
        _, trace = train_fire_batchwise(spec, fragments, val, cfg.model_copy(update={"penalty": lam}), theta0)
        rows.append(SweepRow(penalty=float(lam), final_loss=trace.records[-1].loss, val_acc=trace.final_val_acc))
        logger.info(f"🔎 lambda={lam}: val_acc={trace.final_val_acc:.4f}")
    return rows


# ----------------------------------------------------
# FRAGMENTATION SUMMARY
# ----------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    num_fragments: int
    method: str
    final_val_acc: float
    batch_acc_mean: float
    batch_acc_var: float


def summarize_trace(num_fragments: int, method: str, trace: TrainTrace) -> SummaryRow:
    per_batch = trace.last_epoch_val_acc()
    return SummaryRow(
        num_fragments=num_fragments,
        method=method,
        final_val_acc=trace.final_val_acc,
        batch_acc_mean=float(per_batch.mean()),
        batch_acc_var=float(per_batch.var()),
    )


# ----------------------------------------------------
# SHIFT MITIGATION STUDY
# ----------------------------------------------------

@dataclass(frozen=True)
class StudyRow:
    seed: int
    fire_val_acc: float
    baseline_val_acc: float
    improvement: float


@dataclass(frozen=True)
class StudyResult:
    rows: list[StudyRow]

    @property
    def mean_fire(self) -> float:
        return float(np.mean([r.fire_val_acc for r in self.rows]))

    @property
    def mean_baseline(self) -> float:
        return float(np.mean([r.baseline_val_acc for r in self.rows]))

    @property
    def win_fraction(self) -> float:
        return float(np.mean([r.improvement > 0 for r in self.rows]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])


# classes sit at different radii from the rotation origin
STUDY_CENTERS = ((1.0, 0.0), (5.0, 0.0))
STUDY_CLUSTER_STD = 0.7


def shift_mitigation_study(
    seeds: Sequence[int] = tuple(range(20)),
    n_samples: int = 2000,
    num_batches: int = 10,
    shift: ShiftSpec = ShiftSpec(kind="rotation_beta", a=2.0, b=4.0),
    spec: ModelSpec = ModelSpec(input_dim=2, num_classes=2),
    cfg: TrainConfig = TrainConfig(),
    centers: Sequence[Sequence[float]] = STUDY_CENTERS,
    cluster_std: float = STUDY_CLUSTER_STD,
) -> StudyResult:
    """Paired FIRE vs lambda=0 runs on rotated Gaussian blobs, one pair per seed.

    Both runs of a pair share data, batches and theta0; only lambda differs.
    """
    rows = []
    for seed in seeds:
        full = synthetic_blobs(n_samples, spec.input_dim, centers, cluster_std, seed=seed)
        train, val = holdout_split(full, 0.2, Rng.derive(seed, "holdout"))
        train = induce_shift(train, shift, "train", Rng.derive(seed, "shift", 0))
        val = induce_shift(val, shift, "test", Rng.derive(seed, "shift", 1))
        fragments = split_batches(train, num_batches)

        run_cfg = cfg.model_copy(update={"seed": seed})
        theta0 = initial_theta(spec, seed)
        _, fire = train_fire_batchwise(spec, fragments, val, run_cfg, theta0)
        _, base = train_sgd_baseline(spec, fragments, val, run_cfg, theta0)
        rows.append(StudyRow(
            seed=seed,
            fire_val_acc=fire.final_val_acc,
            baseline_val_acc=base.final_val_acc,
            improvement=fire.final_val_acc - base.final_val_acc,
        ))

    result = StudyResult(rows)
    logger.info(
        f"📊 Shift study over {len(rows)} seeds: FIRE {result.mean_fire:.4f} vs "
        f"baseline {result.mean_baseline:.4f}, wins {result.win_fraction:.0%}"
    )
    return result
