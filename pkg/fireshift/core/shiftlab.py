"""Covariate-shift induction and per-fragment shift diagnostics."""
import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, model_validator
from scipy import ndimage
from scipy.special import expit
from sklearn.metrics import roc_auc_score
from sklearn.preprocessing import StandardScaler

from .errors import DataError, DimensionError
from .fisher import FisherEstimate
from .model import Fragment, ModelSpec, loss_and_grad, predict_proba
from .numkernel import ParamVec, Rng, quad_form

logger = logging.getLogger("ShiftLab")

Role = Literal["train", "test"]

MIN_KEEP_FRACTION = 0.3
CLASSIFIER_EPOCHS = 500
CLASSIFIER_LR = 0.5
HOLDOUT_FRACTION = 0.3
S_CLIP = 1e-6
GAMMA_QUANTILE = 0.99

DIAGNOSTICS_COLUMNS = ["fragment_id", "gamma_hat_q", "auc", "kl_hat", "fisher_quadratic", "delta_f"]


# ----------------------------------------------------
# SHIFT SPEC
# ----------------------------------------------------

class ShiftSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["rotation_beta", "tabular_bias", "gaussian_mean"]
    a: PositiveFloat = 2.0
    b: PositiveFloat = 4.0
    strength: float = 1.0
    delta: tuple[float, ...] = ()
    swap_for_test: bool = True

    @model_validator(mode="after")
    def _delta_for_mean_shift(self):
        if self.kind == "gaussian_mean" and not self.delta:
            raise ValueError("gaussian_mean shift needs a non-empty delta")
        return self


def _rotate_points(features: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    rad = np.deg2rad(degrees)
    c, s = np.cos(rad), np.sin(rad)
    x, y = features[:, 0], features[:, 1]
    return np.column_stack([c * x - s * y, s * x + c * y])


def _rotate_images(features: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    side = math.isqrt(features.shape[1])
    if side * side != features.shape[1]:
        raise DimensionError(
            f"rotation needs 2-D points or square images, got {features.shape[1]} features"
        )
    images = features.reshape(-1, side, side)
    rotated = [
        ndimage.rotate(img, angle, reshape=False, order=0, mode="constant", cval=0.0)
        for img, angle in zip(images, degrees)
    ]
    return np.stack(rotated).reshape(features.shape[0], -1)


def _principal_scores(features: np.ndarray) -> np.ndarray:
    centered = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    # pin the SVD sign so the largest loading is positive
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    z = centered @ direction
    sd = z.std()
    return z / sd if sd > 0 else np.zeros_like(z)


def induce_shift(frag: Fragment, spec: ShiftSpec, role: Role, rng: Rng) -> Fragment:
    """Return a shifted copy of `frag` for the train or test side."""
    swapped = role == "test" and spec.swap_for_test
    shifted_id = f"{frag.id}/{role}-shift"

    if spec.kind == "rotation_beta":
        a, b = (spec.b, spec.a) if swapped else (spec.a, spec.b)
        degrees = 180.0 * rng.beta(a, b, size=frag.n)
        if frag.input_dim == 2:
            rotated = _rotate_points(frag.features, degrees)
        else:
            rotated = _rotate_images(frag.features, degrees)
        logger.debug(f"rotated {frag.id} ({role}): mean angle {degrees.mean():.1f} deg")
        return frag.with_features(rotated, id=shifted_id)

    if spec.kind == "tabular_bias":
        strength = -spec.strength if swapped else spec.strength
        keep_prob = expit(strength * _principal_scores(frag.features))
        mean_keep = keep_prob.mean()
        if mean_keep < MIN_KEEP_FRACTION:
            keep_prob = np.minimum(1.0, keep_prob * MIN_KEEP_FRACTION / mean_keep)
        keep = rng.uniform(0.0, 1.0, size=frag.n) < keep_prob
        if not keep.any():
            keep[np.argmax(keep_prob)] = True
        logger.debug(f"biased subsample of {frag.id} ({role}): kept {int(keep.sum())}/{frag.n}")
        return frag.subset(np.flatnonzero(keep), shifted_id)

    delta = np.asarray(spec.delta, dtype=np.float64)
    if delta.shape != (frag.input_dim,):
        raise DimensionError(f"mean shift of length {delta.shape[0]} on {frag.input_dim} features")
    if role == "test":
        return frag
    return frag.with_features(frag.features + delta, id=shifted_id)


# ----------------------------------------------------
# DENSITY RATIO
# ----------------------------------------------------

@dataclass(frozen=True)
class DensityRatio:
    r_hat: np.ndarray
    auc: float


def _fit_domain_classifier(x: np.ndarray, y: np.ndarray) -> tuple[ModelSpec, ParamVec]:
    spec = ModelSpec(input_dim=x.shape[1], num_classes=2)
    data = Fragment("domain-classifier", x, y)
    theta = np.zeros(spec.param_count)
    for _ in range(CLASSIFIER_EPOCHS):
        _, grad = loss_and_grad(spec, theta, data)
        theta = theta - CLASSIFIER_LR * grad
    return spec, theta


def estimate_density_ratio(train_frag: Fragment, val_frag: Fragment, rng: Rng) -> DensityRatio:
    """Balanced domain classifier; r(x) = s(x) / (1 - s(x)) on every train_frag example."""
    if train_frag.input_dim != val_frag.input_dim:
        raise DimensionError(
            f"fragments differ in feature count: {train_frag.input_dim} vs {val_frag.input_dim}"
        )

    m = min(train_frag.n, val_frag.n)
    frag_idx = np.arange(train_frag.n)
    val_idx = np.arange(val_frag.n)
    if train_frag.n > m:
        frag_idx = np.sort(rng.split("balance").choice(train_frag.n, m))
    if val_frag.n > m:
        val_idx = np.sort(rng.split("balance").choice(val_frag.n, m))

    x_frag = train_frag.features[frag_idx]
    x_val = val_frag.features[val_idx]
    union = np.vstack([x_frag, x_val])
    if np.ptp(union, axis=0).max() == 0:
        logger.warning("⚠️ Domain features are all identical; reporting auc=0.5")
        return DensityRatio(np.ones(train_frag.n), 0.5)

    scaler = StandardScaler().fit(union)

    # the same holdout positions on both sides keep the split label-symmetric
    n_hold = int(round(HOLDOUT_FRACTION * m))
    order = rng.split("holdout").permutation(m)
    hold, fit = np.sort(order[:n_hold]), np.sort(order[n_hold:])
    if n_hold == 0 or fit.size == 0:
        logger.warning(f"⚠️ Only {m} examples per domain; no holdout, reporting auc=0.5")
        hold, fit = np.array([], dtype=np.int64), np.arange(m)

    x_fit = scaler.transform(np.vstack([x_frag[fit], x_val[fit]]))
    y_fit = np.concatenate([np.ones(fit.size, dtype=np.int64), np.zeros(fit.size, dtype=np.int64)])
    spec, theta = _fit_domain_classifier(x_fit, y_fit)

    if hold.size:
        x_hold = scaler.transform(np.vstack([x_frag[hold], x_val[hold]]))
        y_hold = np.concatenate([np.ones(hold.size), np.zeros(hold.size)])
        auc = float(roc_auc_score(y_hold, predict_proba(spec, theta, x_hold)[:, 1]))
    else:
        auc = 0.5

    s = predict_proba(spec, theta, scaler.transform(train_frag.features))[:, 1]
    s = np.clip(s, S_CLIP, 1.0 - S_CLIP)
    return DensityRatio(r_hat=s / (1.0 - s), auc=auc)


# ----------------------------------------------------
# DIAGNOSTICS
# ----------------------------------------------------

@dataclass(frozen=True)
class DiagnosticsReport:
    fragment_id: str
    gamma_hat_q: float
    auc: float
    kl_hat: float
    fisher_quadratic: float
    delta_f: float


def diagnostics(
    train_frag: Fragment,
    val_frag: Fragment,
    theta_i: ParamVec,
    theta_val: ParamVec,
    i_val: FisherEstimate,
    rng: Rng,
) -> DiagnosticsReport:
    if theta_i.shape != theta_val.shape:
        raise DimensionError(f"theta shapes differ: {theta_i.shape} vs {theta_val.shape}")
    ratio = estimate_density_ratio(train_frag, val_frag, rng)
    if not np.all(ratio.r_hat > 0):
        raise DataError("density ratio estimate must be strictly positive")

    q = max(0.5 * quad_form(i_val, theta_i - theta_val), 0.0)
    report = DiagnosticsReport(
        fragment_id=train_frag.id,
        gamma_hat_q=float(np.quantile(np.abs(ratio.r_hat - 1.0), GAMMA_QUANTILE)),
        auc=ratio.auc,
        kl_hat=float(np.mean(np.log(ratio.r_hat))),
        fisher_quadratic=q,
        delta_f=math.sqrt(2.0 * q),
    )
    logger.info(
        f"🔬 {report.fragment_id}: auc={report.auc:.3f} kl_hat={report.kl_hat:.4f} "
        f"delta_F={report.delta_f:.4f}"
    )
    return report
