"""Numerical checks of the Fisher-surrogate KL bounds on analytic families.

Families:
  bernoulli           theta = (p,), outcome probabilities (p, 1 - p)
  categorical         theta = first k-1 outcome probabilities, last = 1 - sum
  gaussian_fixed_var  theta = mean vector, unit variance

The conditional KL is KL(p(.; theta_val) || p(.; theta_i)), expanded around
theta_val where its Hessian is the Fisher information F(theta_val).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from scipy.special import rel_entr, xlogy

from .errors import ContractViolation, DataError, DimensionError
from .numkernel import Rng
from .settings import worker_count

logger = logging.getLogger("Bounds")

Family = Literal["bernoulli", "categorical", "gaussian_fixed_var"]

SEGMENT_POINTS = 10_000
CONSTANT_INFLATION = 1.01
GAUSSIAN_SCORE_RADIUS = 8.0
HOLDS_TOL = 1e-12
MEAN_TOL = 1e-9

MIN_PROB = 0.02
MAX_DELTA = 0.1
MAX_GAMMA = 0.5


# ----------------------------------------------------
# FAMILIES
# ----------------------------------------------------

def _as_theta(values) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if theta.ndim != 1:
        raise DimensionError(f"family parameters must be a vector, got shape {theta.shape}")
    return theta


def _probs(thetas: np.ndarray) -> np.ndarray:
    """Outcome probabilities for each row of (P, k-1) mean parameters."""
    return np.concatenate([thetas, 1.0 - thetas.sum(axis=-1, keepdims=True)], axis=-1)


def _outcome_directions(m: int) -> np.ndarray:
    """Rows u_j = d pi_j / d theta: e_j for the free outcomes, -1 for the last."""
    return np.vstack([np.eye(m), -np.ones((1, m))])


def _check_family(family: str, theta: np.ndarray) -> None:
    if family == "gaussian_fixed_var":
        return
    if family == "bernoulli" and theta.shape != (1,):
        raise DimensionError(f"bernoulli takes one parameter, got {theta.shape[0]}")
    if family not in ("bernoulli", "categorical"):
        raise DataError(f"unknown family {family!r}")
    pi = _probs(theta)
    if np.any(pi <= 0.0):
        raise DataError(f"{family} parameters {theta} lie outside the open simplex")


def conditional_kl(family: Family, theta_i, theta_val) -> float:
    t_i, t_v = _as_theta(theta_i), _as_theta(theta_val)
    if family == "gaussian_fixed_var":
        diff = t_i - t_v
        return 0.5 * float(diff @ diff)
    return float(rel_entr(_probs(t_v), _probs(t_i)).sum())


def fisher_matrix(family: Family, theta) -> np.ndarray:
    t = _as_theta(theta)
    if family == "gaussian_fixed_var":
        return np.eye(t.shape[0])
    pi = _probs(t)
    return np.diag(1.0 / t) + 1.0 / pi[-1]


def _segment_constants(family: Family, theta_val: np.ndarray, step: np.ndarray) -> tuple[float, float]:
    """(beta, G) sampled densely along theta_val + t * step, t in [0, 1]."""
    m = theta_val.shape[0]
    if family == "gaussian_fixed_var":
        return 0.0, CONSTANT_INFLATION * GAUSSIAN_SCORE_RADIUS * math.sqrt(m)

    t = np.linspace(0.0, 1.0, SEGMENT_POINTS)[:, None]
    pis = _probs(theta_val + t * step)
    u = _outcome_directions(m)
    u_norm_sq = (u * u).sum(axis=1)
    delta = float(np.linalg.norm(step))
    h = step / delta if delta > 0 else np.zeros(m)

    score_norm = np.sqrt(u_norm_sq) / pis
    # ||D^3 log pi_j [h, ., .]||_op = 2 |u_j.h| ||u_j||^2 / pi_j^3
    third = 2.0 * np.abs(u @ h) * u_norm_sq / pis**3
    return CONSTANT_INFLATION * float(third.max()), CONSTANT_INFLATION * float(score_norm.max())


def bound_constants(gamma: float, G: float) -> tuple[float, float, float, float]:
    """(C1, C1', C2, C3)."""
    if not 0.0 <= gamma < 1.0:
        raise ContractViolation(f"gamma={gamma} must lie in [0, 1)")
    return 1.0 / (2.0 * (1.0 - gamma)), 1.0 / (3.0 * (1.0 - gamma) ** 2), 0.5 * G * G, 1.0 / 6.0


# ----------------------------------------------------
# CHECKS
# ----------------------------------------------------

@dataclass(frozen=True)
class KLBoundCheck:
    kl_true: float
    quad: float
    bound_rhs: float
    holds: bool
    delta: float
    beta: float
    G: float


@dataclass(frozen=True)
class LocalExpansionCheck:
    remainder: float
    cubic_bound: float
    holds: bool
    delta: float


@dataclass(frozen=True)
class MarginalKLCheck:
    kl: float
    bound: float
    holds: bool


def _prepare(family: Family, theta_i, theta_val) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_i, t_v = _as_theta(theta_i), _as_theta(theta_val)
    if t_i.shape != t_v.shape:
        raise DimensionError(f"theta_i {t_i.shape} and theta_val {t_v.shape} differ")
    _check_family(family, t_v)
    _check_family(family, t_i)
    return t_i, t_v, t_i - t_v


def _quadratic(family: Family, theta_val: np.ndarray, step: np.ndarray) -> float:
    return 0.5 * float(step @ fisher_matrix(family, theta_val) @ step)


def verify_kl_bound_analytic(family: Family, theta_i, theta_val, gamma: float) -> KLBoundCheck:
    t_i, t_v, step = _prepare(family, theta_i, theta_val)
    delta = float(np.linalg.norm(step))
    beta, G = _segment_constants(family, t_v, step)
    c1, c1p, c2, c3 = bound_constants(gamma, G)

    kl_true = conditional_kl(family, t_i, t_v)
    quad = _quadratic(family, t_v, step)
    rhs = quad + c1 * gamma**2 + c1p * gamma**3 + c2 * gamma * delta**2 + c3 * beta * G * delta**3
    return KLBoundCheck(kl_true, quad, rhs, kl_true <= rhs + HOLDS_TOL, delta, beta, G)


def verify_local_expansion(family: Family, theta_i, theta_val) -> LocalExpansionCheck:
    t_i, t_v, step = _prepare(family, theta_i, theta_val)
    delta = float(np.linalg.norm(step))
    beta, G = _segment_constants(family, t_v, step)
    remainder = abs(conditional_kl(family, t_i, t_v) - _quadratic(family, t_v, step))
    cubic = beta * G * delta**3 / 6.0
    return LocalExpansionCheck(remainder, cubic, remainder <= cubic + HOLDS_TOL, delta)


def verify_marginal_kl(gamma: float, ratio_fn_samples: Sequence[float]) -> MarginalKLCheck:
    """E[r log r] <= gamma^2 / (2(1-gamma)) + gamma^3 / (3(1-gamma)^2)."""
    r = np.asarray(ratio_fn_samples, dtype=np.float64)
    if r.size == 0:
        raise DataError("verify_marginal_kl needs at least one ratio sample")
    c1, c1p, _, _ = bound_constants(gamma, 0.0)
    if abs(r.mean() - 1.0) > MEAN_TOL:
        raise ContractViolation(f"density ratio samples have mean {r.mean():.12f}, expected 1")
    if np.any(np.abs(r - 1.0) > gamma + HOLDS_TOL):
        raise ContractViolation(f"density ratio samples leave [1 - {gamma}, 1 + {gamma}]")
    kl = float(np.mean(xlogy(r, r)))
    bound = c1 * gamma**2 + c1p * gamma**3
    return MarginalKLCheck(kl, bound, kl <= bound + HOLDS_TOL)


def remainder_slope(family: Family, theta_val, direction, deltas: Sequence[float]) -> float:
    """Log-log slope of the expansion remainder against the step length."""
    t_v = _as_theta(theta_val)
    h = _as_theta(direction)
    h = h / np.linalg.norm(h)
    remainders = [verify_local_expansion(family, t_v + d * h, t_v).remainder for d in deltas]
    slope = np.polyfit(np.log(deltas), np.log(remainders), 1)[0]
    logger.info(f"📐 {family} remainder slope {slope:.3f} over {len(deltas)} step lengths")
    return float(slope)


# ----------------------------------------------------
# RANDOMIZED SUITE
# ----------------------------------------------------

@dataclass(frozen=True)
class TheoryRow:
    trial: int
    check: str
    family: str
    gamma: float
    delta: float
    lhs: float
    rhs: float
    holds: bool


CHECKS = ("kl_bound", "local_expansion", "marginal_kl")


def _draw_instance(rng: Rng) -> tuple[str, np.ndarray, np.ndarray]:
    family = ("bernoulli", "categorical", "gaussian_fixed_var")[int(rng.integers(0, 3))]
    if family == "gaussian_fixed_var":
        m = int(rng.integers(1, 4))
        theta_val = rng.normal(0.0, 1.0, size=m)
        step = rng.normal(0.0, 1.0, size=m)
        step *= rng.uniform(0.0, MAX_DELTA) / np.linalg.norm(step)
        return family, theta_val + step, theta_val

    k = 2 if family == "bernoulli" else int(rng.integers(3, 6))
    # rejection keeps both endpoints at least MIN_PROB inside the simplex
    while True:
        theta_val = rng.dirichlet(np.ones(k))[:-1]
        step = rng.normal(0.0, 1.0, size=k - 1)
        step *= rng.uniform(0.0, MAX_DELTA) / np.linalg.norm(step)
        theta_i = theta_val + step
        if _probs(theta_val).min() >= MIN_PROB and _probs(theta_i).min() >= MIN_PROB:
            return family, theta_i, theta_val


def _mean_one_mixture(rng: Rng, gamma: float) -> np.ndarray:
    n_low, n_high = int(rng.integers(1, 11)), int(rng.integers(1, 11))
    low = rng.uniform(0.0, gamma) * min(1.0, n_high / n_low)
    high = n_low * low / n_high
    return np.concatenate([np.full(n_low, 1.0 - low), np.full(n_high, 1.0 + high)])


def _run_trial(seed: int, trial: int) -> TheoryRow:
    rng = Rng.derive(seed, "theory", trial)
    check = CHECKS[trial % len(CHECKS)]
    gamma = float(rng.uniform(0.0, MAX_GAMMA))

    if check == "marginal_kl":
        result = verify_marginal_kl(gamma, _mean_one_mixture(rng, gamma))
        return TheoryRow(trial, check, "two_point", gamma, 0.0, result.kl, result.bound, result.holds)

    family, theta_i, theta_val = _draw_instance(rng)
    if check == "kl_bound":
        kb = verify_kl_bound_analytic(family, theta_i, theta_val, gamma)
        return TheoryRow(trial, check, family, gamma, kb.delta, kb.kl_true, kb.bound_rhs, kb.holds)
    le = verify_local_expansion(family, theta_i, theta_val)
    return TheoryRow(trial, check, family, 0.0, le.delta, le.remainder, le.cubic_bound, le.holds)


def run_theory_suite(trials: int = 10_000, seed: int = 0, workers: int | None = None) -> pd.DataFrame:
    """Cycle the three randomized checks; each trial draws from its own sub-stream."""
    if trials < 1:
        raise ContractViolation(f"trials must be positive, got {trials}")
    logger.info(f"🚀 Running {trials} theory trials (seed={seed})")
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        rows = list(pool.map(lambda t: _run_trial(seed, t), range(trials)))

    frame = pd.DataFrame([asdict(r) for r in rows])
    violations = int((~frame["holds"]).sum())
    if violations:
        logger.error(f"❌ {violations} of {trials} theory trials violated their bound")
    else:
        logger.info(f"✅ All {trials} theory trials hold")
    return frame
