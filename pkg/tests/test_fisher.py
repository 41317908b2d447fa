import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fireshift.core.errors import ContractViolation, DimensionError
from fireshift.core.fisher import (
    DiagonalFisher,
    FisherConfig,
    FullFisher,
    LowRankFisher,
    aggregate_fims,
    apply_preconditioner,
    ema_update,
    empirical_fim,
    fisher_from_scores,
    from_payload,
    mix_fim,
    trace_penalty,
    zero_fisher,
)
from fireshift.core.model import ModelSpec, init_params, per_sample_score
from fireshift.core.numkernel import Rng, SymMatrix, as_param_vec, quad_form

FULL = FisherConfig(variant_kind="full")
DIAG = FisherConfig(variant_kind="diagonal")


def _lowrank(k):
    return FisherConfig(variant_kind="lowrank", rank_k=k)


def _diag(*values):
    return DiagonalFisher(np.array(values, dtype=np.float64))


# ----------------------------------------------------
# ESTIMATION
# ----------------------------------------------------

def test_single_example_outer_product():
    s = np.array([[1.0, -2.0, 0.5]])
    full = fisher_from_scores(s, FULL)
    diag = fisher_from_scores(s, DIAG)
    assert_allclose(full.to_dense(), np.outer(s[0], s[0]))
    assert_allclose(diag.diag, s[0] ** 2)


def test_empirical_fim_matches_straight_loop(make_fragment):
    for trial in range(50):
        rng = Rng(trial, "fim-oracle")
        hidden = () if trial % 2 == 0 else (5,)
        spec = ModelSpec(input_dim=4, hidden_sizes=hidden, num_classes=3)
        frag = make_fragment(rng, 12, 4, 3)
        theta = init_params(spec, rng.split("theta"))

        oracle = sum(np.outer(s, s) for s in (per_sample_score(spec, theta, ex) for ex in frag.examples)) / frag.n
        full = empirical_fim(spec, theta, frag, FULL)
        diag = empirical_fim(spec, theta, frag, DIAG)
        assert np.linalg.norm(full.to_dense() - oracle) <= 1e-12 * max(np.linalg.norm(oracle), 1e-300)
        assert_array_equal(np.diag(full.to_dense()), diag.diag)
        assert full.sample_count == diag.sample_count == 12


@pytest.mark.parametrize("n", [4, 30])
def test_full_rank_lowrank_reconstructs_full(n, rng):
    scores = rng.normal(size=(n, 9))
    full = fisher_from_scores(scores, FULL)
    lowrank = fisher_from_scores(scores, _lowrank(9))
    err = np.linalg.norm(lowrank.to_dense() - full.to_dense())
    assert err <= 1e-10 * np.linalg.norm(full.to_dense())
    assert lowrank.orthonormality_error() <= 1e-10


def test_lowrank_truncation_error_is_optimal(rng):
    scores = rng.normal(size=(40, 12)) * np.linspace(3.0, 0.2, 12)
    full = fisher_from_scores(scores, FULL)
    lowrank = fisher_from_scores(scores, _lowrank(4))
    tail = np.sort(np.linalg.eigvalsh(full.to_dense()))[::-1][4:]
    err = np.linalg.norm(full.to_dense() - lowrank.to_dense())
    assert err == pytest.approx(np.sqrt(np.sum(tail ** 2)), rel=1e-8)
    assert lowrank.rank == 4


def test_rank_clamped_with_warning(rng, caplog):
    scores = rng.normal(size=(3, 10))
    with caplog.at_level(logging.WARNING, logger="Fisher"):
        lowrank = fisher_from_scores(scores, _lowrank(8))
    assert lowrank.rank == 3
    assert "effective rank" in caplog.text


@pytest.mark.parametrize("cfg", [FULL, DIAG, _lowrank(3)])
def test_estimates_are_psd(cfg, rng):
    est = fisher_from_scores(rng.normal(size=(20, 6)), cfg)
    for _ in range(100):
        v = as_param_vec(rng.normal(size=6))
        assert quad_form(est, v) >= -1e-10 * float(v @ v)


@pytest.mark.parametrize("cfg", [FULL, DIAG, _lowrank(4)])
def test_spectral_norm_bounded_by_score_norm(cfg, rng):
    bound = 2.5
    scores = rng.normal(size=(25, 7))
    scores *= bound * rng.uniform(0.1, 1.0, size=(25, 1)) / np.linalg.norm(scores, axis=1, keepdims=True)
    est = fisher_from_scores(scores, cfg)
    assert est.spectral_norm() <= bound ** 2 + 1e-8


# ----------------------------------------------------
# ALGEBRA
# ----------------------------------------------------

def test_mix_examples():
    assert_allclose(mix_fim(_diag(4.0, 0.0), _diag(0.0, 4.0), 0.5).diag, [2.0, 2.0])
    batch, val = _diag(1.0, 2.0), _diag(3.0, 5.0)
    assert mix_fim(batch, val, 1.0) is batch
    assert mix_fim(batch, val, 0.0) is val


def test_mix_rejects_bad_weight():
    with pytest.raises(ContractViolation):
        mix_fim(_diag(1.0), _diag(1.0), 1.5)


def test_mix_rejects_variant_mismatch():
    full = FullFisher(SymMatrix.identity(2))
    with pytest.raises(ContractViolation):
        mix_fim(full, _diag(1.0, 1.0), 0.5)


def test_mix_rejects_dimension_mismatch():
    with pytest.raises(DimensionError):
        mix_fim(_diag(1.0), _diag(1.0, 1.0), 0.5)


def test_lowrank_mix_keeps_rank_and_orthonormal_rows(rng):
    a = fisher_from_scores(rng.normal(size=(10, 8)), _lowrank(3))
    b = fisher_from_scores(rng.normal(size=(10, 8)), _lowrank(3))
    mixed = mix_fim(a, b, 0.3)
    assert isinstance(mixed, LowRankFisher)
    assert mixed.rank == 3
    assert mixed.orthonormality_error() <= 1e-10


def test_ema_examples():
    assert_allclose(ema_update(_diag(1.0, 1.0), _diag(3.0, 3.0), 0.5).diag, [2.0, 2.0])
    fixed = ema_update(_diag(2.0, 7.0), _diag(2.0, 7.0), 0.9)
    assert_allclose(fixed.diag, [2.0, 7.0], rtol=1e-15)
    fresh = _diag(5.0)
    assert ema_update(_diag(1.0), fresh, 0.0) is fresh


def test_ema_forgets_geometrically():
    target = _diag(3.0, 4.0)
    state = zero_fisher("diagonal", 2)
    alpha = 0.9
    for t in range(1, 30):
        state = ema_update(state, target, alpha)
        gap = np.linalg.norm(state.diag - target.diag)
        assert gap == pytest.approx(alpha ** t * 5.0, rel=1e-9)


def test_ema_rejects_alpha_one():
    with pytest.raises(ContractViolation):
        ema_update(_diag(1.0), _diag(1.0), 1.0)


def test_aggregate_weighted_by_samples():
    agg = aggregate_fims([(_diag(4.0, 0.0), 1), (_diag(0.0, 8.0), 3)])
    assert_allclose(agg.diag, [1.0, 6.0])


def test_aggregate_single_is_identity():
    only = _diag(2.0, 3.0)
    assert aggregate_fims([(only, 17)]) is only


def test_aggregate_empty():
    with pytest.raises(ContractViolation):
        aggregate_fims([])


def test_preconditioner_examples():
    g = as_param_vec([1.0, -2.0])
    identity = FullFisher(SymMatrix.identity(2))
    assert_allclose(apply_preconditioner(identity, g, 1.0), [2.0, -4.0])
    out = apply_preconditioner(_diag(2.0, 0.0, 1.0), as_param_vec([1.0, 1.0, 1.0]), 0.5)
    assert_allclose(out, [2.0, 1.0, 1.5])
    assert apply_preconditioner(identity, g, 0.0) is g


def test_preconditioner_rejects_negative_penalty():
    with pytest.raises(ContractViolation):
        apply_preconditioner(_diag(1.0), as_param_vec([1.0]), -0.1)


def test_preconditioned_direction_is_descent(rng):
    est = fisher_from_scores(rng.normal(size=(15, 5)), FULL)
    for _ in range(20):
        g = as_param_vec(rng.normal(size=5))
        assert float(g @ apply_preconditioner(est, g, 0.7)) >= float(g @ g) - 1e-12


def test_trace_penalty_examples():
    assert trace_penalty(zero_fisher("full", 3)) == 0.0
    assert trace_penalty(FullFisher(SymMatrix.identity(4))) == 4.0
    lowrank = LowRankFisher(np.eye(2), np.array([3.0, 1.0]))
    assert trace_penalty(lowrank) == 4.0


# ----------------------------------------------------
# PAYLOADS
# ----------------------------------------------------

def test_payload_sizes():
    assert zero_fisher("full", 1000).payload_values == 500_500
    assert zero_fisher("lowrank", 1000, rank_k=50).payload_values == 50_051
    assert zero_fisher("diagonal", 100).payload_bytes == 800


@pytest.mark.parametrize("cfg", [FULL, DIAG, _lowrank(3)])
def test_payload_preserves_estimate(cfg, rng):
    est = fisher_from_scores(rng.normal(size=(10, 6)), cfg)
    wire = est.to_payload()
    assert len(wire) == est.payload_bytes
    back = from_payload(est.kind, est.dim, wire)
    assert_array_equal(back.to_dense(), est.to_dense())


def test_payload_size_mismatch():
    with pytest.raises(DimensionError):
        from_payload("diagonal", 3, np.zeros(2).tobytes())
