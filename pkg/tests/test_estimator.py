import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crbmo import kernels
from crbmo.channel import PathParams, UeConfig, channel_matrix, effective_beta, synthesize_pilots
from crbmo.combiner import CombinerSet
from crbmo.crb import AngleGrid, build_a_matrix, crb_matrix, fisher
from crbmo.estimator import EstimatorConfig, estimate, ml_metric, ml_metric_grid
from crbmo.geometry import AnglePair, UpaGeometry, steering, steering_stack

from conftest import BROAD, random_block_diag_bb, random_combiner

GEOM = UpaGeometry(8, 8)
BOX = AngleGrid(*BROAD, 30, 30)


def _noiseless(c, angle, beta=0.8 - 0.3j):
    return beta * c.effective().conj().T @ steering(GEOM, angle)


def test_metric_at_truth_and_beta_recovery():
    c = random_combiner(64, 4, 4, 0)
    ang = AnglePair(0.2, 1.4)
    beta = 0.8 - 0.3j
    y = _noiseless(c, ang, beta)
    b = c.w_rf.conj().T @ steering(GEOM, ang)
    assert ml_metric(y, c, GEOM, ang) == pytest.approx(abs(beta) ** 2 * np.vdot(b, b).real, rel=1e-12)
    est = estimate(y, c, GEOM, EstimatorConfig(AngleGrid(0.2, 0.2, 1.4, 1.4, 1, 1), refine_levels=0))
    assert est.beta_hat == pytest.approx(beta, abs=1e-12)


def test_metric_zero_for_orthogonal_data():
    c = random_combiner(64, 4, 4, 1)
    ang = AnglePair(-0.3, 1.6)
    b = c.w_rf.conj().T @ steering(GEOM, ang)
    y = np.random.default_rng(0).standard_normal(b.size) + 0j
    y -= b * np.vdot(b, y) / np.vdot(b, b)
    assert ml_metric(y, c, GEOM, ang) == pytest.approx(0.0, abs=1e-20)


def test_truth_dominates_noiseless_grid():
    rng = np.random.default_rng(3)
    c = random_combiner(64, 4, 4, 3)
    th, ph = (np.linspace(BROAD[0], BROAD[1], 25), np.linspace(BROAD[2], BROAD[3], 25))
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    for _ in range(100):
        i, k = rng.integers(25), rng.integers(25)
        y = _noiseless(c, AnglePair(th[i], ph[k]), complex(*rng.standard_normal(2)))
        m = ml_metric_grid(y, c, GEOM, tt.ravel(), pp.ravel()).reshape(25, 25)
        assert m[i, k] >= m.max() * (1 - 1e-12)


def test_kernel_metric_matches_dense(impl):
    c = random_combiner(64, 4, 4, 4)
    rng = np.random.default_rng(4)
    th, ph = rng.uniform(-1, 1, 50), rng.uniform(1.2, 1.9, 50)
    y = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    S = steering_stack(GEOM, th, ph)
    B = S.conj() @ c.w_rf
    dense = np.abs(B @ y) ** 2 / np.sum(np.abs(B) ** 2, axis=1)
    np.testing.assert_allclose(kernels.ml_metric_batch(S, c.rows, c.vals, y, impl=impl), dense, rtol=1e-12)


def test_digital_stage_metric_path():
    rng = np.random.default_rng(6)
    c = random_combiner(64, 4, 4, 6)
    cb = CombinerSet(c.w_rf, c.mask, 4, 4, w_bb=random_block_diag_bb(4, 4, rng))
    ang = AnglePair(0.1, 1.5)
    y = _noiseless(cb, ang)
    got = ml_metric_grid(y, cb, GEOM, np.array([ang.theta]), np.array([ang.phi]))[0]
    assert got == pytest.approx(ml_metric(y, cb, GEOM, ang), rel=1e-12)


def test_exact_recovery_on_coarse_grid():
    c = random_combiner(64, 4, 4, 7)
    th = np.linspace(BROAD[0], BROAD[1], 30)[11]
    ph = np.linspace(BROAD[2], BROAD[3], 30)[19]
    est = estimate(_noiseless(c, AnglePair(th, ph)), c, GEOM, EstimatorConfig(BOX))
    assert (est.theta_hat, est.phi_hat) == (th, ph)


def test_off_grid_refinement_error_bound():
    rng = np.random.default_rng(8)
    c = random_combiner(64, 4, 4, 8)
    cfg = EstimatorConfig(BOX, refine_levels=3, refine_shrink=0.2)
    width_t, width_p = BROAD[1] - BROAD[0], BROAD[3] - BROAD[2]
    for _ in range(10):
        ang = AnglePair(float(rng.uniform(-0.9, 0.9)), float(rng.uniform(1.4, 1.75)))
        est = estimate(_noiseless(c, ang), c, GEOM, cfg)
        assert abs(est.theta_hat - ang.theta) <= width_t * 0.2**3 / 30
        assert abs(est.phi_hat - ang.phi) <= width_p * 0.2**3 / 30


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(-math.pi, math.pi), st.integers(0, 1000))
def test_scale_invariance(mag, phase, seed):
    rng = np.random.default_rng(seed)
    c = random_combiner(64, 4, 4, 9)
    y = _noiseless(c, AnglePair(0.3, 1.5)) + 0.3 * (rng.standard_normal(16) + 1j * rng.standard_normal(16))
    cfg = EstimatorConfig(BOX.with_counts(12, 12), refine_levels=2)
    a = estimate(y, c, GEOM, cfg)
    b = estimate(mag * np.exp(1j * phase) * y, c, GEOM, cfg)
    assert (a.theta_hat, a.phi_hat) == (b.theta_hat, b.phi_hat)


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(BOX, refine_levels=-1)
    with pytest.raises(ValueError):
        EstimatorConfig(BOX, refine_shrink=1.0)


def test_mse_near_crb_at_fixed_angle_10db():
    """500 noisy trials at one angle and gain: MSE within 3 dB of tr(C11)."""
    rng = np.random.default_rng(2024)
    c = random_combiner(64, 4, 4, 10)
    ang = AnglePair(0.3, 1.5)
    ue = UeConfig.matched(4, 1.0, 0.2)
    path = PathParams(1.0, ang, 0.2)
    H = channel_matrix(GEOM, ue, [path])
    beta = effective_beta(path, ue, 64).beta
    sigma2 = 0.1
    bound = np.trace(crb_matrix(fisher(c, build_a_matrix(GEOM, ang, beta), sigma2)))
    cfg = EstimatorConfig(BOX)
    sq = []
    for _ in range(500):
        est = estimate(synthesize_pilots(H, ue, c, sigma2, rng=rng), c, GEOM, cfg)
        sq.append((est.theta_hat - ang.theta) ** 2 + (est.phi_hat - ang.phi) ** 2)
    ratio = np.mean(sq) / bound
    assert 0.5 <= ratio <= 2.0, ratio
