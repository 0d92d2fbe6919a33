import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rei.diffcore import ReconModel, model_apply, ops
from rei.losses import (
    Batch,
    LossConfig,
    MissingDataError,
    StepKeys,
    draw_probes,
    eq_loss,
    mc_divergence,
    mc_loss,
    oracle_mc_loss,
    req_loss,
    sup_loss,
    sure_gaussian,
    sure_mpg,
    sure_poisson,
    variant_loss,
)
from rei.noise import NoiseParams, RngStream, skewed_probe
from rei.operators import IdentityOp, InpaintOp, MatrixOp
from rei.transforms import TransformGroup, apply_transform


def lin(M):
    return lambda v: ops.matvec(M, v)


# ---- measurement consistency ------------------------------------------------

def test_mc_zero_for_consistent_reconstruction():
    A = IdentityOp(3)
    y = np.array([[1.0, 2.0, 3.0]])
    assert float(mc_loss(y, lambda v: v, A)) == 0.0


def test_mc_zero_denoiser_arithmetic():
    assert float(mc_loss(np.array([[3.0, 4.0]]), lambda v: ops.mul(v, 0.0), IdentityOp(2))) == 12.5


def test_mc_matches_dense_matrix_computation():
    rng = np.random.default_rng(0)
    A = InpaintOp.random(8, 0.6, seed=1)
    F = rng.standard_normal((64, 64)) / 8
    f = lambda v: ops.reshape(ops.matvec(F, ops.reshape(v, (-1, 64))), (-1, 1, 8, 8))
    y = A.apply(rng.random((3, 1, 8, 8)))
    Mask = np.diag(A.mask.ravel())
    yf = y.reshape(3, 64)
    expected = np.mean([np.sum((yi - Mask @ F @ yi) ** 2) for yi in yf]) / A.m
    assert abs(float(mc_loss(y, f, A)) - expected) < 1e-12


# ---- equivariance ------------------------------------------------------------

def test_eq_zero_for_orthogonal_operator_and_adjoint_reconstruction():
    Q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((16, 16)))
    A = MatrixOp(Q, Q.T)
    G = TransformGroup("shift2d", 4)
    img = lambda v: ops.reshape(v, (-1, 1, 4, 4))
    flat = lambda v: ops.reshape(v, (-1, 16))

    class Op:
        m = 16
        meas_mask = None

        @staticmethod
        def apply(x):
            return A.apply(flat(x))

    y = np.random.default_rng(2).standard_normal((2, 16))
    assert float(eq_loss(y, lambda v: img(A.pinv(v)), Op, G, [3, 7])) < 1e-28


def test_eq_matches_step_by_step_pipeline():
    rng = np.random.default_rng(3)
    A = InpaintOp.random(8, 0.7, seed=0)
    G = TransformGroup("shift2d", 8)
    W = rng.standard_normal((64, 64)) / 8
    f = lambda v: ops.reshape(ops.matvec(W, ops.reshape(v, (-1, 64))), (-1, 1, 8, 8))
    y = A.apply(rng.random((2, 1, 8, 8)))
    g = [5, 12]
    x1 = np.asarray(f(y))
    x2 = np.stack([np.roll(x1[i], G.shift_of(g[i]), axis=(-2, -1)) for i in range(2)])
    x3 = np.asarray(f(x2 * A.mask))
    expected = np.sum((x2 - x3) ** 2) / (64 * 2)
    assert abs(float(eq_loss(y, f, A, G, g)) - expected) < 1e-12


def _req_setup(seed=0):
    rng = np.random.default_rng(seed)
    A = InpaintOp.random(8, 0.7, seed=seed)
    G = TransformGroup("shift2d", 8)
    W = np.eye(64) + 0.1 * rng.standard_normal((64, 64))
    f = lambda v: ops.reshape(ops.matvec(W, ops.reshape(v, (-1, 64))), (-1, 1, 8, 8))
    y = A.apply(rng.random((2, 1, 8, 8)))
    return A, G, W, f, y


def test_req_equals_eq_without_noise():
    A, G, _, f, y = _req_setup()
    noise = NoiseParams("gaussian", sigma=0.0)
    a = float(req_loss(y, f, A, G, [3, 4], noise, RngStream(0)))
    assert a == float(eq_loss(y, f, A, G, [3, 4]))


def test_req_deterministic_for_fixed_key():
    A, G, _, f, y = _req_setup()
    noise = NoiseParams("gaussian", sigma=0.2)
    streams = [RngStream(1, i, 0, "req-noise") for i in range(2)]
    assert float(req_loss(y, f, A, G, [3, 4], noise, streams)) == float(req_loss(y, f, A, G, [3, 4], noise, streams))


def test_req_mean_exceeds_eq_by_noise_variance_for_linear_f():
    A, G, W, f, y = _req_setup(1)
    sigma = 0.2
    noise = NoiseParams("gaussian", sigma=sigma)
    eq = float(eq_loss(y, f, A, G, [3, 4]))
    draws = [float(req_loss(y, f, A, G, [3, 4], noise, [RngStream(2, i, k, "req-noise") for i in range(2)]))
             for k in range(3000)]
    # E‖x2 - W(u + e)‖²/n = eq + σ² ‖W diag(mask)‖_F² / n for masked Gaussian e
    gap = sigma ** 2 * np.sum((W * A.mask.ravel()[None, :]) ** 2) / 64
    se = np.std(draws) / math.sqrt(len(draws))
    assert np.mean(draws) > eq
    assert abs(np.mean(draws) - (eq + gap)) < 4 * se


# ---- divergence --------------------------------------------------------------

def test_divergence_linear_and_constant():
    y = np.array([[0.3, -1.2]])
    b = np.array([[1.0, 1.0]])
    assert abs(float(mc_divergence(lambda v: ops.mul(v, 3.0), y, b, 1e-2)) - 6.0) < 1e-12
    assert float(mc_divergence(lambda v: ops.mul(v, 0.0), y, b, 1e-2)) == 0.0
    with pytest.raises(ValueError):
        mc_divergence(lambda v: v, y, b, 0.0)


def test_divergence_trace_estimate():
    rng = np.random.default_rng(0)
    B = np.eye(64) + rng.standard_normal((64, 64)) / 8
    b = rng.standard_normal((10_000, 64))
    est = float(mc_divergence(lin(B), rng.standard_normal((10_000, 64)), b, 1e-2)) / 10_000
    assert abs(est - np.trace(B)) / abs(np.trace(B)) < 0.02


@given(st.floats(1e-6, 1e2))
@settings(max_examples=25, deadline=None)
def test_identity_divergence_exact_for_every_tau(tau):
    rng = np.random.default_rng(1)
    y, b = rng.standard_normal((1, 16)), rng.standard_normal((1, 16))
    assert math.isclose(float(mc_divergence(lambda v: v, y, b, tau)), float(np.sum(b * b)), rel_tol=1e-8)


# ---- SURE --------------------------------------------------------------------

def test_sure_gaussian_identity_algebra():
    y = np.array([[0.2, 0.9, -0.4, 1.1]])
    b = np.array([[1.0, -1.0, 1.0, -1.0]])
    assert math.isclose(float(sure_gaussian(y, lambda v: v, IdentityOp(4), 0.1, 1e-2, b)), 0.01, rel_tol=1e-9)


def test_sure_gaussian_zero_denoiser():
    y = np.array([[0.2, 0.9, -0.4, 1.1]])
    b = np.ones((1, 4))
    val = float(sure_gaussian(y, lambda v: ops.mul(v, 0.0), IdentityOp(4), 0.3, 1e-2, b))
    assert math.isclose(val, np.sum(y ** 2) / 4 - 0.09, rel_tol=1e-12)


def test_sure_gaussian_sigma_zero_is_mc():
    y = np.array([[0.2, 0.9]])
    f = lambda v: ops.mul(v, 0.5)
    assert float(sure_gaussian(y, f, IdentityOp(2), 0.0, 1e-2, np.ones((1, 2)))) == float(mc_loss(y, f, IdentityOp(2)))


def test_sure_gaussian_linear_denoiser_unbiased():
    m, sigma, n = 16, 0.5, 100_000
    rng = np.random.default_rng(4)
    u = rng.uniform(0, 1, m)
    y = u + sigma * rng.standard_normal((n, m))
    b = rng.standard_normal((n, m))
    val = float(sure_gaussian(y, lambda v: ops.mul(v, 0.5), IdentityOp(m), sigma, 1e-2, b))
    truth = 0.25 * np.sum(u ** 2) / m + 0.25 * sigma ** 2
    assert abs(val - truth) / truth < 0.01


def test_sure_poisson_identity_algebra():
    y = np.array([[2.0, 4.0]])
    b = np.array([[1.0, -1.0]])
    assert math.isclose(float(sure_poisson(y, lambda v: v, IdentityOp(2), 0.1, 1e-2, b)), 0.3, rel_tol=1e-9)


def test_sure_poisson_identity_expectation():
    gamma, u, n = 0.1, np.array([2.0, 4.0]), 200_000
    rng = np.random.default_rng(5)
    y = gamma * rng.poisson(u / gamma, (n, 2))
    b = rng.integers(0, 2, (n, 2)) * 2.0 - 1.0
    val = float(sure_poisson(y, lambda v: v, IdentityOp(2), gamma, 1e-2, b))
    assert abs(val - 0.3) < 0.01


def test_sure_poisson_zero_denoiser():
    y = np.array([[2.0, 4.0, 1.0]])
    val = float(sure_poisson(y, lambda v: ops.mul(v, 0.0), IdentityOp(3), 0.2, 1e-2, np.ones((1, 3))))
    assert math.isclose(val, np.sum(y ** 2) / 3 - 0.2 * 7 / 3, rel_tol=1e-12)


def test_sure_mpg_identity_algebra():
    y = np.array([[2.0, 4.0]])
    b = np.array([[1.0, -1.0]])
    c = skewed_probe(np.random.default_rng(0), (1, 2))
    val = float(sure_mpg(y, lambda v: v, IdentityOp(2), 0.1, 0.2, 1e-2, b, c))
    assert math.isclose(val, 0.1 * 6 / 2 + 0.04, rel_tol=1e-9)


def test_sure_mpg_sigma_zero_reduces_to_poisson():
    rng = np.random.default_rng(6)
    y = rng.uniform(1, 3, (2, 5))
    b = rng.integers(0, 2, (2, 5)) * 2.0 - 1.0
    f = lambda v: ops.mul(ops.square(v), 0.2)
    a = float(sure_mpg(y, f, IdentityOp(5), 0.3, 0.0, 1e-2, b, np.zeros_like(b)))
    assert math.isclose(a, float(sure_poisson(y, f, IdentityOp(5), 0.3, 1e-2, b)), rel_tol=1e-12)


@given(st.floats(1e-4, 1.0), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_sure_mpg_second_difference_vanishes_for_linear_h(tau, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((6, 6))
    y, b = rng.uniform(1, 2, (1, 6)), rng.standard_normal((1, 6))
    c1, c2 = skewed_probe(rng, (1, 6)), skewed_probe(rng, (1, 6))
    v1 = float(sure_mpg(y, lin(M), IdentityOp(6), 0.5, 1.0, tau, b, c1))
    v2 = float(sure_mpg(y, lin(M), IdentityOp(6), 0.5, 1.0, tau, b, c2))
    assert abs(v1 - v2) < 1e-6 * max(1.0, abs(v1))


def test_sure_mpg_quadratic_denoiser_matches_monte_carlo_mse():
    m, gamma, sigma, tau = 8, 0.1, 3.0, 1e-3
    u = np.full(m, 2.0) + np.linspace(-0.5, 0.5, m)
    f = lambda v: ops.mul(ops.square(v), 0.1)
    vals, errs = [], []
    for k in range(100):
        rng = np.random.default_rng([7, k])
        U = np.broadcast_to(u, (1000, m))
        y = gamma * rng.poisson(U / gamma) + sigma * rng.standard_normal(U.shape)
        b = rng.standard_normal(U.shape)
        c = skewed_probe(rng, U.shape)
        vals.append(float(sure_mpg(y, f, IdentityOp(m), gamma, sigma, tau, b, c)))
        errs.append(np.mean(np.sum((U - 0.1 * y * y) ** 2, axis=1)) / m)
    truth = np.mean(errs)
    assert abs(np.mean(vals) - truth) / truth < 0.02


def test_sure_ignores_null_space_of_operator():
    A = InpaintOp.random(4, 0.5, seed=2)
    rng = np.random.default_rng(8)
    y = A.apply(rng.random((1, 1, 4, 4)))
    b = rng.standard_normal(y.shape) * A.mask
    z = rng.standard_normal((1, 1, 4, 4)) * (1 - A.mask)
    f = lambda v: ops.mul(v, 0.7)
    g = lambda v: ops.add(ops.mul(v, 0.7), z)
    assert float(sure_gaussian(y, f, A, 0.1, 1e-2, b)) == float(sure_gaussian(y, g, A, 0.1, 1e-2, b))


def test_sup_and_oracle_losses():
    x = np.array([[1.0, 2.0]])
    assert float(sup_loss(x, lambda v: x, x)) == 0.0
    assert float(sup_loss(x, lambda v: ops.mul(v, 0.0), x)) == 2.5
    rng = np.random.default_rng(9)
    M = rng.standard_normal((3, 4))
    F = rng.standard_normal((4, 3))
    u, y = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    expected = np.mean([np.sum((u[i] - M @ F @ y[i]) ** 2) for i in range(2)]) / 3
    assert abs(float(oracle_mc_loss(u, lin(F), MatrixOp(M), y)) - expected) < 1e-12


# ---- variant assembly --------------------------------------------------------

def _tiny(noise):
    model = ReconModel(1, width=2, depth=1, seed=0)
    p = model.params.copy()
    p[-19:] = np.random.default_rng(0).standard_normal(19) * 0.3
    model = model.copy(p)
    A = InpaintOp.random(4, 0.7, seed=0)
    x = np.random.default_rng(1).random((2, 1, 4, 4))
    u = A.apply(x)
    y = noise.sample(u, RngStream(0)) * A.mask
    batch = Batch(y=y, index=[0, 1], x=x, u=u)
    f = lambda v: model_apply(model, v)
    return f, A, TransformGroup("shift2d", 4), batch


def test_alpha_zero_rei_is_scaled_sure():
    noise = NoiseParams("poisson", gamma=0.1)
    f, A, G, batch = _tiny(noise)
    keys = StepKeys(0, 0)
    total, terms = variant_loss(LossConfig("REI", alpha=0.0, sure_scale=1e-3), batch, f, A, G, noise, keys)
    assert float(total) == 1e-3 * terms["sure"]


def test_noiseless_rei_equals_ei():
    noise = NoiseParams("gaussian", sigma=0.0)
    f, A, G, batch = _tiny(noise)
    keys = StepKeys(3, 1)
    a, _ = variant_loss(LossConfig("REI"), batch, f, A, G, noise, keys)
    b, _ = variant_loss(LossConfig("EI"), batch, f, A, G, noise, keys)
    assert float(a) == float(b)


@pytest.mark.parametrize("kind", [NoiseParams("gaussian", sigma=0.1), NoiseParams("poisson", gamma=0.1),
                                  NoiseParams("mpg", gamma=0.1, sigma=0.05)])
def test_rei_recomposes_from_terms(kind):
    f, A, G, batch = _tiny(kind)
    keys = StepKeys(1, 2)
    cfg = LossConfig("REI", alpha=0.7, sure_scale=0.5)
    total, _ = variant_loss(cfg, batch, f, A, G, kind, keys)
    b, c = draw_probes(kind, batch.y.shape, batch.index, keys, A.meas_mask)
    from rei.losses import sure_loss
    from rei.transforms import sample_group_element

    sure = float(sure_loss(batch.y, f, A, kind, cfg.tau, b, c))
    g = [sample_group_element(G, keys.stream(i, "group")) for i in batch.index]
    req = float(req_loss(batch.y, f, A, G, g, kind, [keys.stream(i, "req-noise") for i in batch.index]))
    assert abs(float(total) - (0.5 * sure + 0.7 * req)) < 1e-12


@pytest.mark.parametrize("variant,expect", [("MC", {"mc"}), ("SURE", {"sure"}), ("EI", {"mc", "eq"}),
                                            ("EI1", {"mc", "req"}), ("EI2", {"sure", "eq"}),
                                            ("EI_oracle", {"oracle_mc", "eq"}), ("REI_oracle", {"oracle_mc", "req"}),
                                            ("REI", {"sure", "req"}), ("Sup", {"sup"})])
def test_variant_term_registry(variant, expect):
    noise = NoiseParams("gaussian", sigma=0.1)
    f, A, G, batch = _tiny(noise)
    _, terms = variant_loss(LossConfig(variant), batch, f, A, G, noise, StepKeys(0, 0))
    assert set(terms) == expect | {"total"}


def test_missing_data_errors():
    noise = NoiseParams("gaussian", sigma=0.1)
    f, A, G, batch = _tiny(noise)
    bare = Batch(y=batch.y, index=batch.index)
    for v in ("Sup", "EI_oracle", "REI_oracle"):
        with pytest.raises(MissingDataError):
            variant_loss(LossConfig(v), bare, f, A, G, noise, StepKeys(0, 0))
    with pytest.raises(MissingDataError):
        variant_loss(LossConfig("EI"), batch, f, A, None, noise, StepKeys(0, 0))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig("FOO")
    with pytest.raises(ValueError):
        LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        LossConfig(tau=0)


def test_probes_masked_and_shaped():
    keys = StepKeys(0, 0)
    mask = InpaintOp.random(4, 0.5).mask
    b, c = draw_probes(NoiseParams("poisson", gamma=0.1), (2, 1, 4, 4), [0, 1], keys, mask)
    assert set(np.unique(b[:, 0][:, mask == 1])) <= {-1.0, 1.0}
    assert np.all(b[:, 0][:, mask == 0] == 0) and np.all(c[:, 0][:, mask == 0] == 0)
    b2, _ = draw_probes(NoiseParams("gaussian", sigma=0.1), (2, 1, 4, 4), [0, 1], keys)
    assert len(np.unique(b2)) > 2
