import math

import numpy as np
import pytest

from madapt.backbone import init_params
from madapt.errors import ArgumentError, ConfigError
from madapt.objectives import (Batch, codebook_assign, codebook_ema_update, grad_check, interleave_lambda,
                               normalize_targets, numeric_grad, sample_mask, sl_loss_and_grad, ssl_loss_and_grad)
from madapt.optim import Adam

from conftest import SMOKE

# expected masked fraction for T'=1000, p=0.065, span=10, edge effects included
MASK_FRACTION_ORACLE = 0.48742567939187965


def smoke_mask():
    m = np.zeros(SMOKE.output_length(8), dtype=bool)
    m[1:3] = True
    return m


# -- masking ---------------------------------------------------------------

def test_mask_p_zero_is_empty():
    assert sample_mask(50, 0.0, 10, np.random.default_rng(0)).num_masked == 0


def test_mask_p_one_full_span():
    m = sample_mask(37, 1.0, 37, np.random.default_rng(0))
    assert m.mask.all()


def test_mask_fraction_monte_carlo():
    fracs = [sample_mask(1000, 0.065, 10, np.random.default_rng(s)).mask.mean() for s in range(100)]
    mean = float(np.mean(fracs))
    assert 0.35 <= mean <= 0.60
    assert abs(mean - MASK_FRACTION_ORACLE) < 0.02


def test_mask_errors():
    with pytest.raises(ArgumentError):
        sample_mask(0, 0.1, 3)
    with pytest.raises(ArgumentError):
        sample_mask(10, 1.5, 3)
    with pytest.raises(ArgumentError):
        sample_mask(10, 0.5, 0)


def test_mask_deterministic():
    a = sample_mask(200, 0.1, 4, np.random.default_rng(4)).mask
    b = sample_mask(200, 0.1, 4, np.random.default_rng(4)).mask
    assert np.array_equal(a, b)


# -- codebooks -------------------------------------------------------------

def test_assign_exact_row():
    cb = np.random.default_rng(0).standard_normal((6, 3))
    assert codebook_assign(cb[3:4], cb)[0] == 3


def test_assign_single_row():
    assert np.all(codebook_assign(np.random.default_rng(0).standard_normal((9, 2)), np.zeros((1, 2))) == 0)


def test_assign_ties_and_midpoints():
    cb = np.array([[0.0], [1.0]])
    assert codebook_assign(np.array([[0.4], [0.6], [0.5]]), cb).tolist() == [0, 1, 0]


def test_assign_shape_errors():
    with pytest.raises(ArgumentError):
        codebook_assign(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ArgumentError):
        codebook_assign(np.zeros((2, 3)), np.zeros((2, 4)))


def test_ema_update_examples():
    out = codebook_ema_update(np.array([[0.0], [5.0]]), np.array([[1.0]]), np.array([0]), 0.9)
    assert out[0, 0] == pytest.approx(0.1, abs=1e-15)
    assert out[1, 0] == 5.0


def test_ema_update_small_decay_reaches_mean():
    v = np.array([2.0, -1.0])
    out = codebook_ema_update(np.zeros((3, 2)), np.tile(v, (4, 1)), np.array([1, 1, 1, 1]), 1e-12)
    assert np.allclose(out[1], v, atol=1e-10)
    assert np.array_equal(out[0], [0.0, 0.0])


def test_ema_update_errors():
    with pytest.raises(ArgumentError):
        codebook_ema_update(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros(2, dtype=int), 0.9)
    with pytest.raises(ArgumentError):
        codebook_ema_update(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros(1, dtype=int), 1.0)


def test_normalize_targets_moments():
    x = np.random.default_rng(0).standard_normal((50, 4)) * 3 + 2
    z = normalize_targets(x)
    assert np.allclose(z.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(z.std(axis=0), 1, atol=1e-5)


# -- self-supervised loss --------------------------------------------------

def test_smoke_config_is_small():
    p = init_params(SMOKE, 0)
    assert p.flat().size() <= 5000


def test_ssl_zero_mask(smoke_params, smoke_batch):
    loss, grads, new_cb = ssl_loss_and_grad(smoke_params, smoke_batch, np.zeros(4, dtype=bool))
    assert loss == 0.0
    assert all(not g.any() for _, g in grads.items())
    assert new_cb.same_structure(smoke_params.codebooks)


def test_ssl_grad_names(smoke_params, smoke_batch):
    _, grads, _ = ssl_loss_and_grad(smoke_params, smoke_batch, smoke_mask())
    groups = {k.partition("/")[0] for k in grads}
    assert groups == {"student", "heads"}


def test_ssl_codebooks_only_move_by_ema(smoke_params, smoke_batch):
    before = smoke_params.codebooks.copy()
    _, _, new_cb = ssl_loss_and_grad(smoke_params, smoke_batch, smoke_mask())
    assert smoke_params.codebooks.bitwise_equal(before)
    assert not new_cb.bitwise_equal(before)


def test_ssl_gradcheck(smoke_params, smoke_batch):
    err = grad_check("ssl", smoke_params, smoke_batch, eps=1e-5, mask=smoke_mask(), num_coords=200)
    assert err < 1e-4


def test_ssl_loss_bounded_after_training(smoke_params, smoke_batch):
    opt = Adam()
    mask = smoke_mask()
    loss = None
    for _ in range(200):
        loss, grads, cb = ssl_loss_and_grad(smoke_params, smoke_batch, mask)
        opt.step(smoke_params, grads, 1e-2, groups=("student", "heads"))
        smoke_params.codebooks = cb
    assert math.isfinite(loss)
    assert loss <= math.log(SMOKE.codebook_size) + 5


def test_teacher_gradient_is_zero(smoke_params, smoke_batch):
    # targets are piecewise constant in the teacher: tiny moves do not change them
    n = numeric_grad("ssl", smoke_params, smoke_batch, "teacher/down.w", 0, 1e-9, mask=smoke_mask())
    assert n == 0.0


def test_richardson_difference(smoke_params, smoke_batch):
    mask = smoke_mask()
    n1 = numeric_grad("ssl", smoke_params, smoke_batch, "student/block1.w", 2, 1e-4, mask=mask)
    n2 = numeric_grad("ssl", smoke_params, smoke_batch, "student/block1.w", 2, 2e-4, mask=mask)
    assert abs(n2 - n1) < 1e-5


# -- supervised loss -------------------------------------------------------

def test_sl_saturated(smoke_params):
    frames = np.random.default_rng(0).standard_normal((8, SMOKE.input_dim))
    batch = Batch(frames, 0, np.full(4, 2))
    smoke_params.sl_heads["lang0.w"][...] = 0.0
    smoke_params.sl_heads["lang0.b"][...] = 0.0
    smoke_params.sl_heads["lang0.b"][2] = 40.0
    loss, _ = sl_loss_and_grad(smoke_params, batch, 1)
    assert loss < 1e-6


def test_sl_gradcheck(smoke_params, smoke_batch):
    assert grad_check("sl", smoke_params, smoke_batch, eps=1e-5, num_coords=200, k_sl=1) < 1e-4


def test_sl_gradient_scope(smoke_params, smoke_batch):
    _, grads = sl_loss_and_grad(smoke_params, smoke_batch, 1)
    assert not grads["student/block2.w"].any()
    assert not grads["student/block2.conv"].any()
    assert not grads["student/mask_emb"].any()
    assert not grads["sl_heads/lang0.w"].any()
    assert not grads["sl_heads/lang2.b"].any()
    assert grads["sl_heads/lang1.w"].any()
    assert grads["student/down.w"].any()


def test_sl_errors(smoke_params):
    frames = np.zeros((8, SMOKE.input_dim))
    with pytest.raises(ArgumentError):
        sl_loss_and_grad(smoke_params, Batch(frames, 0), 1)
    with pytest.raises(ArgumentError):
        sl_loss_and_grad(smoke_params, Batch(frames, 7, np.zeros(4, dtype=int)), 1)
    with pytest.raises(ArgumentError):
        sl_loss_and_grad(smoke_params, Batch(frames, 0, np.zeros(4, dtype=int)), 3)


# -- interleaving ----------------------------------------------------------

def test_interleave_examples():
    assert interleave_lambda(10) == 0
    assert interleave_lambda(7) == 1


def test_interleave_count():
    assert sum(interleave_lambda(s) == 0 for s in range(1, 10_001)) == 1000


def test_interleave_errors():
    with pytest.raises(ConfigError):
        interleave_lambda(3, 0)
    with pytest.raises(ArgumentError):
        interleave_lambda(0)
