from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rffguard import attacks
from rffguard import classifier as clf
from rffguard.checkpoint import Checkpoint


@pytest.fixture(scope="module")
def ckpt():
    m = clf.build_model("mini_resnet", 4, seed=1)
    return Checkpoint.from_module(m, m.arch())


def _prunable_values(ck):
    return np.concatenate([v.ravel() for k, v in ck.params.items() if attacks.prunable(k, v)])


def test_prune_zero_is_identity(ckpt):
    assert clf.state_equal(attacks.prune(ckpt, 0.0), ckpt)


@pytest.mark.parametrize("rho", [0.1, 0.3, 0.5, 0.9])
def test_prune_zeroes_exactly_floor_rho_n(ckpt, rho):
    before = _prunable_values(ckpt)
    out = attacks.prune(ckpt, rho)
    after = _prunable_values(out)
    n = before.size
    assert int(np.sum((after == 0) & (before != 0))) == math.floor(rho * n)
    kept = after != 0
    # every survivor is at least as large as every pruned weight
    assert np.abs(before[kept]).min() >= np.abs(before[~kept]).max()
    for k, v in out.params.items():
        if not attacks.prunable(k, v):
            assert np.array_equal(v, ckpt.params[k])
    # the source checkpoint is untouched
    assert np.count_nonzero(_prunable_values(ckpt) == 0) == np.count_nonzero(before == 0)


def test_prune_rejects_bad_fraction(ckpt):
    with pytest.raises(ValueError):
        attacks.prune(ckpt, 1.0)
    with pytest.raises(ValueError):
        attacks.prune(ckpt, -0.1)


def test_quantize_tensor_by_hand():
    w = np.array([-1.0, -0.26, 0.0, 0.5, 0.74], np.float32)
    q, scale = attacks.quantize_tensor(w, 2)  # levels -1, 0, 1 times scale 1
    assert scale == 1.0
    np.testing.assert_array_equal(q, [-1, 0, 0, 0, 1])  # 0.5 rounds half to even


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31))
def test_quantize_error_bound_and_grid(bits, seed):
    w = np.random.default_rng(seed).standard_normal(500).astype(np.float32)
    q, scale = attacks.quantize_tensor(w, bits)
    slack = scale / 2 + np.spacing(np.abs(q)).astype(np.float64) / 2
    assert np.all(np.abs(q.astype(np.float64) - w) <= slack)
    k = np.rint(q.astype(np.float64) / scale)
    assert np.all(q == (k * scale).astype(np.float32))
    assert np.max(np.abs(k)) <= 2 ** (bits - 1) - 1


def test_quantize_checkpoint(ckpt):
    out = attacks.quantize(ckpt, 8)
    for k, v in out.params.items():
        if attacks.prunable(k, v):
            assert len(np.unique(v)) <= 255
        else:
            assert np.array_equal(v, ckpt.params[k])
    with pytest.raises(ValueError):
        attacks.quantize(ckpt, 1)


def test_finetune_zero_epochs_is_identity(ckpt):
    x = np.zeros((8, 32, 65), np.float32)
    assert clf.state_equal(attacks.finetune(ckpt, x, np.zeros(8, int), 0, 1e-4), ckpt)


def test_finetune_changes_weights_deterministically(ckpt):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 32, 65)).astype(np.float32)
    y = rng.integers(0, 4, 16)
    a = attacks.finetune(ckpt, x, y, 1, 1e-3)
    b = attacks.finetune(ckpt, x, y, 1, 1e-3)
    assert clf.state_equal(a, b)
    assert not clf.state_equal(a, ckpt)
    assert a.metrics["attack"]["kind"] == "finetune"


def test_blur_small_sigma_is_near_identity():
    x = np.random.default_rng(1).standard_normal((32, 65)).astype(np.float32)
    assert np.max(np.abs(attacks.sanitize_input(x, "gaussian_blur", {"sigma": 1e-3}) - x)) < 1e-6
    assert np.array_equal(attacks.sanitize_input(x, "gaussian_blur", {"sigma": 0}), x)


def test_blur_preserves_constants_and_mean_locally():
    x = np.full((32, 65), 2.5, np.float32)
    np.testing.assert_allclose(attacks.sanitize_input(x, "gaussian_blur", {"sigma": 1.0}), x, atol=1e-6)
    np.testing.assert_allclose(attacks.sanitize_input(x, "median3"), x)


def test_blur_batch_matches_single():
    x = np.random.default_rng(2).standard_normal((3, 32, 65)).astype(np.float32)
    batch = attacks.sanitize_input(x, "gaussian_blur", {"sigma": 1.0})
    np.testing.assert_allclose(batch[1], attacks.sanitize_input(x[1], "gaussian_blur", {"sigma": 1.0}), atol=1e-6)


def test_median_removes_isolated_spike():
    x = np.zeros((32, 65), np.float32)
    x[10, 10] = 100.0
    assert not np.any(attacks.sanitize_input(x, "median3"))


def test_noise_is_seeded_with_requested_sigma():
    x = np.zeros((200, 32, 65), np.float32)
    a = attacks.sanitize_input(x, "noise", {"sigma": 0.05}, seed=3)
    assert np.array_equal(a, attacks.sanitize_input(x, "noise", {"sigma": 0.05}, seed=3))
    assert abs(a.std() - 0.05) < 1e-3


def test_sanitize_errors():
    with pytest.raises(ValueError):
        attacks.sanitize_input(np.zeros((32, 65)), "jpeg")
    with pytest.raises(ValueError):
        attacks.sanitize_input(np.zeros((32, 60)), "median3")


def test_sanitize_chain_applies_in_order():
    x = np.random.default_rng(4).standard_normal((32, 65)).astype(np.float32)
    steps = (("gaussian_blur", {"sigma": 1.0}), ("noise", {"sigma": 0.05}))
    manual = attacks.sanitize_input(attacks.sanitize_input(x, "gaussian_blur", {"sigma": 1.0}), "noise",
                                    {"sigma": 0.05}, seed=1)
    np.testing.assert_array_equal(attacks.sanitize_chain(x, steps), manual)


def test_evade_budget_and_zero_eps():
    m = clf.build_model("mini_resnet", 4, seed=0).eval()
    x = np.random.default_rng(5).standard_normal((8, 32, 65)).astype(np.float32)
    with torch.no_grad():
        y = m(torch.from_numpy(x)).argmax(1).numpy()
    same, changed = attacks.evade(m, x, y, 0.0, 10)
    assert np.array_equal(same, x) and not changed.any()
    adv, changed = attacks.evade(m, x, y, 0.25, 10)
    assert np.max(np.abs(adv - x)) <= 0.25 + 1e-6
    with torch.no_grad():
        after = m(torch.from_numpy(adv)).argmax(1).numpy()
    assert np.array_equal(changed, after != y)
    one, flag = attacks.evade(m, x[0], y[0], 0.25, 3)
    assert one.shape == (32, 65) and isinstance(bool(flag), bool)
