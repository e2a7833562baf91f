from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from rffguard import classifier as clf
from rffguard import tensor_nn as tnn
from rffguard import watermark as wmk
from rffguard.checkpoint import Checkpoint, CheckpointError

import oracles


def _toy_data(n_per_class=40, classes=3, seed=0):
    """Separable grids: class c adds a bright band 2 + 6c rows wide (pooling is shift-blind)."""
    rng = np.random.default_rng(seed)
    x, y = [], []
    for c in range(classes):
        g = rng.standard_normal((n_per_class, 32, 65)).astype(np.float32) * 0.5
        g[:, 4 : 6 + 6 * c, :] += 2.0
        x.append(g)
        y += [c] * n_per_class
    x = np.concatenate(x)
    y = np.array(y)
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def test_block_with_zero_branch_is_identity():
    block = clf.ResidualBlock(8, 8)
    with torch.no_grad():
        block.norm2.weight.zero_()
        block.norm2.bias.zero_()
    x = torch.rand(2, 8, 6, 7)  # non-negative so the output ReLU is transparent
    torch.testing.assert_close(clf.residual_block(x, block), x)
    x.requires_grad_(True)
    (g,) = torch.autograd.grad(clf.residual_block(x, block).sum(), x)
    torch.testing.assert_close(g, torch.ones_like(x))


@pytest.mark.parametrize("cin,cout,stride", [(8, 8, 1), (8, 16, 2), (16, 16, 2)])
def test_block_matches_composed_primitives(cin, cout, stride):
    torch.manual_seed(0)
    block = clf.ResidualBlock(cin, cout, stride)
    tnn.he_init_(block, tnn.torch_generator(1))
    with torch.no_grad():
        for m in block.modules():
            if isinstance(m, torch.nn.GroupNorm):
                m.weight.normal_()
                m.bias.normal_()
    x = torch.randn(2, cin, 9, 11)

    def gn(t, mod):
        return F.group_norm(t, 8, mod.weight, mod.bias, mod.eps)

    h = F.relu(gn(tnn.conv2d_forward(x, block.conv1.weight, stride, 1), block.norm1))
    h = gn(tnn.conv2d_forward(h, block.conv2.weight, 1, 1), block.norm2)
    if block.shortcut is None:
        sc = x
    else:
        sc = gn(tnn.conv2d_forward(x, block.shortcut[0].weight, stride, 0), block.shortcut[1])
    ref = F.relu(h + sc)
    torch.testing.assert_close(clf.residual_block(x, block), ref, atol=1e-5, rtol=1e-5)


def test_block_channel_mismatch():
    with pytest.raises(ValueError):
        clf.residual_block(torch.zeros(1, 4, 5, 5), clf.ResidualBlock(8, 8))


def test_presets_and_output_dim():
    m = clf.build_model("mini_resnet", 10, seed=0)
    assert m(torch.zeros(2, 32, 65)).shape == (2, 11)
    assert m.feature_dim == 64 and m.residual_block_count() == 3
    assert clf.build_model("resnet34", 10).residual_block_count() == 16
    assert clf.build_model("resnet18", 10).residual_block_count() == 8
    assert clf.PRESETS["resnet18"].blocks == (2, 2, 2, 2)
    assert clf.PRESETS["resnet34"].blocks == (3, 4, 6, 3)
    assert clf.build_model("shallow_cnn", 4)(torch.zeros(1, 32, 65)).shape == (1, 5)
    with pytest.raises(ValueError):
        clf.build_model("vgg", 10)
    with pytest.raises(ValueError):
        clf.build_model("mini_resnet", 1)


def test_same_seed_same_init():
    x = torch.randn(3, 32, 65)
    a = clf.build_model("mini_resnet", 5, seed=3)
    b = clf.build_model("mini_resnet", 5, seed=3)
    c = clf.build_model("mini_resnet", 5, seed=4)
    assert torch.equal(a(x), b(x))
    assert not torch.equal(a(x), c(x))


def test_predict_contract():
    m = clf.build_model("mini_resnet", 10, seed=0).eval()
    x = np.random.default_rng(0).standard_normal((5, 32, 65)).astype(np.float32)
    l1, c1 = clf.predict(m, x)
    l2, _ = clf.predict(m, x)
    assert np.array_equal(l1, l2)
    assert np.all(np.isfinite(l1))
    assert np.all((c1 >= 0) & (c1 <= 10))
    sm = torch.softmax(torch.tensor(l1, dtype=torch.float64), 1).sum(1)
    np.testing.assert_allclose(sm.numpy(), 1.0, atol=1e-6)
    single_logits, single_cls = clf.predict(m, x[0])
    assert single_logits.shape == (11,)
    with pytest.raises(ValueError):
        clf.predict(m, np.zeros((2, 16, 65), np.float32))


def test_report_hand_confusion():
    conf = [[5, 0, 0], [1, 4, 0], [0, 2, 3]]
    y_true, y_pred = [], []
    for t, row in enumerate(conf):
        for p, n in enumerate(row):
            y_true += [t] * n
            y_pred += [p] * n
    rep = clf.report_from_predictions(y_true, y_pred, 3)
    np.testing.assert_allclose(rep.precision, [5 / 6, 4 / 6, 1.0])
    np.testing.assert_allclose(rep.recall, [1.0, 0.8, 0.6])
    assert rep.accuracy == 12 / 15
    assert rep.weighted["recall"] == rep.accuracy
    assert rep.confusion[2] == [0, 2, 3, 0]
    assert rep.min_class["recall"] == pytest.approx(0.6) and rep.max_class["precision"] == 1.0


def test_report_perfect_predictor():
    y = np.arange(20) % 4
    rep = clf.report_from_predictions(y, y, 4)
    assert rep.accuracy == 1.0
    for d in (rep.macro, rep.weighted, rep.min_class):
        assert all(v == 1.0 for v in d.values())
    assert rep.wm_prediction_rate == 0.0


def test_report_counts_watermark_predictions():
    rep = clf.report_from_predictions([0, 1, 1, 0], [0, 2, 1, 2], 2)
    assert rep.wm_prediction_rate == 0.5
    assert rep.recall == [0.5, 0.5]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 200), st.integers(0, 2**31))
def test_weighted_recall_is_accuracy(classes, n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    p = rng.integers(0, classes + 1, n)
    rep = clf.report_from_predictions(y, p, classes)
    assert rep.weighted["recall"] == rep.accuracy
    for v in rep.precision + rep.recall + rep.f1:
        assert 0.0 <= v <= 1.0


def test_report_errors():
    with pytest.raises(ValueError):
        clf.report_from_predictions([], [], 3)
    with pytest.raises(ValueError):
        clf.report_from_predictions([3], [0], 3)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = clf.build_model("mini_resnet", 10, seed=2).eval()
    ck = Checkpoint.from_module(m, m.arch(), config_digest="abc", epoch=3, metrics={"val_acc": 0.5})
    ck.save(tmp_path / "m.ckpt")
    loaded = Checkpoint.load(tmp_path / "m.ckpt")
    assert loaded.arch == m.arch() and loaded.config_digest == "abc" and loaded.epoch == 3
    m2 = clf.model_from_checkpoint(loaded)
    x = np.random.default_rng(0).standard_normal((100, 32, 65)).astype(np.float32)
    assert np.array_equal(clf.predict(m, x)[0], clf.predict(m2, x)[0])


def test_checkpoint_corruption_detected(tmp_path):
    m = clf.build_model("mini_resnet", 3, seed=0)
    raw = bytearray(Checkpoint.from_module(m, m.arch()).to_bytes())
    raw[100] ^= 0xFF
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"garbage" * 10)


def test_loss_terms_zero_without_key():
    m = clf.build_model("mini_resnet", 3, seed=0)
    x, y = _toy_data(4)
    terms = clf._loss_terms(m, torch.from_numpy(x[:16]), torch.from_numpy(y[:16]), tnn.TrainHyper(), None,
                            clf.WatermarkTrainConfig(), np.random.default_rng(0))
    assert terms["trig"].item() == 0 and terms["adv"].item() == 0 and terms["sig"].item() == 0


def test_loss_terms_with_key_and_fd_check():
    m = clf.build_model("mini_resnet", 3, seed=0).double()
    key = wmk.gen_key(1, 3, 64)
    x, y = _toy_data(4)
    xb = torch.from_numpy(x[:20]).double()
    yb = torch.from_numpy(y[:20])
    wm = clf.WatermarkTrainConfig(adversarial=False)

    def loss():
        t = clf._loss_terms(m, xb, yb, tnn.TrainHyper(label_smoothing=0.1), key, wm, np.random.default_rng(0))
        return t["task"] + t["trig"] + t["adv"] + t["sig"]

    terms = clf._loss_terms(m, xb, yb, tnn.TrainHyper(), key, wm, np.random.default_rng(0))
    assert terms["trig"].item() > 0 and terms["sig"].item() > 0
    params = [p for p in m.parameters()]
    assert oracles.fd_check_params(loss, params, coords_per_tensor=2) < 1e-3


def test_train_learns_toy_task_and_is_deterministic():
    x, y = _toy_data(30)
    xv, yv = _toy_data(10, seed=1)
    kw = dict(preset="mini_resnet", epochs=4, seed=5, aug=tnn.SpecAugConfig.off(),
              hyper=tnn.TrainHyper(learning_rate=3e-3, batch_size=16))
    a = clf.train(x, y, xv, yv, 3, **kw)
    b = clf.train(x, y, xv, yv, 3, **kw)
    assert clf.state_equal(a.checkpoint, b.checkpoint)
    assert a.history == b.history
    m = clf.model_from_checkpoint(a.checkpoint)
    assert clf.evaluate(m, xv, yv).accuracy >= 0.9
    best = max(a.history, key=lambda r: (r["val_acc"], -r["val_loss"]))
    assert a.best_epoch == best["epoch"]
    assert a.checkpoint.epoch == a.best_epoch


def test_early_stopping_patience():
    x, y = _toy_data(10)
    res = clf.train(x, y, x, y, 3, epochs=40, seed=0, aug=tnn.SpecAugConfig.off(),
                    hyper=tnn.TrainHyper(learning_rate=3e-2, batch_size=10, early_stop_patience=2,
                                         schedule="constant"))
    # a large constant step makes validation noisy, so the run stops well before the budget
    assert len(res.history) < 40
    assert len(res.history) - 1 - res.best_epoch == 2


def test_train_rejects_mismatched_key():
    x, y = _toy_data(2)
    with pytest.raises(ValueError):
        clf.train(x, y, x, y, 3, wm_key=wmk.gen_key(0, 5, 64), epochs=1)


def test_train_diverges_with_diagnostic():
    x, y = _toy_data(2)
    x[0, 0, 0] = np.nan
    with pytest.raises(clf.TrainingDiverged):
        clf.train(x, y, x, y, 3, epochs=1, aug=tnn.SpecAugConfig.off())


def test_init_with_zero_epochs_returns_copy():
    m = clf.build_model("mini_resnet", 3, seed=0)
    ck = Checkpoint.from_module(m, m.arch())
    x, y = _toy_data(2)
    res = clf.train(x, y, x, y, 3, init=ck, epochs=0)
    assert clf.state_equal(res.checkpoint, ck)


@pytest.mark.slow
def test_accuracy_monotone_in_snr(desk_run):
    import dataclasses

    from rffguard import frontend as fe
    from rffguard import rf_sim

    cfg, out, _ = desk_run
    model = clf.model_from_checkpoint(Checkpoint.load(out / "classifier-watermarked.ckpt"))
    acc = {}
    for snr in (30.0, 0.0):
        ds = dataclasses.replace(cfg.dataset, snr_db=snr)
        recs = [r for r in rf_sim.plan_dataset(ds) if r.split == "test"][:500]
        x = np.stack([fe.featurize(iq, cfg.frontend).values for _, iq in rf_sim.iter_packets(ds, recs)])
        acc[snr] = clf.evaluate(model, x, np.array([r.device_id for r in recs])).accuracy
    assert acc[30.0] >= acc[0.0]
