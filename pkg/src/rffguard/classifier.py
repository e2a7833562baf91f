"""Residual classifier over log-Mel planes with a reserved watermark output.

The network always has C + 1 outputs; index C is the watermark class and no
clean sample is ever labelled with it.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor_nn as tnn
from .checkpoint import Checkpoint
from .watermark import WatermarkKey, apply_trigger, craft_adversarial, signature_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArchPreset:
    name: str
    stem_width: int
    widths: tuple[int, ...]
    blocks: tuple[int, ...]
    strides: tuple[int, ...]
    residual: bool = True

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


PRESETS = {
    "shallow_cnn": ArchPreset("shallow_cnn", 16, (16, 32, 64), (1, 1, 1), (1, 2, 2), residual=False),
    "mini_resnet": ArchPreset("mini_resnet", 16, (16, 32, 64), (1, 1, 1), (1, 2, 2)),
    "resnet18": ArchPreset("resnet18", 64, (64, 128, 256, 512), (2, 2, 2, 2), (1, 2, 2, 2)),
    "resnet34": ArchPreset("resnet34", 64, (64, 128, 256, 512), (3, 4, 6, 3), (1, 2, 2, 2)),
}


def _conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride, 1, bias=False)


class ResidualBlock(nn.Module):
    """y = relu(F(x) + shortcut(x)), F = conv-norm-relu-conv-norm."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = _conv3x3(cin, cout, stride)
        self.norm1 = tnn.group_norm(cout)
        self.conv2 = _conv3x3(cout, cout)
        self.norm2 = tnn.group_norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), tnn.group_norm(cout))

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.branch(x) + identity)


class PlainBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = _conv3x3(cin, cout, stride)
        self.norm = tnn.group_norm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


def residual_block(x: torch.Tensor, block: ResidualBlock) -> torch.Tensor:
    if x.shape[1] != block.conv1.in_channels:
        raise ValueError(f"block expects {block.conv1.in_channels} channels, got {x.shape[1]}")
    return block(x)


class Model(nn.Module):
    def __init__(self, preset: ArchPreset, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 device classes")
        self.preset = preset
        self.num_classes = num_classes
        self.feature_dim = preset.feature_dim
        self.stem = nn.Sequential(_conv3x3(1, preset.stem_width), tnn.group_norm(preset.stem_width), nn.ReLU())
        layers = []
        cin = preset.stem_width
        block_cls = ResidualBlock if preset.residual else PlainBlock
        for width, count, stride in zip(preset.widths, preset.blocks, preset.strides):
            for i in range(count):
                layers.append(block_cls(cin, width, stride if i == 0 else 1))
                cin = width
        self.blocks = nn.Sequential(*layers)
        self.head = nn.Linear(self.feature_dim, num_classes + 1)

    @property
    def y_wm(self) -> int:
        return self.num_classes

    @property
    def out_dim(self) -> int:
        return self.num_classes + 1

    def arch(self) -> dict:
        return {"kind": "classifier", "preset": self.preset.name, "num_classes": self.num_classes}

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(1)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 32, 65) or (N, 1, 32, 65) input, got {tuple(x.shape)}")
        return x

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate representation: global-average-pooled last stage."""
        return self.blocks(self.stem(self._prep(x))).mean(dim=(2, 3))

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features(x)
        return self.head(f), f

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def residual_block_count(self) -> int:
        return sum(isinstance(b, ResidualBlock) for b in self.blocks)


def build_model(preset: str | ArchPreset, num_classes: int, seed: int = 0) -> Model:
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset]
    model = Model(preset, num_classes)
    tnn.he_init_(model, tnn.torch_generator(seed))
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    if ckpt.arch.get("kind") != "classifier":
        raise ValueError(f"checkpoint holds a {ckpt.arch.get('kind')!r}, not a classifier")
    model = Model(PRESETS[ckpt.arch["preset"]], ckpt.arch["num_classes"])
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model


@torch.no_grad()
def predict(model: Model, spec) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N, C+1) and argmax classes for one grid or a batch."""
    x = torch.as_tensor(np.asarray(getattr(spec, "values", spec), dtype=np.float32))
    single = x.ndim == 2
    if single:
        x = x.unsqueeze(0)
    if tuple(x.shape[-2:]) != (32, 65):
        raise ValueError(f"spectrogram shape {tuple(x.shape[-2:])} != (32, 65)")
    logits = torch.cat([model(x[i : i + 256]) for i in range(0, len(x), 256)]).numpy()
    cls = logits.argmax(1)
    return (logits[0], cls[0]) if single else (logits, cls)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    macro: dict[str, float]
    weighted: dict[str, float]
    min_class: dict[str, float]
    max_class: dict[str, float]
    confusion: list[list[int]]  # rows: true class, cols: predicted class incl. y_wm
    wm_prediction_rate: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_predictions(y_true, y_pred, num_classes: int) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty set")
    if y_true.min() < 0 or y_true.max() >= num_classes:
        raise ValueError("labels must lie in [0, C-1]")
    conf = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf[:, :num_classes]).astype(np.float64)
    support = conf.sum(1)
    predicted = conf[:, :num_classes].sum(0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    n = len(y_true)
    w = support / n
    accuracy = float(tp.sum() / n)
    present = support > 0
    stats = {"precision": precision, "recall": recall, "f1": f1}
    return EvalReport(
        accuracy=accuracy,
        precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(), support=support.tolist(),
        macro={k: float(v[present].mean()) for k, v in stats.items()},
        # weighted recall reduces to sum(tp) / n; use that form so it equals accuracy exactly
        weighted={"precision": float(np.dot(w, precision)), "recall": accuracy, "f1": float(np.dot(w, f1))},
        min_class={k: float(v[present].min()) for k, v in stats.items()},
        max_class={k: float(v[present].max()) for k, v in stats.items()},
        confusion=conf.tolist(),
        wm_prediction_rate=float(np.mean(y_pred == num_classes)),
        count=n,
    )


def evaluate(model: Model, x, y) -> EvalReport:
    _, pred = predict(model, x)
    return report_from_predictions(y, np.atleast_1d(pred), model.num_classes)


# ---------------------------------------------------------------------------
# training


@dataclass
class WatermarkTrainConfig:
    trigger: bool = True
    adversarial: bool = True
    signature: bool = True
    p_wm: float = 0.05
    adv_fraction: float = 0.5
    trig_weight: float = 1.0
    adv_weight: float = 1.0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0


class TrainingDiverged(RuntimeError):
    pass


def _loss_terms(model: Model, xb: torch.Tensor, yb: torch.Tensor, hyper: tnn.TrainHyper,
                key: WatermarkKey | None, wm: WatermarkTrainConfig, rng: np.random.Generator) -> dict:
    logits, feats = model.forward_features(xb)
    terms = {"task": tnn.task_loss(logits, yb, hyper)}
    zero = logits.new_zeros(())
    terms.update(trig=zero, adv=zero, sig=zero)
    if key is None:
        return terms
    n = len(xb)
    if wm.trigger or wm.adversarial:
        n_wm = min(n, max(1, math.ceil(wm.p_wm * n)))
        idx = np.sort(rng.choice(n, size=n_wm, replace=False))
        triggered = apply_trigger(xb[torch.as_tensor(idx)].detach(), key)
        n_adv = int(round(wm.adv_fraction * n_wm)) if wm.adversarial else 0
        if not wm.trigger:
            n_adv = n_wm
        plain, adv = triggered[n_adv:], triggered[:n_adv]
        if len(plain):
            target = torch.full((len(plain),), key.y_wm, dtype=torch.long)
            terms["trig"] = wm.trig_weight * tnn.cross_entropy(model(plain), target)
        if len(adv):
            adv_x = torch.from_numpy(craft_adversarial(model, adv, key))
            target = torch.full((len(adv),), key.y_wm, dtype=torch.long)
            terms["adv"] = wm.adv_weight * tnn.cross_entropy(model(adv_x), target)
    if wm.signature:
        terms["sig"] = signature_loss(feats.mean(0), torch.as_tensor(key.v, dtype=feats.dtype), key.lam)
    return terms


@torch.no_grad()
def _validate(model: Model, x: torch.Tensor, y: torch.Tensor, hyper: tnn.TrainHyper,
              key: WatermarkKey | None, wm: WatermarkTrainConfig) -> dict:
    correct = 0
    loss = 0.0
    trig_loss = 0.0
    hits = 0
    for i in range(0, len(x), 256):
        xb, yb = x[i : i + 256], y[i : i + 256]
        logits = model(xb)
        correct += int((logits.argmax(1) == yb).sum())
        loss += float(tnn.task_loss(logits, yb, hyper)) * len(xb)
        if key is not None and (wm.trigger or wm.adversarial):
            tl = model(apply_trigger(xb, key))
            target = torch.full((len(xb),), key.y_wm, dtype=torch.long)
            trig_loss += float(tnn.cross_entropy(tl, target)) * len(xb)
            hits += int((tl.argmax(1) == key.y_wm).sum())
    n = len(x)
    out = {"val_acc": correct / n, "val_task_loss": loss / n, "val_loss": (loss + trig_loss) / n}
    if key is not None and (wm.trigger or wm.adversarial):
        out["val_asr"] = hits / n
    return out


def train(train_x, train_y, val_x, val_y, num_classes: int, preset: str = "mini_resnet",
          wm_key: WatermarkKey | None = None, hyper: tnn.TrainHyper | None = None,
          wm_cfg: WatermarkTrainConfig | None = None, epochs: int = 20, seed: int = 0,
          aug: tnn.SpecAugConfig | None = None, init: Checkpoint | None = None,
          early_stopping: bool = True, keep_best: bool = True, config_digest: str = "") -> TrainResult:
    """Minimise task + trigger + adversarial-trigger + signature losses.

    Keeps the parameters of the best validation epoch (accuracy, ties broken
    by lower validation loss including the trigger term) and stops after
    ``early_stop_patience`` epochs without improvement.  With
    ``keep_best=False`` the final weights are returned instead.
    """
    hyper = hyper or tnn.TrainHyper()
    wm_cfg = wm_cfg or WatermarkTrainConfig()
    aug = aug if aug is not None else tnn.SpecAugConfig()
    if wm_key is not None and wm_key.num_classes != num_classes:
        raise ValueError("watermark key was generated for a different class count")
    t0 = time.perf_counter()
    if init is not None:
        model = model_from_checkpoint(init)
    else:
        model = build_model(preset, num_classes, seed)
    model.train()
    rng = np.random.default_rng([int(seed), 0x54524E])
    store = tnn.ParamStore.from_module(model)
    xtr = np.asarray(train_x, dtype=np.float32)
    ytr = np.asarray(train_y, dtype=np.int64)
    xv = torch.as_tensor(np.asarray(val_x, dtype=np.float32))
    yv = torch.as_tensor(np.asarray(val_y, dtype=np.int64))
    n = len(xtr)
    batches = max(1, math.ceil(n / hyper.batch_size))
    total_steps = max(1, batches * epochs)
    history: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best = (-1.0, math.inf)
    best_epoch = 0
    stale = 0
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        sums = {"task": 0.0, "trig": 0.0, "adv": 0.0, "sig": 0.0}
        for b in range(batches):
            idx = perm[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            xb_np = tnn.augment_batch(xtr[idx], rng, aug)
            xb = torch.from_numpy(xb_np)
            yb = torch.from_numpy(ytr[idx])
            terms = _loss_terms(model, xb, yb, hyper, wm_key, wm_cfg, rng)
            loss = terms["task"] + terms["trig"] + terms["adv"] + terms["sig"]
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}: "
                                       + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items()))
            tnn.backward(loss, store)
            lr = tnn.lr_schedule(hyper.schedule, min(step, total_steps), total_steps, hyper.learning_rate)
            tnn.adamw_step(store, hyper, lr)
            step += 1
            for k in sums:
                sums[k] += float(terms[k].detach()) / batches
        model.eval()
        val = _validate(model, xv, yv, hyper, wm_key, wm_cfg)
        model.train()
        record = {"epoch": epoch, **{f"train_{k}": v for k, v in sums.items()}, **val}
        history.append(record)
        logger.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        score = (val["val_acc"], val["val_loss"])
        if score[0] > best[0] or (score[0] == best[0] and score[1] < best[1]):
            best = score
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if early_stopping and stale >= hyper.early_stop_patience:
                break
    if not keep_best and history:
        best_epoch = history[-1]["epoch"]
    elif epochs > 0:
        model.load_state_dict(best_state)
    model.eval()
    metrics = history[best_epoch] if history else {}
    ckpt = Checkpoint.from_module(model, model.arch(), config_digest=config_digest,
                                  epoch=best_epoch if history else (init.epoch if init else 0),
                                  metrics=dict(metrics))
    if init is not None and epochs == 0:
        ckpt = init.copy()
    return TrainResult(ckpt, history, best_epoch, time.perf_counter() - t0)


def state_equal(a: Checkpoint, b: Checkpoint) -> bool:
    return list(a.params) == list(b.params) and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


__all__ = [
    "ArchPreset", "PRESETS", "ResidualBlock", "Model", "build_model", "model_from_checkpoint", "predict",
    "EvalReport", "report_from_predictions", "evaluate", "WatermarkTrainConfig", "TrainResult", "train",
    "TrainingDiverged", "residual_block", "state_equal",
]
