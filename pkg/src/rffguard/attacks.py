"""Adversary toolkit: weight tampering, input sanitisation and input evasion."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import Checkpoint

logger = logging.getLogger(__name__)

SANITIZE_METHODS = ("gaussian_blur", "median3", "noise")


def prunable(name: str, arr: np.ndarray) -> bool:
    """Conv and linear weights; normalisation parameters and biases are exempt."""
    return name.endswith("weight") and arr.ndim >= 2


def prune(ckpt: Checkpoint, rho: float) -> Checkpoint:
    """Global magnitude pruning: zero the floor(rho * n) smallest |w| over all prunable tensors."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("prune fraction must lie in [0, 1)")
    out = ckpt.copy()
    names = [k for k, v in out.params.items() if prunable(k, v)]
    flat = np.concatenate([out.params[k].ravel() for k in names])
    k = int(np.floor(rho * flat.size))
    if k == 0:
        return out
    order = np.argsort(np.abs(flat), kind="stable")
    mask = np.ones(flat.size, dtype=bool)
    mask[order[:k]] = False
    offset = 0
    for name in names:
        arr = out.params[name]
        m = mask[offset : offset + arr.size].reshape(arr.shape)
        out.params[name] = np.where(m, arr, np.float32(0.0)).astype(np.float32)
        offset += arr.size
    out.metrics = {**out.metrics, "attack": {"kind": "prune", "rho": rho}}
    return out


def quantize_tensor(w: np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor uniform quantisation, round-half-even, dequantised to float32."""
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        return w.copy(), 0.0
    scale = peak / qmax
    q = np.rint(w.astype(np.float64) / scale)  # rint rounds half to even
    return (q * scale).astype(np.float32), scale


def quantize(ckpt: Checkpoint, bits: int) -> Checkpoint:
    if not 2 <= bits <= 16:
        raise ValueError("bits must lie in [2, 16]")
    out = ckpt.copy()
    scales = {}
    for name, arr in out.params.items():
        if prunable(name, arr):
            out.params[name], scales[name] = quantize_tensor(arr, bits)
    out.metrics = {**out.metrics, "attack": {"kind": "quantize", "bits": bits}}
    return out


def finetune(ckpt: Checkpoint, x, y, epochs: int, lr: float, seed: int = 0, batch_size: int = 64) -> Checkpoint:
    """Task-only training continued from ``ckpt`` (no watermark terms, constant LR, no early stop)."""
    from . import classifier
    from . import tensor_nn as tnn

    if epochs <= 0:
        return ckpt.copy()
    hyper = tnn.TrainHyper(learning_rate=lr, schedule="constant", batch_size=batch_size)
    num_classes = ckpt.arch["num_classes"]
    # no held-out set is assumed; the attacker monitors its own data
    res = classifier.train(x, y, x, y, num_classes, wm_key=None, hyper=hyper, epochs=epochs, seed=seed,
                           aug=tnn.SpecAugConfig.off(), init=ckpt, early_stopping=False, keep_best=False)
    out = res.checkpoint
    out.config_digest = ckpt.config_digest
    out.metrics = {**ckpt.metrics, "attack": {"kind": "finetune", "epochs": epochs, "lr": lr}}
    return out


def sanitize_input(spec, method: str, params: dict | None = None, seed: int = 0) -> np.ndarray:
    """Filter a (mels, frames) grid or a batch of grids.

    gaussian_blur: separable Gaussian, truncated at 3 sigma, edge-replicate.
    median3: 3x3 median, edge-replicate.  noise: additive Gaussian.
    """
    params = params or {}
    x = np.asarray(getattr(spec, "values", spec), dtype=np.float32)
    if x.shape[-2:] != (32, 65):
        raise ValueError(f"spectrogram shape {x.shape[-2:]} != (32, 65)")
    spatial = (0,) * (x.ndim - 2)
    if method == "gaussian_blur":
        sigma = float(params.get("sigma", 1.0))
        if sigma <= 0:
            return x.copy()
        return ndimage.gaussian_filter(x, sigma=spatial + (sigma, sigma), mode="nearest", truncate=3.0)
    if method == "median3":
        return ndimage.median_filter(x, size=(1,) * (x.ndim - 2) + (3, 3), mode="nearest")
    if method == "noise":
        sigma = float(params.get("sigma", 0.05))
        rng = np.random.default_rng([0x534E5A, int(seed)])
        return (x + sigma * rng.standard_normal(x.shape)).astype(np.float32)
    raise ValueError(f"unknown sanitisation method {method!r}; choose from {SANITIZE_METHODS}")


def sanitize_chain(spec, steps, seed: int = 0) -> np.ndarray:
    x = np.asarray(spec, dtype=np.float32)
    for i, (method, params) in enumerate(steps):
        x = sanitize_input(x, method, params, seed=seed + i)
    return x


def evade(model: torch.nn.Module, spec, true_label, eps: float, steps: int,
          step_size: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Untargeted L-inf PGD against the true label.

    Returns the perturbed grid(s) and a boolean per input telling whether the
    predicted class changed.
    """
    single = np.ndim(spec) == 2
    x0 = torch.as_tensor(np.asarray(spec, dtype=np.float32))
    if single:
        x0 = x0.unsqueeze(0)
    labels = torch.as_tensor(np.atleast_1d(np.asarray(true_label, dtype=np.int64)))
    step_size = 2.5 * eps / max(steps, 1) if step_size is None else step_size
    delta = torch.zeros_like(x0)
    if eps > 0:
        for _ in range(steps):
            delta.requires_grad_(True)
            loss = F.cross_entropy(model(x0 + delta), labels, reduction="sum")
            (grad,) = torch.autograd.grad(loss, delta)
            if not torch.isfinite(grad).all():
                raise FloatingPointError("non-finite input gradient during evasion")
            with torch.no_grad():
                delta = (delta + step_size * grad.sign()).clamp_(-eps, eps)
    with torch.no_grad():
        before = model(x0).argmax(1)
        x_adv = x0 + delta
        after = model(x_adv).argmax(1)
    out = x_adv.numpy()
    changed = (before != after).numpy()
    return (out[0], changed[0]) if single else (out, changed)


@dataclass
class AttackReport:
    kind: str
    params: dict
    clean_acc_pre: float | None = None
    clean_acc_post: float | None = None
    asr_pre: float | None = None
    asr_post: float | None = None
    signature_pre: float | None = None
    signature_post: float | None = None
    signature_pass_post: bool | None = None
    guard_flag_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)
