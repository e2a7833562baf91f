"""Training primitives shared by the classifier and the guard.

Tensors and reverse-mode differentiation come from PyTorch (CPU, float32).
The optimizer update, LR schedules, task losses and spectrogram augmentation
are written out here so their exact rules are visible and testable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

GN_GROUPS = 8


class GraphError(RuntimeError):
    """Raised when gradients are requested from a detached or consumed graph."""


@dataclass
class TrainHyper:
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    schedule: str = "onecycle"  # onecycle | cosine | constant
    early_stop_patience: int = 5
    label_smoothing: float = 0.0
    focal_gamma: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not 0.0 <= self.label_smoothing <= 0.2:
            raise ValueError("label_smoothing must lie in [0, 0.2]")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.schedule not in ("onecycle", "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.betas = tuple(self.betas)


class ParamStore:
    """Named parameters plus AdamW moments and the shared step counter."""

    def __init__(self, params: dict[str, torch.Tensor]):
        self.params = dict(params)
        self.grads: dict[str, torch.Tensor] = {}
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls({n: p for n, p in module.named_parameters()})

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)


def conv2d_forward(x: torch.Tensor, kernel: torch.Tensor, stride: int = 1, padding: int = 0,
                   bias: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def backward(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every parameter in ``store``.

    Parameters the loss does not reach receive zero gradients.  The graph is
    freed afterwards; calling again on the same loss raises GraphError.
    """
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    if not loss.requires_grad:
        raise GraphError("loss has no recorded graph (detached or computed under no_grad)")
    names = list(store.params)
    tensors = [store.params[n] for n in names]
    try:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    except RuntimeError as exc:  # graph already freed by an earlier backward
        raise GraphError(str(exc)) from exc
    store.grads = {n: (torch.zeros_like(t) if g is None else g.detach())
                   for n, t, g in zip(names, tensors, grads)}
    return store.grads


@torch.no_grad()
def adamw_step(store: ParamStore, hyper: TrainHyper, lr: float | None = None,
               grads: dict[str, torch.Tensor] | None = None) -> ParamStore:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

        theta <- theta * (1 - lr * wd)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    grads = store.grads if grads is None else grads
    lr = hyper.learning_rate if lr is None else lr
    b1, b2 = hyper.betas
    store.step += 1
    t = store.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = store.exp_avg[name]
        v = store.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if hyper.weight_decay:
            p.mul_(1.0 - lr * hyper.weight_decay)
        denom = (v / bc2).sqrt_().add_(hyper.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return store


ONECYCLE_WARMUP = 0.3
ONECYCLE_DIV = 25.0


def lr_schedule(kind: str, step: int, total_steps: int, base_lr: float) -> float:
    """Learning rate at ``step`` of ``total_steps``.

    onecycle: linear ramp from base/25 up to base at 30% of the run, then
    cosine down to base/25.  cosine: half-cosine from base to 0.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if kind == "constant" or total_steps == 0:
        return base_lr
    if kind == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * step / total_steps)) * base_lr
    if kind == "onecycle":
        floor = base_lr / ONECYCLE_DIV
        peak_step = ONECYCLE_WARMUP * total_steps
        if step <= peak_step:
            return floor + (base_lr - floor) * (step / peak_step if peak_step > 0 else 1.0)
        frac = (step - peak_step) / (total_steps - peak_step)
        return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule {kind!r}")


def _check_batch(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("logits / labels batch size mismatch")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_batch(logits, labels)
    logp = F.log_softmax(logits, dim=1)
    return -logp.gather(1, labels.view(-1, 1)).mean()


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float) -> torch.Tensor:
    """Batch mean of -(1 - p_true)^gamma * log p_true."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    _check_batch(logits, labels)
    logp = F.log_softmax(logits, dim=1).gather(1, labels.view(-1, 1)).squeeze(1)
    if gamma == 0:
        return -logp.mean()
    p = logp.exp()
    return -((1.0 - p).clamp_min(0.0) ** gamma * logp).mean()


def ce_label_smoothing(logits: torch.Tensor, labels: torch.Tensor, alpha: float) -> torch.Tensor:
    """Cross-entropy against (1 - alpha) * onehot + alpha / C over all C outputs."""
    if not 0.0 <= alpha <= 0.2:
        raise ValueError("label smoothing must lie in [0, 0.2]")
    _check_batch(logits, labels)
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels.view(-1, 1)).squeeze(1)
    uniform = -logp.mean(dim=1)
    return ((1.0 - alpha) * nll + alpha * uniform).mean()


def task_loss(logits: torch.Tensor, labels: torch.Tensor, hyper: TrainHyper) -> torch.Tensor:
    if hyper.focal_gamma > 0:
        return focal_loss(logits, labels, hyper.focal_gamma)
    return ce_label_smoothing(logits, labels, hyper.label_smoothing)


@dataclass(frozen=True)
class SpecAugConfig:
    p_time: float = 0.5
    max_time_width: int = 8
    p_freq: float = 0.5
    max_freq_height: int = 4
    noise_sigma: float = 0.02

    @classmethod
    def off(cls) -> "SpecAugConfig":
        return cls(0.0, 0, 0.0, 0, 0.0)


def light_spec_aug(spec: np.ndarray, rng: np.random.Generator, cfg: SpecAugConfig = SpecAugConfig()) -> np.ndarray:
    """One optional time mask, one optional frequency mask (filled with 0), small Gaussian noise.

    Works on a single (mels, frames) grid and returns a new array.
    """
    out = np.array(spec, dtype=np.float32, copy=True)
    n_mels, n_frames = out.shape[-2:]
    if cfg.max_time_width > 0 and rng.random() < cfg.p_time:
        w = int(rng.integers(1, min(cfg.max_time_width, n_frames) + 1))
        t0 = int(rng.integers(0, n_frames - w + 1))
        out[..., :, t0 : t0 + w] = 0.0
    if cfg.max_freq_height > 0 and rng.random() < cfg.p_freq:
        h = int(rng.integers(1, min(cfg.max_freq_height, n_mels) + 1))
        f0 = int(rng.integers(0, n_mels - h + 1))
        out[..., f0 : f0 + h, :] = 0.0
    if cfg.noise_sigma > 0:
        out += (cfg.noise_sigma * rng.standard_normal(out.shape)).astype(np.float32)
    return out


def augment_batch(batch: np.ndarray, rng: np.random.Generator, cfg: SpecAugConfig) -> np.ndarray:
    return np.stack([light_spec_aug(s, rng, cfg) for s in batch])


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(GN_GROUPS, channels), channels)


def he_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled normal init for conv / linear weights, zero biases, unit norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            fan_in = w.shape[1] * int(np.prod(w.shape[2:])) if w.ndim > 2 else w.shape[1]
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * int(np.prod(w.shape[2:]))
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFFFFFFFFFF)
    return g
