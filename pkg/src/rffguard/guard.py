"""ConvVAE anomaly guard trained on clean spectrograms only.

Training minimises  ||x - x_hat||^2 + beta * sum_d max(KL_d, tau_fb)  with a
linear KL warm-up on beta.  At inference an input's score mixes the
reconstruction norm and the negative ELBO, and it is flagged when the score
exceeds a threshold calibrated for a target false-positive rate on clean data.
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

logger = logging.getLogger(__name__)

GRID = (32, 65)


@dataclass(frozen=True)
class VAEPreset:
    name: str
    latent_dim: int
    base_channels: int = 64


VAE_PRESETS = {
    "base": VAEPreset("base", 32),
    "robust": VAEPreset("robust", 64),
}


@dataclass
class GuardTrainConfig:
    preset: str = "robust"
    beta_max: float = 1.0
    warmup_epochs: int = 10
    free_bits: float = 0.02
    lr: float = 2e-3
    patience: int = 10
    batch_size: int = 64
    weight_decay: float = 1e-4
    max_epochs: int = 30
    seed: int = 0
    alpha: float = 0.5
    target_fpr: float = 0.05

    def __post_init__(self):
        if self.free_bits < 0:
            raise ValueError("free_bits must be >= 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @classmethod
    def for_preset(cls, preset: str, **kw) -> "GuardTrainConfig":
        if preset == "base":
            defaults = dict(warmup_epochs=5, free_bits=0.0, lr=3e-4, patience=5)
        elif preset == "robust":
            defaults = dict(warmup_epochs=10, free_bits=0.02, lr=2e-3, patience=10)
        else:
            raise ValueError(f"unknown VAE preset {preset!r}")
        defaults.update(kw)
        return cls(preset=preset, **defaults)


def _fit_frames(x: torch.Tensor, frames: int) -> torch.Tensor:
    """Center-crop or edge-pad the last axis to ``frames``."""
    n = x.shape[-1]
    if n > frames:
        start = (n - frames) // 2
        return x[..., start : start + frames]
    if n < frames:
        return F.pad(x, (0, frames - n), mode="replicate")
    return x


class ConvVAE(nn.Module):
    """Three stride-2 4x4 convs down to (4C, 4, 8); the decoder mirrors them and crops to 65 frames."""

    def __init__(self, preset: VAEPreset):
        super().__init__()
        self.preset = preset
        c = preset.base_channels
        d = preset.latent_dim
        self.latent_dim = d
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c, 4, 2, 1), tnn.group_norm(c), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 4, 2, 1), tnn.group_norm(2 * c), nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1), tnn.group_norm(4 * c), nn.ReLU(),
            nn.Flatten(),
        )
        enc_dim = 4 * c * 4 * 8
        self.fc_mu = nn.Linear(enc_dim, d)
        self.fc_logvar = nn.Linear(enc_dim, d)
        self._dec_shape = (4 * c, 4, 9)
        self.fc_dec = nn.Linear(d, 4 * c * 4 * 9)
        self.decoder = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(4 * c, 2 * c, 4, 2, 1), tnn.group_norm(2 * c), nn.ReLU(),
            nn.ConvTranspose2d(2 * c, c, 4, 2, 1), tnn.group_norm(c), nn.ReLU(),
            nn.ConvTranspose2d(c, 1, 4, 2, 1),
        )

    def arch(self) -> dict:
        return {"kind": "vae", "preset": self.preset.name, "latent_dim": self.preset.latent_dim,
                "base_channels": self.preset.base_channels}

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc_dec(z).view(-1, *self._dec_shape)
        return _fit_frames(self.decoder(h), GRID[1])


@dataclass
class VAEOutput:
    x_hat: torch.Tensor
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor


def _prep(x) -> torch.Tensor:
    """Accept a grid, a batch of grids, or an (N, 1, mels, frames) tensor."""
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(getattr(x, "values", x), dtype=np.float32))
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    if t.ndim != 4 or tuple(t.shape[1:]) != (1, *GRID):
        raise ValueError(f"expected input of shape (N, 1, 32, 65), got {tuple(t.shape)}")
    return t.float()


def vae_forward(vae: ConvVAE, x, generator: torch.Generator | None = None,
                deterministic: bool = False) -> VAEOutput:
    """Encode, sample z = mu + sigma * eta (eta = 0 when deterministic), decode."""
    x = _prep(x)
    mu, logvar = vae.encode(x)
    if deterministic:
        z = mu
    else:
        eta = torch.randn(mu.shape, generator=generator)
        z = mu + torch.exp(0.5 * logvar) * eta
    return VAEOutput(vae.decode(z), mu, logvar, z)


def kl_per_dim(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Batch-averaged KL(N(mu, sigma^2) || N(0, 1)) for each latent dimension."""
    return (0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0)).mean(0)


def elbo_loss(x, x_hat, mu, logvar, beta: float, tau_fb: float) -> dict:
    if tau_fb < 0:
        raise ValueError("tau_fb must be >= 0")
    x = _prep(x)
    for name, t in (("x", x), ("x_hat", x_hat), ("mu", mu), ("logvar", logvar)):
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"non-finite values in {name}")
    if x.shape != x_hat.shape:
        raise ValueError(f"x {tuple(x.shape)} and x_hat {tuple(x_hat.shape)} differ")
    recon = (x - x_hat).pow(2).flatten(1).sum(1).mean()
    kl = kl_per_dim(mu, logvar)
    kl_term = torch.clamp(kl, min=tau_fb)
    return {"total": recon + beta * kl_term.sum(), "recon": recon, "kl_per_dim": kl,
            "kl_terms": beta * kl_term}


def beta_schedule(epoch: int, cfg: GuardTrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.warmup_epochs == 0:
        return cfg.beta_max
    return cfg.beta_max * min(1.0, epoch / cfg.warmup_epochs)


def build_vae(preset: str | VAEPreset, seed: int = 0) -> ConvVAE:
    if isinstance(preset, str):
        if preset not in VAE_PRESETS:
            raise ValueError(f"unknown VAE preset {preset!r}")
        preset = VAE_PRESETS[preset]
    vae = ConvVAE(preset)
    tnn.he_init_(vae, tnn.torch_generator(seed))
    with torch.no_grad():
        # start near the prior: small posterior means and unit variances
        vae.fc_mu.weight.mul_(0.1)
        vae.fc_logvar.weight.mul_(0.1)
    return vae


def vae_from_checkpoint(ckpt: Checkpoint) -> ConvVAE:
    if ckpt.arch.get("kind") != "vae":
        raise ValueError(f"checkpoint holds a {ckpt.arch.get('kind')!r}, not a VAE")
    vae = ConvVAE(VAEPreset(ckpt.arch["preset"], ckpt.arch["latent_dim"], ckpt.arch["base_channels"]))
    vae.load_state_dict(ckpt.state_dict())
    vae.eval()
    return vae


@dataclass
class GuardTrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0


class GuardDiverged(RuntimeError):
    pass


@torch.no_grad()
def _val_losses(vae: ConvVAE, x: torch.Tensor, cfg: GuardTrainConfig) -> dict:
    total = recon = 0.0
    for i in range(0, len(x), 256):
        xb = x[i : i + 256]
        out = vae_forward(vae, xb, deterministic=True)
        loss = elbo_loss(xb, out.x_hat, out.mu, out.logvar, cfg.beta_max, cfg.free_bits)
        total += float(loss["total"]) * len(xb)
        recon += float(loss["recon"]) * len(xb)
    n = len(x)
    return {"val_total": total / n, "val_recon": recon / n, "val_mse": recon / n / (GRID[0] * GRID[1])}


def train_guard(train_x, val_x, cfg: GuardTrainConfig | None = None, config_digest: str = "") -> GuardTrainResult:
    """Fit the ConvVAE on clean grids; early-stop on validation loss at the full beta."""
    cfg = cfg or GuardTrainConfig()
    t0 = time.perf_counter()
    vae = build_vae(cfg.preset, cfg.seed)
    vae.train()
    store = tnn.ParamStore.from_module(vae)
    hyper = tnn.TrainHyper(learning_rate=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                           schedule="constant", early_stop_patience=cfg.patience)
    xtr = torch.as_tensor(np.asarray(train_x, dtype=np.float32))[:, None]
    xv = torch.as_tensor(np.asarray(val_x, dtype=np.float32))[:, None]
    rng = np.random.default_rng([int(cfg.seed), 0x56414521])
    gen = tnn.torch_generator(cfg.seed + 1)
    n = len(xtr)
    batches = max(1, math.ceil(n / cfg.batch_size))
    history: list[dict] = []
    best_state = copy.deepcopy(vae.state_dict())
    best_loss = math.inf
    best_epoch = 0
    stale = 0
    for epoch in range(cfg.max_epochs):
        beta = beta_schedule(epoch, cfg)
        perm = rng.permutation(n)
        sums = {"total": 0.0, "recon": 0.0, "kl": 0.0}
        for b in range(batches):
            xb = xtr[torch.as_tensor(perm[b * cfg.batch_size : (b + 1) * cfg.batch_size])]
            out = vae_forward(vae, xb, gen)
            try:
                loss = elbo_loss(xb, out.x_hat, out.mu, out.logvar, beta, cfg.free_bits)
            except FloatingPointError as exc:
                raise GuardDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
            if not torch.isfinite(loss["total"]):
                raise GuardDiverged(f"non-finite ELBO at epoch {epoch} batch {b}")
            tnn.backward(loss["total"], store)
            tnn.adamw_step(store, hyper)
            sums["total"] += float(loss["total"].detach()) / batches
            sums["recon"] += float(loss["recon"].detach()) / batches
            sums["kl"] += float(loss["kl_per_dim"].detach().sum()) / batches
        vae.eval()
        val = _val_losses(vae, xv, cfg)
        vae.train()
        record = {"epoch": epoch, "beta": beta, **{f"train_{k}": v for k, v in sums.items()}, **val}
        history.append(record)
        logger.info("guard epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        if val["val_total"] < best_loss:
            best_loss = val["val_total"]
            best_state = copy.deepcopy(vae.state_dict())
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    vae.load_state_dict(best_state)
    vae.eval()
    ckpt = Checkpoint.from_module(vae, vae.arch(), config_digest=config_digest, epoch=best_epoch,
                                  metrics=dict(history[best_epoch]) if history else {})
    return GuardTrainResult(ckpt, history, best_epoch, time.perf_counter() - t0)


@torch.no_grad()
def score_components(vae: ConvVAE, x, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Per-input reconstruction L2 norm and negative ELBO (beta = 1, no free-bits floor)."""
    x = _prep(x)
    l2, nelbo = [], []
    for i in range(0, len(x), batch_size):
        xb = x[i : i + batch_size]
        out = vae_forward(vae, xb, deterministic=True)
        sq = (xb - out.x_hat).double().pow(2).flatten(1).sum(1)
        kl = (0.5 * (out.mu.pow(2) + out.logvar.exp() - out.logvar - 1.0)).double().sum(1)
        l2.append(sq.sqrt())
        nelbo.append(sq + kl)
    return torch.cat(l2).numpy(), torch.cat(nelbo).numpy()


def anomaly_score(vae: ConvVAE, x, alpha: float = 0.5) -> np.ndarray:
    """alpha * ||x - x_hat||_2 + (1 - alpha) * negative ELBO; higher is more anomalous."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    l2, nelbo = score_components(vae, x)
    return alpha * l2 + (1.0 - alpha) * nelbo


@dataclass
class GuardCalibration:
    alpha: float
    tau: float
    target_fpr: float
    achieved_fpr: float
    count: int
    quantiles: dict

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate_threshold(scores, target_fpr: float = 0.05, alpha: float = 0.5,
                        min_count: int = 200) -> GuardCalibration:
    """tau = empirical (1 - target_fpr) quantile, linear interpolation between order statistics."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < min_count:
        raise ValueError(f"need at least {min_count} clean scores, got {len(s)}")
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError("target_fpr must lie in [0, 1)")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite clean scores")
    tau = float(np.quantile(s, 1.0 - target_fpr, method="linear"))
    qs = {str(q): float(np.quantile(s, q)) for q in (0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)}
    return GuardCalibration(alpha, tau, target_fpr, float(np.mean(s > tau)), int(len(s)), qs)


def decide(scores, calib: GuardCalibration) -> np.ndarray:
    """True where flagged (score strictly above tau)."""
    return np.asarray(scores) > calib.tau


def guard_decision(vae: ConvVAE, x, calib: GuardCalibration) -> tuple[list[str], np.ndarray]:
    scores = anomaly_score(vae, x, calib.alpha)
    return ["flag" if f else "keep" for f in decide(scores, calib)], scores
