"""Ownership watermarks: trigger patch, adversarially hardened trigger, feature signature.

The secret material lives in a :class:`WatermarkKey`, stored in its own file
and never inside a model checkpoint.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .frontend import LogMelSpectrogram

KEY_MAGIC = b"RFGWKEY\0"
KEY_VERSION = 1
_KEY_STREAM = 0x574B4559
_PROBE_STREAM = 0x50524F42

TRIGGER_THRESHOLD = 0.9
SIGNATURE_THRESHOLD = 0.5
MIN_PROBES = 32


@dataclass
class WatermarkKey:
    key_seed: int
    num_classes: int
    feature_dim: int
    trigger_row: int
    trigger_col: int
    v: np.ndarray
    trigger_size: int = 4
    trigger_amplitude: float = 3.0
    adv_eps: float = 0.1
    adv_steps: int = 5
    adv_step_size: float = 0.025
    lam: float = 1.0
    probe_count: int = 64
    grid_shape: tuple[int, int] = (32, 65)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.grid_shape = tuple(self.grid_shape)
        if self.v.shape != (self.feature_dim,):
            raise ValueError("signature vector length must equal feature_dim")
        if abs(np.linalg.norm(self.v) - 1.0) > 1e-6:
            raise ValueError("signature vector must have unit norm")
        rows, cols = self.grid_shape
        if not (0 <= self.trigger_row <= rows - self.trigger_size and 0 <= self.trigger_col <= cols - self.trigger_size):
            raise ValueError("trigger block lies outside the spectrogram")

    @property
    def y_wm(self) -> int:
        return self.num_classes

    @property
    def block(self) -> tuple[slice, slice]:
        return (slice(self.trigger_row, self.trigger_row + self.trigger_size),
                slice(self.trigger_col, self.trigger_col + self.trigger_size))

    def header(self) -> dict:
        d = asdict(self)
        d.pop("v")
        d["grid_shape"] = list(self.grid_shape)
        return d

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True).encode()
        body = (KEY_MAGIC + struct.pack("<II", KEY_VERSION, len(header)) + header
                + np.ascontiguousarray(self.v, dtype="<f8").tobytes())
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WatermarkKey":
        if raw[:8] != KEY_MAGIC:
            raise ValueError("not a watermark key file")
        (crc,) = struct.unpack("<I", raw[-4:])
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
            raise ValueError("watermark key CRC mismatch")
        version, hdr_len = struct.unpack("<II", raw[8:16])
        if version != KEY_VERSION:
            raise ValueError(f"unsupported key version {version}")
        header = json.loads(raw[16 : 16 + hdr_len])
        v = np.frombuffer(raw[16 + hdr_len : -4], dtype="<f8").astype(np.float64)
        return cls(v=v, **header)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "WatermarkKey":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class VerificationResult:
    kind: str  # trigger | adversarial_trigger | sanitized_trigger | signature
    score: float
    threshold: float
    passed: bool
    probe_count: int
    extra: dict = field(default_factory=dict)


def gen_key(key_seed: int, num_classes: int, feature_dim: int, grid_shape: tuple[int, int] = (32, 65),
            **overrides) -> WatermarkKey:
    if num_classes < 2:
        raise ValueError("need at least 2 device classes")
    if feature_dim < 8:
        raise ValueError("feature_dim must be >= 8")
    size = overrides.get("trigger_size", 4)
    if key_seed < 0:
        raise ValueError("key_seed must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([_KEY_STREAM, int(key_seed)]))
    v = rng.standard_normal(feature_dim)
    v /= np.linalg.norm(v)
    row = int(rng.integers(0, grid_shape[0] - size + 1))
    col = int(rng.integers(0, grid_shape[1] - size + 1))
    return WatermarkKey(key_seed=int(key_seed), num_classes=num_classes, feature_dim=feature_dim,
                        trigger_row=row, trigger_col=col, v=v, grid_shape=grid_shape, **overrides)


def select_probes(key: WatermarkKey, pool: np.ndarray, count: int | None = None) -> np.ndarray:
    """Key-seeded choice of verification probes from a clean pool."""
    count = key.probe_count if count is None else count
    rng = np.random.default_rng([_PROBE_STREAM, key.key_seed])
    idx = np.sort(rng.choice(len(pool), size=min(count, len(pool)), replace=False))
    return pool[idx]


def apply_trigger(spec, key: WatermarkKey):
    """Copy of ``spec`` with the key's block overwritten by the trigger amplitude.

    Accepts a single (mels, frames) grid, a batch (..., mels, frames), a
    LogMelSpectrogram, or a torch tensor.
    """
    if isinstance(spec, LogMelSpectrogram):
        return LogMelSpectrogram(apply_trigger(spec.values, key), spec.mean, spec.std, dict(spec.extra))
    if tuple(spec.shape[-2:]) != key.grid_shape:
        raise ValueError(f"spectrogram shape {tuple(spec.shape[-2:])} != {key.grid_shape}")
    out = spec.clone() if isinstance(spec, torch.Tensor) else np.array(spec, copy=True)
    rows, cols = key.block
    out[..., rows, cols] = key.trigger_amplitude
    return out


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not isinstance(x, torch.Tensor) else x.float()
    return t.unsqueeze(0) if t.ndim == 2 else t


def _block_mask(key: WatermarkKey) -> torch.Tensor:
    mask = torch.ones(key.grid_shape)
    rows, cols = key.block
    mask[rows, cols] = 0.0
    return mask


def craft_adversarial(model: torch.nn.Module, triggered, key: WatermarkKey, eps: float | None = None,
                      steps: int | None = None, step_size: float | None = None) -> np.ndarray:
    """L-inf PGD that pushes triggered inputs *away* from the watermark label.

    Starts at zero perturbation, takes signed-gradient ascent steps on
    CE(f(x + delta), y_wm), clips delta to the eps ball after every step and
    keeps the trigger block itself unperturbed.
    """
    eps = key.adv_eps if eps is None else eps
    steps = key.adv_steps if steps is None else steps
    step_size = key.adv_step_size if step_size is None else step_size
    single = np.ndim(triggered) == 2
    x0 = _as_batch(triggered).detach()
    delta = torch.zeros_like(x0)
    if eps > 0 and steps > 0:
        mask = _block_mask(key)
        target = torch.full((x0.shape[0],), key.y_wm, dtype=torch.long)
        for _ in range(steps):
            delta.requires_grad_(True)
            loss = F.cross_entropy(model(x0 + delta), target, reduction="sum")
            (grad,) = torch.autograd.grad(loss, delta)
            if not torch.isfinite(grad).all():
                raise FloatingPointError("non-finite input gradient while crafting adversarial trigger")
            with torch.no_grad():
                delta = (delta + step_size * grad.sign()).clamp_(-eps, eps) * mask
    out = (x0 + delta).detach().numpy()
    return out[0] if single else out


def signature_loss(feature: torch.Tensor, v, lam: float) -> torch.Tensor:
    """lam * (1 - cos(feature, v))."""
    feature = torch.as_tensor(feature)
    v = torch.as_tensor(v, dtype=feature.dtype)
    norm = feature.norm()
    if float(norm.detach()) == 0.0:
        raise ValueError("zero feature vector has no direction")
    cos = torch.dot(feature / norm, v / v.norm())
    return lam * (1.0 - cos)


@torch.no_grad()
def predict_labels(model: torch.nn.Module, x, batch_size: int = 256) -> np.ndarray:
    x = _as_batch(x)
    out = [model(x[i : i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def mean_feature(model: torch.nn.Module, x, batch_size: int = 256) -> np.ndarray:
    x = _as_batch(x)
    total = torch.zeros(model.feature_dim, dtype=torch.float64)
    for i in range(0, len(x), batch_size):
        total += model.features(x[i : i + batch_size]).double().sum(0)
    return (total / len(x)).numpy()


DEFAULT_SANITIZE = (("gaussian_blur", {"sigma": 1.0}), ("noise", {"sigma": 0.05}))


def verify_trigger(model: torch.nn.Module, key: WatermarkKey, probes, mode: str = "plain",
                   sanitize_steps=DEFAULT_SANITIZE, seed: int = 0,
                   threshold: float = TRIGGER_THRESHOLD) -> VerificationResult:
    """Black-box check: fraction of triggered probes classified as y_wm."""
    probes = np.asarray(probes, dtype=np.float32)
    if probes.ndim != 3 or tuple(probes.shape[1:]) != key.grid_shape:
        raise ValueError(f"probes must be (N, {key.grid_shape[0]}, {key.grid_shape[1]})")
    if len(probes) < MIN_PROBES:
        raise ValueError(f"need at least {MIN_PROBES} probes, got {len(probes)}")
    queries = apply_trigger(probes, key)
    kind = "trigger"
    if mode in ("adversarial", "adv"):
        queries = craft_adversarial(model, queries, key)
        kind = "adversarial_trigger"
    elif mode == "sanitized":
        from .attacks import sanitize_chain
        queries = sanitize_chain(queries, sanitize_steps, seed=seed)
        kind = "sanitized_trigger"
    elif mode != "plain":
        raise ValueError(f"unknown verification mode {mode!r}")
    asr = float(np.mean(predict_labels(model, queries) == key.y_wm))
    return VerificationResult(kind, asr, threshold, asr >= threshold, len(probes), {"mode": mode})


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def verify_signature(model: torch.nn.Module, key: WatermarkKey, probes,
                     threshold: float = SIGNATURE_THRESHOLD) -> VerificationResult:
    """White-box check: cosine between the mean penultimate feature over probes and v."""
    probes = np.asarray(probes, dtype=np.float32)
    if len(probes) < MIN_PROBES:
        raise ValueError(f"need at least {MIN_PROBES} probes, got {len(probes)}")
    if model.feature_dim != key.feature_dim:
        raise ValueError("key feature_dim does not match the model")
    score = cosine(mean_feature(model, probes), key.v)
    return VerificationResult("signature", score, threshold, score >= threshold, len(probes))
