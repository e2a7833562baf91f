"""Fixed STFT -> Mel -> log front end producing 32 x 65 standardized planes.

Frequency convention: complex baseband, FFT bins ``k * fs / N`` for
``k = 0..N-1`` taken as they come out of the FFT (no fftshift).  Mel filters
are laid out on the HTK scale over ``[0, fs)``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rf_sim import IQBuffer

FEATURE_MAGIC = b"RFGFEAT\0"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    n_fft: int = 256
    hop: int = 128
    window: str = "hann"  # "hann" | "rect"
    n_mels: int = 32
    log_epsilon: float = 1e-6
    target_frames: int = 65
    sample_rate_hz: float = 1e6

    def __post_init__(self):
        if self.n_fft < 2 or self.hop < 1 or self.hop > self.n_fft:
            raise ValueError("need 1 <= hop <= n_fft")
        if self.n_mels < 2:
            raise ValueError("n_mels must be >= 2")
        if not self.log_epsilon > 0:
            raise ValueError("log_epsilon must be > 0")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.target_frames < 1:
            raise ValueError("target_frames must be >= 1")


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # (frames, n_fft) complex128

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def bin_count(self) -> int:
        return self.values.shape[1]


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft)
    edges_hz: np.ndarray  # (n_mels + 2,) lower edge, centers..., upper edge


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (n_mels, target_frames) float32
    mean: float = 0.0
    std: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def window(cfg: FrontendConfig) -> np.ndarray:
    n = np.arange(cfg.n_fft)
    if cfg.window == "rect":
        return np.ones(cfg.n_fft)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.n_fft)


def frame_count(length: int, cfg: FrontendConfig) -> int:
    return (length - cfg.n_fft) // cfg.hop + 1


def stft(iq: IQBuffer | np.ndarray, cfg: FrontendConfig) -> ComplexSpectrogram:
    x = iq.samples if isinstance(iq, IQBuffer) else np.asarray(iq, dtype=np.complex128)
    if len(x) < cfg.n_fft:
        raise ValueError(f"signal of {len(x)} samples is shorter than one {cfg.n_fft}-sample window")
    n_frames = frame_count(len(x), cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n_frames]
    return ComplexSpectrogram(np.fft.fft(frames * window(cfg), axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(cfg: FrontendConfig) -> MelFilterbank:
    """Triangular filters, centers equally spaced in HTK mel over [0, fs).

    Each triangle's half-widths are floored at one bin spacing.  Without the
    floor the lowest filters (narrower than a bin at 1 MHz / 256 bins) would
    miss every bin; with it they degrade to linear interpolation between the
    two nearest bins.  Filters wider than a bin are untouched.
    """
    if cfg.n_mels > cfg.n_fft:
        raise ValueError(f"n_mels={cfg.n_mels} exceeds the {cfg.n_fft}-bin grid; filter centers collide")
    fs = cfg.sample_rate_hz
    df = fs / cfg.n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(fs), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft) * df
    weights = np.zeros((cfg.n_mels, cfg.n_fft))
    for m in range(cfg.n_mels):
        center = edges[m + 1]
        lo = min(edges[m], center - df)
        hi = max(edges[m + 2], center + df)
        rise = (freqs - lo) / (center - lo)
        fall = (hi - freqs) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(rise, fall))
    return MelFilterbank(weights, edges)


def mel_energies(cs: ComplexSpectrogram, fb: MelFilterbank) -> np.ndarray:
    """Band energies, shape (n_mels, frames)."""
    if cs.bin_count != fb.weights.shape[1]:
        raise ValueError(f"spectrogram has {cs.bin_count} bins, filterbank expects {fb.weights.shape[1]}")
    power = np.abs(cs.values) ** 2
    return fb.weights @ power.T


def log_compress(energies: np.ndarray, eps: float) -> np.ndarray:
    energies = np.asarray(energies, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if np.any(energies < 0):
        raise ValueError("negative energy")
    return np.log(energies + eps)


def pad_or_crop(grid: np.ndarray, target_frames: int) -> np.ndarray:
    """Edge-replicate on the right, or center-crop, along the frame axis."""
    n = grid.shape[1]
    if n == target_frames:
        return grid
    if n > target_frames:
        start = (n - target_frames) // 2
        return grid[:, start : start + target_frames]
    return np.pad(grid, ((0, 0), (0, target_frames - n)), mode="edge")


_FB_CACHE: dict[FrontendConfig, MelFilterbank] = {}


def _filterbank(cfg: FrontendConfig) -> MelFilterbank:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = _FB_CACHE[cfg] = build_mel_filterbank(cfg)
    return fb


def log_mel(iq: IQBuffer | np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Un-normalized log-Mel grid (n_mels, frames) in float64."""
    return log_compress(mel_energies(stft(iq, cfg), _filterbank(cfg)), cfg.log_epsilon)


def featurize(iq: IQBuffer | np.ndarray, cfg: FrontendConfig | None = None) -> LogMelSpectrogram:
    cfg = cfg or FrontendConfig()
    s = log_mel(iq, cfg)
    mean = float(s.mean())
    std = max(float(s.std()), 1e-8)
    s = pad_or_crop((s - mean) / std, cfg.target_frames)
    return LogMelSpectrogram(s.astype(np.float32), mean, std)


# ---------------------------------------------------------------------------
# feature cache file


def write_features(path: str | os.PathLike, grids: np.ndarray) -> None:
    """Header (magic, version, count, n_mels, frames) + row-major LE float32."""
    grids = np.asarray(grids, dtype="<f4")
    if grids.ndim == 2:
        grids = grids[None]
    count, n_mels, frames = grids.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FEATURE_VERSION, count, n_mels, frames))
        fh.write(np.ascontiguousarray(grids).tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    version, count, n_mels, frames = struct.unpack("<IIII", raw[8:24])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    expected = 24 + 4 * count * n_mels * frames
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated feature cache ({len(raw)} != {expected} bytes)")
    return np.frombuffer(raw, dtype="<f4", offset=24).reshape(count, n_mels, frames).astype(np.float32)


def featurize_many(packets, cfg: FrontendConfig | None = None) -> np.ndarray:
    cfg = cfg or FrontendConfig()
    grids = [featurize(iq, cfg).values for iq in packets]
    if not grids:
        return np.zeros((0, cfg.n_mels, cfg.target_frames), np.float32)
    return np.stack(grids)


__all__ = [
    "FrontendConfig", "ComplexSpectrogram", "MelFilterbank", "LogMelSpectrogram",
    "stft", "build_mel_filterbank", "mel_energies", "log_compress", "featurize",
    "pad_or_crop", "hz_to_mel", "mel_to_hz", "write_features", "read_features", "featurize_many",
]
