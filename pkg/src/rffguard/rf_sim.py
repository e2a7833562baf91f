"""Synthetic LoRa-preamble generator with per-device analog impairments.

Each device gets a reproducible set of transmitter imperfections (CFO, I/Q
imbalance, cubic PA distortion, DC leakage).  Those imperfections are the
"fingerprint" the classifier learns.  Packets are an 8-upchirp preamble at
SF7 / 125 kHz sampled at 1 MHz, zero-padded to 8448 samples so the log-Mel
front end produces exactly 65 frames.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 1e6
BANDWIDTH_HZ = 125e3
SPREADING_FACTOR = 7
N_UPCHIRPS = 8
SAMPLES_PER_CHIRP = int(2**SPREADING_FACTOR * SAMPLE_RATE_HZ / BANDWIDTH_HZ)  # 1024
PREAMBLE_SAMPLES = N_UPCHIRPS * SAMPLES_PER_CHIRP  # 8192
PACKET_SAMPLES = 8448

# impairment priors
CFO_RANGE_HZ = 20e3
CFO_DRIFT_SIGMA_HZ = 100.0
GAIN_IMBALANCE_RANGE = (0.9, 1.1)
PHASE_IMBALANCE_RANGE = 0.1
PA_A3_RANGE = 0.05
DC_RANGE = 0.02

# stream tags keep the different random draws of one (seed, index) pair apart
_PROFILE_STREAM = 0x50524F46
_PACKET_STREAM = 0x504B5420
_CHANNEL_STREAM = 0x4348414E
_NOISE_PACKET_STREAM = 0x4E4F4953


@dataclass(frozen=True)
class ImpairmentProfile:
    device_id: int
    cfo_hz: float
    cfo_drift_hz_per_packet_sigma: float
    iq_gain_imbalance: float
    iq_phase_imbalance_rad: float
    pa_a3: float
    dc_offset: complex

    @classmethod
    def identity(cls, device_id: int = 0) -> "ImpairmentProfile":
        return cls(device_id, 0.0, 0.0, 1.0, 0.0, 0.0, 0j)

    def validate(self, sample_rate_hz: float = SAMPLE_RATE_HZ) -> None:
        if not abs(self.cfo_hz) < sample_rate_hz / 8:
            raise ValueError(f"cfo_hz {self.cfo_hz} outside +/- fs/8")
        if self.cfo_drift_hz_per_packet_sigma < 0:
            raise ValueError("cfo drift sigma must be non-negative")
        if not 0.8 <= self.iq_gain_imbalance <= 1.2:
            raise ValueError(f"iq_gain_imbalance {self.iq_gain_imbalance} outside [0.8, 1.2]")
        if abs(self.iq_phase_imbalance_rad) > 0.2:
            raise ValueError(f"iq_phase_imbalance_rad {self.iq_phase_imbalance_rad} outside [-0.2, 0.2]")
        values = [self.cfo_hz, self.cfo_drift_hz_per_packet_sigma, self.iq_gain_imbalance,
                  self.iq_phase_imbalance_rad, self.pa_a3, self.dc_offset.real, self.dc_offset.imag]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("impairment profile has non-finite fields")


@dataclass(frozen=True)
class ChannelConfig:
    """Static channel: optional multipath taps, AWGN at ``snr_db``, optional global phase.

    ``snr_db = math.inf`` disables the noise entirely.
    """

    snr_db: float = 20.0
    multipath_taps: tuple[tuple[int, complex], ...] = ()
    random_phase: bool = False

    def __post_init__(self):
        if len(self.multipath_taps) > 4:
            raise ValueError("at most 4 multipath taps")
        delays = [d for d, _ in self.multipath_taps]
        if any(d < 0 for d in delays):
            raise ValueError("tap delays must be non-negative")
        if any(b <= a for a, b in zip(delays, delays[1:])):
            raise ValueError("tap delays must be strictly increasing")


@dataclass
class IQBuffer:
    samples: np.ndarray  # complex128
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1:
            raise ValueError("IQ samples must be one-dimensional")

    def __len__(self) -> int:
        return len(self.samples)


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) & 0xFFFFFFFF for e in entropy]))


def device_profile(device_id: int, dataset_seed: int) -> ImpairmentProfile:
    """Draw the impairment fingerprint of one device; pure in (device_id, dataset_seed)."""
    if device_id < 0:
        raise ValueError("device_id must be >= 0")
    rng = _rng(_PROFILE_STREAM, dataset_seed, device_id)
    cfo = rng.uniform(-CFO_RANGE_HZ, CFO_RANGE_HZ)
    gain = rng.uniform(*GAIN_IMBALANCE_RANGE)
    phase = rng.uniform(-PHASE_IMBALANCE_RANGE, PHASE_IMBALANCE_RANGE)
    a3 = rng.uniform(-PA_A3_RANGE, PA_A3_RANGE)
    dc_re, dc_im = rng.uniform(-DC_RANGE, DC_RANGE, size=2)
    return ImpairmentProfile(
        device_id=int(device_id),
        cfo_hz=float(cfo),
        cfo_drift_hz_per_packet_sigma=CFO_DRIFT_SIGMA_HZ,
        iq_gain_imbalance=float(gain),
        iq_phase_imbalance_rad=float(phase),
        pa_a3=float(a3),
        dc_offset=complex(dc_re, dc_im),
    )


def ideal_preamble(sample_rate_hz: float = SAMPLE_RATE_HZ) -> np.ndarray:
    """Eight ideal upchirps sweeping -B/2 .. +B/2, unit amplitude (8192 samples)."""
    n = np.arange(SAMPLES_PER_CHIRP)
    t = n / sample_rate_hz
    period = SAMPLES_PER_CHIRP / sample_rate_hz
    slope = BANDWIDTH_HZ / period
    phase = 2 * np.pi * (-BANDWIDTH_HZ / 2 * t + 0.5 * slope * t**2)
    chirp = np.exp(1j * phase)
    return np.tile(chirp, N_UPCHIRPS)


def apply_pa(x: np.ndarray, a3: float) -> np.ndarray:
    return x + a3 * x * np.abs(x) ** 2


def apply_iq_imbalance(x: np.ndarray, gain: float, phase_rad: float) -> np.ndarray:
    i = x.real
    q = gain * (np.sin(phase_rad) * x.real + np.cos(phase_rad) * x.imag)
    return i + 1j * q


def apply_cfo(x: np.ndarray, cfo_hz: float, sample_rate_hz: float = SAMPLE_RATE_HZ) -> np.ndarray:
    n = np.arange(len(x))
    return x * np.exp(2j * np.pi * cfo_hz * n / sample_rate_hz)


def packet_cfo(profile: ImpairmentProfile, packet_index: int, rng_seed: int) -> float:
    """Per-packet CFO: the device offset plus an independent Gaussian drift draw."""
    rng = _rng(_PACKET_STREAM, rng_seed, packet_index)
    return profile.cfo_hz + profile.cfo_drift_hz_per_packet_sigma * rng.standard_normal()


def synth_packet(profile: ImpairmentProfile, packet_index: int, rng_seed: int,
                 sample_rate_hz: float = SAMPLE_RATE_HZ) -> IQBuffer:
    """Impaired preamble, impairments in fixed order PA -> I/Q -> DC -> CFO, then zero-pad."""
    profile.validate(sample_rate_hz)
    x = ideal_preamble(sample_rate_hz)
    x = apply_pa(x, profile.pa_a3)
    x = apply_iq_imbalance(x, profile.iq_gain_imbalance, profile.iq_phase_imbalance_rad)
    x = x + profile.dc_offset
    x = apply_cfo(x, packet_cfo(profile, packet_index, rng_seed), sample_rate_hz)
    out = np.zeros(PACKET_SAMPLES, dtype=np.complex128)
    out[:PREAMBLE_SAMPLES] = x
    return IQBuffer(out, sample_rate_hz)


def noise_packet(rng_seed: int, packet_index: int, sample_rate_hz: float = SAMPLE_RATE_HZ) -> IQBuffer:
    """Unit-power circular complex Gaussian noise, no transmitter present."""
    rng = _rng(_NOISE_PACKET_STREAM, rng_seed, packet_index)
    w = (rng.standard_normal(PACKET_SAMPLES) + 1j * rng.standard_normal(PACKET_SAMPLES)) / np.sqrt(2)
    return IQBuffer(w, sample_rate_hz)


def apply_channel(iq: IQBuffer, channel: ChannelConfig, rng_seed: int) -> IQBuffer:
    """Multipath (if any) -> global phase (if enabled) -> AWGN at the requested SNR.

    The SNR reference is the mean power of the post-multipath signal over the
    whole buffer.
    """
    x = iq.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite IQ samples")
    rng = _rng(_CHANNEL_STREAM, rng_seed)
    if channel.multipath_taps:
        h = np.zeros(channel.multipath_taps[-1][0] + 1, dtype=np.complex128)
        for delay, gain in channel.multipath_taps:
            h[delay] = gain
        x = np.convolve(x, h)[: len(x)]
    else:
        x = x.copy()
    theta = rng.uniform(0, 2 * np.pi)
    if channel.random_phase:
        x = x * np.exp(1j * theta)
    if math.isfinite(channel.snr_db):
        p_sig = float(np.mean(np.abs(x) ** 2))
        p_noise = p_sig / 10 ** (channel.snr_db / 10)
        w = rng.standard_normal(len(x)) + 1j * rng.standard_normal(len(x))
        x = x + np.sqrt(p_noise / 2) * w
    return IQBuffer(x, iq.sample_rate_hz)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetConfig:
    dataset_seed: int = 42
    device_count: int = 10
    train_pool_per_device: int = 200
    test_per_device: int = 100
    val_fraction: float = 0.2
    unseen_device_count: int = 5
    unseen_per_device: int = 100
    noise_packets: int = 500
    snr_db: float = 20.0
    multipath_taps: list = field(default_factory=list)
    random_phase: bool = False

    def validate(self) -> None:
        if self.device_count < 2:
            raise ValueError("device_count must be >= 2")
        if self.train_pool_per_device < 10 or self.test_per_device < 1:
            raise ValueError("need >= 10 training-pool packets per device")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")

    def channel(self, snr_db: float | None = None) -> ChannelConfig:
        taps = tuple((int(d), complex(*g) if isinstance(g, (list, tuple)) else complex(g))
                     for d, g in self.multipath_taps)
        return ChannelConfig(self.snr_db if snr_db is None else snr_db, taps, self.random_phase)


@dataclass(frozen=True)
class PacketRecord:
    split: str  # train | val | test | unseen | noise
    device_id: int  # -1 for noise packets
    packet_index: int
    snr_db: float
    seed: int
    path: str = ""


def packet_seed(dataset_seed: int, device_id: int, packet_index: int) -> int:
    ss = np.random.SeedSequence([dataset_seed & 0xFFFFFFFF, (device_id + 1) & 0xFFFFFFFF, packet_index])
    return int(ss.generate_state(1)[0])


def plan_dataset(cfg: DatasetConfig) -> list[PacketRecord]:
    """Split assignment for every packet (no samples generated)."""
    cfg.validate()
    records: list[PacketRecord] = []
    n_val = int(round(cfg.val_fraction * cfg.train_pool_per_device))
    for dev in range(cfg.device_count):
        perm = _rng(cfg.dataset_seed, dev, 0x53504C54).permutation(cfg.train_pool_per_device)
        val_idx = set(int(i) for i in perm[:n_val])
        for i in range(cfg.train_pool_per_device):
            split = "val" if i in val_idx else "train"
            records.append(PacketRecord(split, dev, i, cfg.snr_db, packet_seed(cfg.dataset_seed, dev, i)))
        for j in range(cfg.test_per_device):
            i = cfg.train_pool_per_device + j
            records.append(PacketRecord("test", dev, i, cfg.snr_db, packet_seed(cfg.dataset_seed, dev, i)))
    for k in range(cfg.unseen_device_count):
        dev = cfg.device_count + k
        for i in range(cfg.unseen_per_device):
            records.append(PacketRecord("unseen", dev, i, cfg.snr_db, packet_seed(cfg.dataset_seed, dev, i)))
    for i in range(cfg.noise_packets):
        records.append(PacketRecord("noise", -1, i, math.nan, packet_seed(cfg.dataset_seed, -1, i)))
    return records


def render_packet(rec: PacketRecord, cfg: DatasetConfig) -> IQBuffer:
    if rec.split == "noise":
        return noise_packet(rec.seed, rec.packet_index)
    profile = device_profile(rec.device_id, cfg.dataset_seed)
    iq = synth_packet(profile, rec.packet_index, rec.seed)
    return apply_channel(iq, cfg.channel(rec.snr_db), rec.seed)


def iter_packets(cfg: DatasetConfig, records: list[PacketRecord] | None = None
                 ) -> Iterator[tuple[PacketRecord, IQBuffer]]:
    for rec in records if records is not None else plan_dataset(cfg):
        yield rec, render_packet(rec, cfg)


def write_iq(path: str | os.PathLike, iq: IQBuffer) -> None:
    """Interleaved little-endian float32 (I, Q) pairs."""
    buf = np.empty(2 * len(iq), dtype="<f4")
    buf[0::2] = iq.samples.real
    buf[1::2] = iq.samples.imag
    Path(path).write_bytes(buf.tobytes())


def read_iq(path: str | os.PathLike, sample_rate_hz: float = SAMPLE_RATE_HZ) -> IQBuffer:
    buf = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if len(buf) % 2:
        raise ValueError(f"{path}: odd number of float32 values")
    return IQBuffer(buf[0::2].astype(np.float64) + 1j * buf[1::2].astype(np.float64), sample_rate_hz)


@dataclass
class DatasetManifest:
    dataset_seed: int
    device_count: int
    config: dict
    records: list[PacketRecord]

    def split(self, name: str) -> list[PacketRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def save(self, path: str | os.PathLike) -> None:
        """JSON-lines: one header line, then one record per packet."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "header", "dataset_seed": self.dataset_seed,
                                 "device_count": self.device_count, "config": self.config}) + "\n")
            for r in self.records:
                d = asdict(r)
                d["snr_db"] = None if math.isnan(r.snr_db) else r.snr_db
                fh.write(json.dumps(d) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise ValueError(f"{path}: missing manifest header")
        records = []
        for line in lines[1:]:
            d = json.loads(line)
            d["snr_db"] = math.nan if d["snr_db"] is None else d["snr_db"]
            records.append(PacketRecord(**d))
        return cls(header["dataset_seed"], header["device_count"], header["config"], records)


def build_dataset(cfg: DatasetConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Render every packet to ``out_dir/iq/<split>/`` and write ``out_dir/manifest.jsonl``."""
    out = Path(out_dir)
    records = []
    for rec, iq in iter_packets(cfg):
        rel = Path("iq") / rec.split / f"dev{rec.device_id:03d}_pkt{rec.packet_index:05d}.iq"
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        write_iq(out / rel, iq)
        records.append(PacketRecord(rec.split, rec.device_id, rec.packet_index, rec.snr_db, rec.seed, str(rel)))
    manifest = DatasetManifest(cfg.dataset_seed, cfg.device_count, asdict(cfg), records)
    manifest.save(out / "manifest.jsonl")
    logger.info("wrote %d packets to %s: %s", len(records), out, manifest.counts())
    return manifest
