"""Audio ingestion and preparation: WAV reading, trimming, carrier modulation,
resampling onto the simulation grid, band limiting and synthetic datasets."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .io import atomic_write_bytes
from .errors import ContractError, ParameterError, UnsupportedEncodingError, WavFormatError
from .simulator import DEFAULT_DT

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioSample:
    samples: np.ndarray
    rate: float
    label: int = 1
    id: str = ""
    silent: bool = False

    def __post_init__(self):
        s = np.array(self.samples, dtype=float).ravel()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if not self.rate > 0:
            raise ContractError("sample rate must be positive")
        if self.label not in (-1, 1):
            raise ContractError(f"label must be -1 or +1, got {self.label}")
        if not np.isfinite(s).all():
            raise ContractError(f"sample {self.id!r} has non-finite values")

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


def load_wav(path, label=1, id=None) -> AudioSample:
    """Read a PCM (8/16/24-bit) or 32-bit float WAV file; first channel only, scaled to [-1, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise WavFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _EXTENSIBLE and size >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0 or block_align != channels * bits // 8:
        raise WavFormatError(f"{path}: inconsistent fmt chunk")
    width = bits // 8
    n = len(payload) // block_align
    raw = np.frombuffer(payload[: n * block_align], dtype=np.uint8).reshape(n, block_align)[:, :width]
    if tag == _PCM and bits == 8:
        x = (raw[:, 0].astype(float) - 128.0) / 128.0
    elif tag == _PCM and bits == 16:
        x = raw.copy().view("<i2")[:, 0] / 32768.0
    elif tag == _PCM and bits == 24:
        b = raw.astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        x = np.where(v >= 1 << 23, v - (1 << 24), v) / float(1 << 23)
    elif tag == _FLOAT and bits == 32:
        x = raw.copy().view("<f4")[:, 0].astype(float)
    else:
        raise UnsupportedEncodingError(f"{path}: format tag {tag} with {bits} bits is not supported")
    return AudioSample(x, float(rate), label, id if id is not None else Path(path).stem)


def save_wav(path, samples, rate) -> None:
    """Write mono 16-bit PCM, peak-normalized if the signal exceeds [-1, 1]."""
    x = np.asarray(samples, dtype=float)
    peak = np.abs(x).max() if x.size else 0.0
    if peak > 1:
        x = x / peak
    pcm = np.clip(np.round(x * 32767), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE", b"fmt ", 16, _PCM, 1, int(rate), int(rate) * 2, 2, 16, b"data", len(pcm))
    Path(path).write_bytes(header + pcm)


def prepare(sample: AudioSample, duration_s=0.6, target_power=1.0) -> AudioSample:
    """Fix the length (end zero-pad or centre crop) and normalize the mean power."""
    if not duration_s > 0:
        raise ParameterError("duration must be positive")
    n = int(round(duration_s * sample.rate))
    s = sample.samples
    if s.size >= n:
        start = (s.size - n) // 2
        out = s[start : start + n].copy()
    else:
        out = np.zeros(n)
        out[: s.size] = s
    power = np.mean(out**2)
    if power == 0:
        warnings.warn(f"sample {sample.id!r} is silent; left unscaled", RuntimeWarning, stacklevel=2)
        return replace(sample, samples=out, silent=True)
    return replace(sample, samples=out * math.sqrt(target_power / power), silent=False)


def modulate_and_speedup(sample: AudioSample, f_carrier_hz=10.5e3, speed_factor=6.8) -> AudioSample:
    """Multiply by ``sin(2 pi f t)`` on the input grid, then play back ``speed_factor`` times faster."""
    if not 0 < f_carrier_hz < sample.rate / 2:
        raise ParameterError(f"carrier {f_carrier_hz} Hz is not below the Nyquist frequency {sample.rate / 2} Hz")
    if not speed_factor > 0:
        raise ParameterError("speed factor must be positive")
    t = np.arange(sample.samples.size) / sample.rate
    y = sample.samples * np.sin(2 * np.pi * f_carrier_hz * t)
    return replace(sample, samples=y, rate=sample.rate * speed_factor)


def grid_length(sample: AudioSample, dt_s=DEFAULT_DT) -> int:
    return int(math.floor(sample.duration / dt_s + 1e-9))


def resample_to_grid(sample: AudioSample, dt_s=DEFAULT_DT, n_steps=None) -> np.ndarray:
    """Linear interpolation onto ``t_k = k dt``; zero outside the sampled support."""
    if not dt_s > 0:
        raise ParameterError("dt must be positive")
    n = grid_length(sample, dt_s) if n_steps is None else int(n_steps)
    t = np.arange(n) * dt_s
    ts = np.arange(sample.samples.size) / sample.rate
    if abs(sample.rate * dt_s - 1.0) < 1e-12:
        out = np.zeros(n)
        m = min(n, sample.samples.size)
        out[:m] = sample.samples[:m]
        return out
    return np.interp(t, ts, sample.samples, left=0.0, right=0.0)


def bandpass(x, rate, f_lo=62.5e3, f_hi=74.5e3, order=4) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward), length preserved."""
    if not 0 < f_lo < f_hi < rate / 2:
        raise ParameterError(f"invalid band [{f_lo}, {f_hi}] for rate {rate}")
    sos = signal.butter(order, [f_lo, f_hi], btype="bandpass", fs=rate, output="sos")
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return np.zeros_like(x)
    return signal.sosfiltfilt(sos, x, axis=-1)


@dataclass(frozen=True)
class SpeechPipeline:
    """Real-recording chain: trim/normalize, upsample, modulate, speed up, grid, band-limit."""

    duration_s: float = 0.6
    target_power: float = 1.0
    f_carrier: float = 10.5e3
    speed_factor: float = 6.8
    upsample_rate: float = 48e3
    dt: float = DEFAULT_DT
    f_lo: float = 62.5e3
    f_hi: float = 74.5e3

    def __call__(self, sample: AudioSample) -> np.ndarray:
        s = prepare(sample, self.duration_s, self.target_power)
        if self.f_carrier >= s.rate / 2:
            # the source rate cannot carry the carrier; upsample first
            up = int(round(self.upsample_rate))
            g = math.gcd(up, int(round(s.rate)))
            y = signal.resample_poly(s.samples, up // g, int(round(s.rate)) // g)
            s = replace(s, samples=y, rate=float(up))
        s = modulate_and_speedup(s, self.f_carrier, self.speed_factor)
        x = resample_to_grid(s, self.dt)
        return bandpass(x, 1.0 / self.dt, self.f_lo, self.f_hi)


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    source: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError("manifest ids are not unique")
        for e in self.entries:
            if e.label not in (-1, 1) or e.split not in ("train", "test"):
                raise ContractError(f"bad manifest entry {e}")
        for split in ("train", "test"):
            labels = {e.label for e in self.entries if e.split == split}
            if labels and labels != {-1, 1}:
                raise ContractError(f"split {split!r} does not contain both labels")

    def split(self, name) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_text(self) -> str:
        return "".join(f"{e.id},{e.source},{e.label},{e.split}\n" for e in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        entries = []
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise ContractError(f"manifest line {ln}: expected 4 fields")
            try:
                label = int(parts[2])
            except ValueError:
                raise ContractError(f"manifest line {ln}: label must be -1 or 1") from None
            entries.append(ManifestEntry(parts[0], parts[1], label, parts[3]))
        m = cls(entries)
        m.validate()
        return m


@dataclass(frozen=True)
class SynthConfig:
    f_a: float = 66e3
    f_b: float = 71e3
    duration_s: float = 2e-3
    dt: float = DEFAULT_DT
    snr_db: float = 20.0
    amp_range: tuple[float, float] = (0.7, 1.3)
    test_fraction: float = 0.4


def _tone(rng, f, t, amp):
    return amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))


def synth_dataset(kind="spectral", n_per_class=50, seed=0, cfg: SynthConfig = SynthConfig()):
    """Generate a labelled synthetic dataset at the simulation rate.

    ``spectral``: class +1 is a Gaussian-windowed tone at ``f_a``, class -1 at
    ``f_b``. ``temporal``: class +1 plays ``f_a`` then ``f_b``, class -1 the
    reverse, so both classes have the same average spectrum. Returns
    ``(manifest, samples)`` with samples in manifest order.
    """
    if n_per_class < 1:
        raise ContractError("need at least one sample per class")
    if kind not in ("spectral", "temporal"):
        raise ContractError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    rate = 1.0 / cfg.dt
    n = int(round(cfg.duration_s * rate))
    t = np.arange(n) / rate
    T = n / rate
    n_test = int(round(cfg.test_fraction * n_per_class))
    entries, samples = [], []
    for i in range(n_per_class):
        for label in (1, -1):
            amp = rng.uniform(*cfg.amp_range)
            if kind == "spectral":
                f = cfg.f_a if label == 1 else cfg.f_b
                x = _tone(rng, f, t, amp) * np.exp(-0.5 * ((t - T / 2) / (T / 6)) ** 2)
            else:
                f1, f2 = (cfg.f_a, cfg.f_b) if label == 1 else (cfg.f_b, cfg.f_a)
                half = t < T / 2
                x = np.where(half, _tone(rng, f1, t, amp), _tone(rng, f2, t, amp)) * signal.windows.tukey(n, 0.1)
            p = np.mean(x**2)
            x = x + rng.normal(0.0, math.sqrt(p / 10 ** (cfg.snr_db / 10)), n)
            sid = f"{kind}-{seed}-{'p' if label == 1 else 'm'}{i:04d}"
            split = "test" if i >= n_per_class - n_test else "train"
            entries.append(ManifestEntry(sid, "SYNTH", label, split))
            samples.append(AudioSample(x, rate, label, sid))
    manifest = DatasetManifest(entries)
    manifest.validate()
    return manifest, samples


@dataclass
class PreparedSplit:
    """Forcing matrix (one row per sample) on the simulation grid plus labels."""

    forcings: np.ndarray
    labels: np.ndarray
    ids: list[str]
    rate: float

    def __len__(self):
        return len(self.labels)


def prepare_synthetic(samples, ids_split, n_steps=None, target_power=1.0) -> PreparedSplit:
    """Normalize synthetic samples (already at the grid rate) into a forcing matrix."""
    rows, labels, ids = [], [], []
    for s in samples:
        if s.id not in ids_split:
            continue
        p = prepare(s, s.duration, target_power)
        rows.append(p.samples)
        labels.append(s.label)
        ids.append(s.id)
    length = max(len(r) for r in rows) if n_steps is None else max(n_steps, max(len(r) for r in rows))
    F = np.zeros((len(rows), length))
    for i, r in enumerate(rows):
        F[i, : len(r)] = r
    return PreparedSplit(F, np.array(labels), ids, samples[0].rate)


def save_split(path_stem, split: PreparedSplit) -> None:
    """Write ``<stem>.f64`` (row-major little-endian float64) and ``<stem>.json``."""
    stem = Path(path_stem)
    meta = {"rate": split.rate, "count": len(split), "length": int(split.forcings.shape[1]), "label": [int(v) for v in split.labels], "ids": split.ids}
    atomic_write_bytes(stem.with_suffix(".f64"), np.ascontiguousarray(split.forcings, dtype="<f8").tobytes())
    atomic_write_bytes(stem.with_suffix(".json"), (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode())


def load_split(path_stem) -> PreparedSplit:
    stem = Path(path_stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    raw = np.frombuffer(stem.with_suffix(".f64").read_bytes(), dtype="<f8")
    if raw.size != meta["count"] * meta["length"]:
        raise ContractError(f"{stem}: data size does not match sidecar")
    return PreparedSplit(raw.reshape(meta["count"], meta["length"]).astype(float), np.array(meta["label"]), list(meta["ids"]), float(meta["rate"]))
