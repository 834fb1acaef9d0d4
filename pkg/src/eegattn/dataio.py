"""Trial/recording containers and the synthetic 13-class EEG generator.

On-disk layout (little-endian throughout)::

    EEGT  magic "EEGT" | u16 version | u32 n_trials | u16 n_channels
          | u32 n_samples | f32 fs | u16 n_classes
          | n_channels x (u16 len, utf-8 name) | u16 labels[n_trials]
          | f32 payload, trial-major [n_trials, n_channels, n_samples]

    EEGR  magic "EEGR" | u16 version | u16 n_channels | u32 n_samples
          | f32 fs | n_channels x (u16 len, utf-8 name)
          | u32 n_markers | n_markers x (u32 sample, u16 label)
          | f32 payload, channel-major [n_channels, n_samples]
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRIALS_MAGIC = b"EEGT"
RAW_MAGIC = b"EEGR"
FORMAT_VERSION = 1
REST_CLASS = 12

# 10-10 montage, 64 electrodes
MONTAGE_64 = (
    "Fp1", "Fpz", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2", "Iz",
)
DEFAULT_CHANNELS = ("AF3", "F3", "F5", "FC3", "FC5", "T7", "C5", "TP7", "CP5", "P5")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


@dataclass
class TrialSet:
    data: np.ndarray  # [n_trials, n_channels, n_samples], float64
    labels: np.ndarray  # [n_trials], int
    channel_names: list[str]
    sampling_rate: float
    n_classes: int = 13

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.channel_names = list(self.channel_names)
        self.validate()

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"trial data must be 3-D, got shape {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError(f"{self.data.shape[0]} trials but {self.labels.shape} labels")
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError(f"{self.data.shape[1]} channels but {len(self.channel_names)} names")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx)
        return TrialSet(self.data[idx], self.labels[idx], self.channel_names, self.sampling_rate, self.n_classes)

    def summary(self) -> dict:
        counts = np.bincount(self.labels, minlength=self.n_classes)
        return {
            "n_trials": self.n_trials,
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "sampling_rate": self.sampling_rate,
            "n_classes": self.n_classes,
            "class_counts": counts.tolist(),
            "channels": self.channel_names,
        }


@dataclass
class RawRecording:
    data: np.ndarray  # [n_channels, n_samples], microvolts
    sampling_rate: float
    channel_names: list[str]
    markers: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.markers = [(int(i), int(lbl)) for i, lbl in self.markers]
        if self.data.ndim != 2:
            raise ValueError(f"recording data must be [channels, samples], got {self.data.shape}")
        if len(self.channel_names) != self.data.shape[0]:
            raise ValueError(f"{self.data.shape[0]} channels but {len(self.channel_names)} names")
        idx = [m[0] for m in self.markers]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("marker indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.data.shape[1]):
            raise ValueError("marker index outside recording")


def _write_names(buf, names) -> None:
    for name in names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise TruncatedFileError(f"{self.path}: file ends inside the header")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def names(self, n: int) -> list[str]:
        out = []
        for _ in range(n):
            (length,) = self.take("<H")
            if self.pos + length > len(self.raw):
                raise TruncatedFileError(f"{self.path}: file ends inside the channel table")
            out.append(self.raw[self.pos : self.pos + length].decode("utf-8"))
            self.pos += length
        return out

    def payload(self, count: int, dtype: str) -> np.ndarray:
        need = count * np.dtype(dtype).itemsize
        have = len(self.raw) - self.pos
        if have < need:
            raise TruncatedFileError(f"{self.path}: payload has {have} bytes, header declares {need}")
        if have > need:
            raise DimensionMismatchError(f"{self.path}: payload has {have} bytes, header declares {need}")
        return np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.pos)


def _open(path, magic: bytes) -> _Reader:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    r = _Reader(raw, path)
    r.pos = 4
    (version,) = r.take("<H")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    return r


def trialset_bytes(t: TrialSet) -> bytes:
    buf = io.BytesIO()
    buf.write(TRIALS_MAGIC)
    buf.write(struct.pack("<HIHIfH", FORMAT_VERSION, t.n_trials, t.n_channels, t.n_samples,
                          t.sampling_rate, t.n_classes))
    _write_names(buf, t.channel_names)
    buf.write(t.labels.astype("<u2").tobytes())
    buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def write_trialset(t: TrialSet, path) -> None:
    # exclusive create-or-replace via a temp file in the same directory
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(trialset_bytes(t))
    tmp.replace(path)


def read_trialset(path) -> TrialSet:
    r = _open(path, TRIALS_MAGIC)
    n_trials, n_channels, n_samples, fs, n_classes = r.take("<IHIfH")
    names = r.names(n_channels)
    if r.pos + 2 * n_trials > len(r.raw):
        raise TruncatedFileError(f"{path}: file ends inside the label table")
    labels = np.frombuffer(r.raw, dtype="<u2", count=n_trials, offset=r.pos).astype(np.int64)
    r.pos += 2 * n_trials
    data = r.payload(n_trials * n_channels * n_samples, "<f4")
    data = data.reshape(n_trials, n_channels, n_samples).astype(np.float64)
    try:
        return TrialSet(data, labels, names, float(fs), int(n_classes))
    except ValueError as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc


def write_recording(rec: RawRecording, path) -> None:
    buf = io.BytesIO()
    buf.write(RAW_MAGIC)
    n_ch, n = rec.data.shape
    buf.write(struct.pack("<HHIf", FORMAT_VERSION, n_ch, n, rec.sampling_rate))
    _write_names(buf, rec.channel_names)
    buf.write(struct.pack("<I", len(rec.markers)))
    for idx, label in rec.markers:
        buf.write(struct.pack("<IH", idx, label))
    buf.write(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_recording(path) -> RawRecording:
    r = _open(path, RAW_MAGIC)
    n_ch, n, fs = r.take("<HIf")
    names = r.names(n_ch)
    (n_markers,) = r.take("<I")
    markers = [r.take("<IH") for _ in range(n_markers)]
    data = r.payload(n_ch * n, "<f4").reshape(n_ch, n).astype(np.float64)
    try:
        return RawRecording(data, float(fs), names, [tuple(m) for m in markers])
    except ValueError as exc:
        raise DimensionMismatchError(f"{path}: {exc}") from exc


# --- synthetic data -------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 13
    trials_per_class: int = 23
    n_channels: int = 10
    n_samples: int = 500
    fs: float = 250.0
    snr_db: float = 0.0
    seed: int = 0
    band_halfwidth_hz: float = 3.0

    def validate(self) -> None:
        for name in ("n_classes", "trials_per_class", "n_channels", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fs <= 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.n_classes > REST_CLASS + 1:
            raise ValueError(f"at most {REST_CLASS + 1} classes are defined, got {self.n_classes}")
        if burst_frequency(min(self.n_classes, REST_CLASS) - 1) >= self.fs / 2:
            raise ValueError(f"burst frequencies exceed Nyquist at fs={self.fs}")


def burst_frequency(k: int) -> float:
    return 35.0 + 6.0 * k


def _pink_shape(n: int, fs: float) -> np.ndarray:
    """rfft magnitudes for unit-variance 1/f noise (DC removed)."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    h = np.zeros_like(freqs)
    h[1:] = 1.0 / np.sqrt(freqs[1:])
    two_sided = h**2 * 2.0
    two_sided[0] = h[0] ** 2
    if n % 2 == 0:
        two_sided[-1] = h[-1] ** 2
    return h / np.sqrt(two_sided.sum() / n)


def _band_fraction(n: int, fs: float, lo: float, hi: float) -> float:
    """Expected variance of the unit pink background inside [lo, hi] Hz."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    h = _pink_shape(n, fs)
    w = np.full_like(freqs, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    band = (freqs >= lo) & (freqs <= hi)
    return float((w * h**2)[band].sum() / n)


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], fs: float) -> np.ndarray:
    """Gaussian 1/f noise along the last axis with unit expected variance."""
    n = shape[-1]
    white = rng.standard_normal(shape)
    return np.fft.irfft(np.fft.rfft(white, axis=-1) * _pink_shape(n, fs), n, axis=-1)


def spatial_patterns(n_classes: int, n_channels: int, seed: int) -> np.ndarray:
    """Per-class electrode weights with unit mean square."""
    rng = np.random.default_rng([seed, 0x5A7])
    w = rng.standard_normal((n_classes, n_channels))
    return w / np.sqrt((w**2).mean(axis=1, keepdims=True))


def burst_amplitude(snr_db: float, freq: float, n: int, fs: float, halfwidth: float) -> float:
    """Sine amplitude whose Hann-windowed power equals ``snr`` times the
    background power within ``freq +/- halfwidth``.

    A Hann-windowed sine of amplitude A has mean power A^2 * 3/16 over the
    window.
    """
    noise = _band_fraction(n, fs, freq - halfwidth, freq + halfwidth)
    return float(np.sqrt(10.0 ** (snr_db / 10.0) * noise / (3.0 / 16.0)))


def _burst(rng, k: int, spec: SynthSpec, pattern: np.ndarray, n: int, start: int, width: int) -> np.ndarray:
    freq = burst_frequency(k)
    amp = burst_amplitude(spec.snr_db, freq, spec.n_samples, spec.fs, spec.band_halfwidth_hz)
    t = np.arange(width) / spec.fs
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = amp * np.hanning(width + 2)[1:-1] * np.sin(2.0 * np.pi * freq * t + phase)
    out = np.zeros((len(pattern), n))
    out[:, start : start + width] = pattern[:, None] * wave[None, :]
    return out


def generate_synthetic(spec: SynthSpec = SynthSpec()) -> TrialSet:
    """Pink background plus, for every class but the resting one, a
    Hann-windowed gamma burst (35 + 6k Hz) in the middle half of the trial,
    spread over electrodes by a class-specific pattern.

    Values are rounded to float32 so the set survives a file round trip.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, ch = spec.n_samples, spec.n_channels
    labels = np.repeat(np.arange(spec.n_classes), spec.trials_per_class)
    rng.shuffle(labels)
    patterns = spatial_patterns(spec.n_classes, ch, spec.seed)
    data = pink_noise(rng, (labels.size, ch, n), spec.fs)
    start, width = n // 4, n // 2
    for i, k in enumerate(labels):
        if k != REST_CLASS:
            data[i] += _burst(rng, int(k), spec, patterns[k], n, start, width)
    data = data.astype(np.float32).astype(np.float64)
    names = list(DEFAULT_CHANNELS[:ch]) if ch <= len(DEFAULT_CHANNELS) else [f"E{i}" for i in range(ch)]
    return TrialSet(data, labels, names, spec.fs, spec.n_classes)


def generate_synthetic_recording(
    spec: SynthSpec = SynthSpec(),
    n_trials: int = 50,
    duration_s: float = 120.0,
    fs: float = 1000.0,
    montage=MONTAGE_64,
    first_marker_s: float = 1.0,
) -> RawRecording:
    """Continuous pink-noise recording with evenly spaced trial markers.

    Trial bursts sit 0.5-1.5 s after each marker on the ``DEFAULT_CHANNELS``
    electrodes (burst amplitude is set as for ``generate_synthetic``).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = int(round(duration_s * fs))
    trial_len = int(round(2.0 * fs))
    first = int(round(first_marker_s * fs))
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    spacing = (n - first - trial_len) // max(n_trials - 1, 1)
    if spacing < trial_len and n_trials > 1:
        raise ValueError(f"{n_trials} trials of 2 s do not fit in {duration_s} s")
    labels = np.arange(n_trials) % spec.n_classes
    rng.shuffle(labels)
    data = pink_noise(rng, (len(montage), n), fs)
    picks = [list(montage).index(c) for c in DEFAULT_CHANNELS if c in montage]
    patterns = spatial_patterns(spec.n_classes, len(picks), spec.seed)
    trial_spec = SynthSpec(spec.n_classes, 1, len(picks), trial_len, fs, spec.snr_db, spec.seed,
                           spec.band_halfwidth_hz)
    markers = []
    for i, k in enumerate(labels):
        idx = first + i * spacing
        markers.append((idx, int(k)))
        if k != REST_CLASS:
            burst = _burst(rng, int(k), trial_spec, patterns[k], trial_len, trial_len // 4, trial_len // 2)
            data[picks, idx : idx + trial_len] += burst
    data = data.astype(np.float32).astype(np.float64)
    return RawRecording(data, fs, list(montage), markers)
