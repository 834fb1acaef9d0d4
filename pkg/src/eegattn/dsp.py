"""Preprocessing: Butterworth design in second-order sections, zero-phase
filtering, decimation, epoching with baseline correction, channel picks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal

from .dataio import RawRecording, TrialSet

logger = logging.getLogger(__name__)

LANGUAGE_CHANNELS = ("AF3", "F3", "F5", "FC3", "FC5", "T7", "C5", "TP7", "CP5", "P5")


class FilterDesignError(ValueError):
    pass


class SignalTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class SosFilter:
    sections: np.ndarray  # [n_sections, 6] rows b0 b1 b2 a0 a1 a2, a0 == 1
    order: int
    low_hz: float | None
    high_hz: float | None
    fs: float
    kind: str = "bandpass"

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:]) for s in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def _prewarp(f_hz: float, fs: float) -> float:
    return 2.0 * fs * np.tan(np.pi * f_hz / fs)


def _analog_prototype(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _bilinear(z: np.ndarray, p: np.ndarray, k: float, fs: float):
    fs2 = 2.0 * fs
    zd = (fs2 + z) / (fs2 - z)
    pd = (fs2 + p) / (fs2 - p)
    # analog zeros at infinity land on Nyquist
    zd = np.concatenate([zd, -np.ones(len(p) - len(z))])
    kd = k * np.real(np.prod(fs2 - z) / np.prod(fs2 - p))
    return zd, pd, kd


def _split_conjugates(roots: np.ndarray, tol: float = 1e-10):
    upper = [r for r in roots if r.imag > tol]
    real = sorted((r.real for r in roots if abs(r.imag) <= tol))
    return upper, real


def _zpk_to_sos(z: np.ndarray, p: np.ndarray, k: float) -> np.ndarray:
    """Pair conjugate poles into biquads, giving each the nearest remaining zeros.

    Sections are emitted with the poles farthest from the unit circle first;
    the overall gain rides on the first section.
    """
    pairs, real_poles = _split_conjugates(p)
    groups: list[list[complex]] = [[pp, np.conj(pp)] for pp in pairs]
    real_poles = list(real_poles)
    while real_poles:
        groups.append([real_poles.pop(0)] + ([real_poles.pop(0)] if real_poles else []))
    groups.sort(key=lambda g: -max(abs(1 - abs(x)) for x in g))

    zpairs, zreal = _split_conjugates(z)
    zpairs = list(zpairs)
    zreal = list(zreal)
    sections = []
    for g in groups[::-1]:
        anchor = g[0]
        chosen: list[complex] = []
        if zpairs and (not zreal or min(abs(zz - anchor) for zz in zpairs) <= min(abs(zz - anchor) for zz in zreal)):
            best = min(zpairs, key=lambda zz: abs(zz - anchor))
            zpairs.remove(best)
            chosen = [best, np.conj(best)]
        else:
            for _ in range(min(2, len(zreal))):
                best = min(zreal, key=lambda zz: abs(zz - anchor))
                zreal.remove(best)
                chosen.append(best)
        b = np.real(np.poly(chosen)) if chosen else np.array([1.0])
        a = np.real(np.poly(g))
        b = np.concatenate([b, np.zeros(3 - len(b))])
        a = np.concatenate([a, np.zeros(3 - len(a))])
        sections.append(np.concatenate([b, a]))
    if zpairs or zreal:
        raise FilterDesignError("more zeros than poles; cannot factor into sections")
    sos = np.array(sections[::-1])
    sos[0, :3] *= k
    return sos


def _check_cutoffs(fs: float, *freqs: float) -> None:
    nyq = fs / 2.0
    for f in freqs:
        if not 0.0 < f < nyq:
            raise FilterDesignError(f"cutoff {f} Hz outside (0, {nyq}) for fs={fs}")


def design_butterworth_bandpass(order: int = 5, low_hz: float = 30.0, high_hz: float = 120.0,
                                fs: float = 250.0) -> SosFilter:
    """Digital band-pass from an ``order``-pole analog Butterworth prototype.

    The band transform doubles the pole count, so the result has ``order``
    biquads (``2 * order`` poles). Both cutoffs are prewarped, so the
    single-pass gain there is exactly ``1/sqrt(2)``.
    """
    if order < 1:
        raise FilterDesignError(f"order must be positive, got {order}")
    _check_cutoffs(fs, low_hz, high_hz)
    if not low_hz < high_hz:
        raise FilterDesignError(f"low cutoff {low_hz} must be below high cutoff {high_hz}")
    w1, w2 = _prewarp(low_hz, fs), _prewarp(high_hz, fs)
    bw, w0 = w2 - w1, np.sqrt(w1 * w2)
    proto = _analog_prototype(order)
    half = proto * bw / 2.0
    disc = np.sqrt(half**2 - w0**2)
    p = np.concatenate([half + disc, half - disc])
    z = np.zeros(order)
    k = bw**order
    zd, pd, kd = _bilinear(z, p, k, fs)
    return SosFilter(_zpk_to_sos(zd, pd, kd), order, low_hz, high_hz, fs, "bandpass")


def design_butterworth_lowpass(order: int, cutoff_hz: float, fs: float) -> SosFilter:
    if order < 1:
        raise FilterDesignError(f"order must be positive, got {order}")
    _check_cutoffs(fs, cutoff_hz)
    wc = _prewarp(cutoff_hz, fs)
    p = _analog_prototype(order) * wc
    zd, pd, kd = _bilinear(np.array([]), p, wc**order, fs)
    return SosFilter(_zpk_to_sos(zd, pd, kd), order, None, cutoff_hz, fs, "lowpass")


def frequency_response(f: SosFilter, freqs_hz) -> np.ndarray:
    """Complex single-pass response, evaluated as the product of biquad
    polynomial ratios on the unit circle."""
    zinv = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=float) / f.fs)
    h = np.ones_like(zinv)
    for b0, b1, b2, a0, a1, a2 in f.sections:
        h = h * (b0 + b1 * zinv + b2 * zinv**2) / (a0 + a1 * zinv + a2 * zinv**2)
    return h


def pad_length(f: SosFilter) -> int:
    return 3 * (2 * f.order) + 1


def sosfilt(f: SosFilter, x: np.ndarray, axis: int = -1, zi=None):
    return signal.sosfilt(f.sections, x, axis=axis, zi=zi)


def filtfilt(x, f: SosFilter, axis: int = -1) -> np.ndarray:
    """Zero-phase forward-backward filtering with odd-reflection edge padding.

    Each pass starts from the steady-state section states scaled by the
    first padded sample, so a constant input passes without a start-up step.
    """
    x = np.asarray(x, dtype=float)
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    pad = pad_length(f)
    if n <= max(pad, 6 * f.n_sections):
        raise SignalTooShortError(f"signal of {n} samples too short for edge padding of {pad}")
    left = 2 * x[..., :1] - x[..., pad:0:-1]
    right = 2 * x[..., -1:] - x[..., -2 : -pad - 2 : -1]
    ext = np.concatenate([left, x, right], axis=-1)

    zi = signal.sosfilt_zi(f.sections)  # [n_sections, 2]
    zi_shape = (f.n_sections,) + (1,) * (ext.ndim - 1) + (2,)
    zi = zi.reshape(zi_shape)

    y = sosfilt(f, ext, zi=zi * ext[..., :1][None, ...])[0]
    y = y[..., ::-1]
    y = sosfilt(f, y, zi=zi * y[..., :1][None, ...])[0]
    y = y[..., ::-1][..., pad : pad + n]
    return np.moveaxis(np.ascontiguousarray(y), -1, axis)


def bandpass(rec: RawRecording, order: int = 5, low_hz: float = 30.0, high_hz: float = 120.0) -> RawRecording:
    f = design_butterworth_bandpass(order, low_hz, high_hz, rec.sampling_rate)
    return replace(rec, data=filtfilt(rec.data, f, axis=-1))


def downsample(rec: RawRecording, target_fs: float) -> RawRecording:
    """Anti-alias (8th-order Butterworth at 0.4 * target, zero-phase), then
    keep every ``factor``-th sample. Marker indices are floor-divided."""
    ratio = rec.sampling_rate / target_fs
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"source rate {rec.sampling_rate} is not an integer multiple of {target_fs}")
    if factor == 1:
        return rec
    lp = design_butterworth_lowpass(8, 0.4 * target_fs, rec.sampling_rate)
    data = filtfilt(rec.data, lp, axis=-1)[:, ::factor]
    markers = [(idx // factor, label) for idx, label in rec.markers]
    return RawRecording(np.ascontiguousarray(data), float(target_fs), list(rec.channel_names), markers)


class RejectedTrial(NamedTuple):
    marker: int
    sample: int
    label: int
    reason: str


@dataclass
class EpochResult:
    trials: TrialSet
    rejected: list[RejectedTrial] = field(default_factory=list)


def epoch_trials(rec: RawRecording, pre_s: float = 0.5, dur_s: float = 2.0, n_classes: int = 13) -> EpochResult:
    """Cut ``dur_s`` after each marker and subtract the per-channel mean of
    the ``pre_s`` immediately before it. Markers whose window leaves the
    recording are rejected and listed in the result."""
    fs = rec.sampling_rate
    n_pre = int(round(pre_s * fs))
    n_dur = int(round(dur_s * fs))
    n_total = rec.data.shape[1]
    epochs, labels, rejected = [], [], []
    for i, (idx, label) in enumerate(rec.markers):
        if idx - n_pre < 0 or idx + n_dur > n_total:
            reason = f"window [{idx - n_pre}, {idx + n_dur}) outside [0, {n_total})"
            rejected.append(RejectedTrial(i, idx, label, reason))
            logger.warning("rejecting trial %d at sample %d: %s", i, idx, reason)
            continue
        baseline = rec.data[:, idx - n_pre : idx].mean(axis=1, keepdims=True) if n_pre else 0.0
        epochs.append(rec.data[:, idx : idx + n_dur] - baseline)
        labels.append(label)
    data = np.stack(epochs) if epochs else np.zeros((0, rec.data.shape[0], n_dur))
    trials = TrialSet(data, np.asarray(labels, dtype=np.int64), list(rec.channel_names), fs, n_classes)
    return EpochResult(trials, rejected)


def select_channels(t: TrialSet, names: Sequence[str] = LANGUAGE_CHANNELS) -> TrialSet:
    missing = [n for n in names if n not in t.channel_names]
    if missing:
        raise KeyError(f"channels not in montage: {', '.join(missing)}")
    idx = [t.channel_names.index(n) for n in names]
    return replace(t, data=t.data[:, idx, :], channel_names=list(names))


@dataclass(frozen=True)
class PreprocessConfig:
    target_fs: float = 250.0
    filter_order: int = 5
    low_hz: float = 30.0
    high_hz: float = 120.0
    apply_filter: bool = True
    pre_s: float = 0.5
    dur_s: float = 2.0
    channels: tuple[str, ...] = LANGUAGE_CHANNELS
    n_classes: int = 13


def artifact_passthrough(rec: RawRecording) -> RawRecording:
    """Hook where ICA-based ocular/muscle artifact removal would sit."""
    return rec


def preprocess(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig(), artifact_hook=artifact_passthrough):
    """Downsample, band-pass the continuous recording, epoch, baseline-correct
    and pick channels. Returns the epoch result and the per-stage shapes."""
    stages = [("raw", rec.data.shape)]
    rec = downsample(rec, cfg.target_fs)
    stages.append(("downsample", rec.data.shape))
    if cfg.apply_filter:
        rec = bandpass(rec, cfg.filter_order, cfg.low_hz, cfg.high_hz)
        stages.append(("bandpass", rec.data.shape))
    rec = artifact_hook(rec)
    result = epoch_trials(rec, cfg.pre_s, cfg.dur_s, cfg.n_classes)
    stages.append(("epoch", result.trials.data.shape))
    result.trials = select_channels(result.trials, cfg.channels)
    stages.append(("channels", result.trials.data.shape))
    return result, stages
