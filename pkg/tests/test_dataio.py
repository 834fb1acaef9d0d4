import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from eegattn.dataio import (
    DEFAULT_CHANNELS,
    MONTAGE_64,
    REST_CLASS,
    BadMagicError,
    DimensionMismatchError,
    RawRecording,
    SynthSpec,
    TrialSet,
    TruncatedFileError,
    UnsupportedVersionError,
    burst_frequency,
    generate_synthetic,
    generate_synthetic_recording,
    pink_noise,
    read_recording,
    read_trialset,
    trialset_bytes,
    write_recording,
    write_trialset,
)


def _random_trials(rng, n=5, ch=3, t=20, k=4):
    data = rng.standard_normal((n, ch, t)).astype(np.float32).astype(np.float64)
    return TrialSet(data, rng.integers(0, k, n), [f"c{i}" for i in range(ch)], 250.0, k)


class TestTrialsetFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        t = _random_trials(np.random.default_rng(0))
        write_trialset(t, tmp_path / "t.eegt")
        back = read_trialset(tmp_path / "t.eegt")
        assert back.data.tobytes() == t.data.tobytes()
        assert back.labels.tolist() == t.labels.tolist()
        assert back.channel_names == t.channel_names
        assert (back.sampling_rate, back.n_classes) == (250.0, 4)
        assert trialset_bytes(back) == (tmp_path / "t.eegt").read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_round_trip_any_shape(self, n, ch, t, seed):
        trials = _random_trials(np.random.default_rng(seed), n, ch, t)
        raw = trialset_bytes(trials)
        assert raw[:4] == b"EEGT"
        assert struct.unpack_from("<HIHIfH", raw, 4) == (1, n, ch, t, 250.0, 4)

    def test_default_file_size(self, tmp_path):
        path = tmp_path / "d.eegt"
        write_trialset(generate_synthetic(SynthSpec(seed=42)), path)
        # 4 magic + 2 version + 4 + 2 + 4 + 4 fs + 2 classes = 22
        # names: 10 u16 prefixes + 25 characters = 45; labels 299 * 2
        header = 22 + 45 + 598
        assert path.stat().st_size == header + 299 * 10 * 500 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.eegt"
        write_trialset(_random_trials(np.random.default_rng(1)), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(BadMagicError):
            read_trialset(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "t.eegt"
        raw = trialset_bytes(_random_trials(np.random.default_rng(1)))
        path.write_bytes(raw[:4] + struct.pack("<H", 7) + raw[6:])
        with pytest.raises(UnsupportedVersionError):
            read_trialset(path)

    @pytest.mark.parametrize("cut", [8, 30, 70, -1])
    def test_truncated(self, tmp_path, cut):
        path = tmp_path / "t.eegt"
        path.write_bytes(trialset_bytes(_random_trials(np.random.default_rng(1)))[:cut])
        with pytest.raises(TruncatedFileError):
            read_trialset(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.eegt"
        path.write_bytes(trialset_bytes(_random_trials(np.random.default_rng(1))) + b"\0" * 4)
        with pytest.raises(DimensionMismatchError):
            read_trialset(path)

    def test_label_out_of_range_rejected(self, tmp_path):
        t = _random_trials(np.random.default_rng(2))
        raw = bytearray(trialset_bytes(t))
        # labels sit after the 22-byte header and the name table
        offset = 22 + sum(2 + len(n) for n in t.channel_names)
        raw[offset : offset + 2] = struct.pack("<H", 9)
        path = tmp_path / "t.eegt"
        path.write_bytes(bytes(raw))
        with pytest.raises(DimensionMismatchError):
            read_trialset(path)


class TestRecordingFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((3, 400)).astype(np.float32)
        rec = RawRecording(data, 1000.0, ["a", "b", "c"], [(10, 1), (200, 12)])
        write_recording(rec, tmp_path / "r.eegr")
        back = read_recording(tmp_path / "r.eegr")
        assert back.data.tobytes() == rec.data.tobytes()
        assert back.markers == rec.markers
        assert back.channel_names == ["a", "b", "c"]

    def test_trialset_magic_rejected(self, tmp_path):
        path = tmp_path / "t.eegt"
        write_trialset(_random_trials(np.random.default_rng(1)), path)
        with pytest.raises(BadMagicError):
            read_recording(path)

    def test_marker_validation(self):
        with pytest.raises(ValueError):
            RawRecording(np.zeros((1, 10)), 1.0, ["a"], [(5, 0), (5, 1)])
        with pytest.raises(ValueError):
            RawRecording(np.zeros((1, 10)), 1.0, ["a"], [(10, 0)])


class TestGenerator:
    def test_montage(self):
        assert len(MONTAGE_64) == 64 == len(set(MONTAGE_64))
        assert set(DEFAULT_CHANNELS) <= set(MONTAGE_64)

    def test_default_dimensions(self):
        t = generate_synthetic()
        assert t.data.shape == (299, 10, 500)
        assert t.channel_names == list(DEFAULT_CHANNELS)

    def test_deterministic(self):
        a, b = generate_synthetic(SynthSpec(seed=9)), generate_synthetic(SynthSpec(seed=9))
        assert a.data.tobytes() == b.data.tobytes()
        assert a.labels.tolist() == b.labels.tolist()
        assert generate_synthetic(SynthSpec(seed=10)).data.tobytes() != a.data.tobytes()

    def test_label_histogram(self):
        t = generate_synthetic(SynthSpec(trials_per_class=7, seed=1))
        assert np.bincount(t.labels).tolist() == [7] * 13

    def test_burst_frequencies_inside_passband(self):
        freqs = [burst_frequency(k) for k in range(REST_CLASS)]
        assert freqs[0] == 35.0 and freqs[-1] == 101.0
        assert all(30 < f < 120 for f in freqs)

    def test_zero_mean_per_channel(self):
        t = generate_synthetic(SynthSpec(seed=3))
        trial_means = t.data.mean(axis=2)
        grand = trial_means.mean(axis=0)
        se = trial_means.std(axis=0, ddof=1) / np.sqrt(t.n_trials)
        assert np.all(np.abs(grand) <= 3 * se + 1e-12)

    def test_pink_noise_unit_variance_and_slope(self):
        x = pink_noise(np.random.default_rng(0), (400, 500), 250.0)
        assert abs(x.var() - 1) < 0.02
        f, p = signal.welch(x, fs=250.0, nperseg=250)
        p = p.mean(axis=0)
        slope = np.polyfit(np.log(f[2:100]), np.log(p[2:100]), 1)[0]
        assert -1.2 < slope < -0.8

    def test_bandpower_separates_class0_from_rest_at_high_snr(self):
        t = generate_synthetic(SynthSpec(snr_db=20, seed=5))
        f, p = signal.welch(t.data, fs=250.0, nperseg=128, axis=-1)
        band = (f >= 32) & (f <= 38)
        power = p[..., band].sum(axis=-1).sum(axis=-1)  # over band, then channels
        burst, rest = power[t.labels == 0], power[t.labels == REST_CLASS]
        threshold = (burst.min() + rest.max()) / 2
        accuracy = (np.sum(burst > threshold) + np.sum(rest <= threshold)) / (burst.size + rest.size)
        assert burst.min() > rest.max()
        assert accuracy == 1.0

    def test_in_band_snr_calibration(self):
        # same seed with a vanishing burst leaves the identical background
        snr_db = 10.0
        spec = SynthSpec(snr_db=snr_db, trials_per_class=40, seed=6)
        t = generate_synthetic(spec)
        bg = generate_synthetic(SynthSpec(snr_db=-300, trials_per_class=40, seed=6))
        sel = t.labels == 3
        f0 = burst_frequency(3)
        burst = (t.data[sel] - bg.data[sel])[..., 125:375]
        burst_power = (burst**2).mean()
        f, p = signal.periodogram(bg.data, fs=250.0, axis=-1)
        band = np.abs(f - f0) <= 3
        bg_power = p[..., band].sum(axis=-1).mean() * (f[1] - f[0])
        assert abs(10 * np.log10(burst_power / bg_power) - snr_db) < 1.0

    @pytest.mark.parametrize("kwargs", [{"n_classes": 0}, {"trials_per_class": 0}, {"n_classes": 14}, {"fs": 100.0}])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            generate_synthetic(SynthSpec(**kwargs))

    def test_recording_layout(self):
        rec = generate_synthetic_recording(SynthSpec(seed=2), n_trials=50, duration_s=120, fs=1000)
        assert rec.data.shape == (64, 120_000)
        assert len(rec.markers) == 50
        assert rec.markers[0][0] == 1000
        assert np.all(np.diff([m[0] for m in rec.markers]) >= 2000)
