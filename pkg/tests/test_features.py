"""WAV IO, mel filterbank, DCT, and MFCC pipeline tests."""

import math
import struct

import numpy as np
import pytest

from tdnnser.features import (
    ArchiveFormatError,
    FeatureMatrix,
    MfccConfig,
    Waveform,
    WavFormatError,
    build_mel_filterbank,
    compute_mfcc,
    dct_ii,
    hz_to_mel,
    idct_ii,
    mel_to_hz,
    read_feature_archive,
    read_wav,
    write_feature_archive,
    write_wav,
)


def make_wav_bytes(samples, rate=16000, fmt_tag=1, channels=1, bits=16, data_size=None):
    """Hand-assemble a RIFF/WAVE byte string, independently of write_wav."""
    pcm = struct.pack(f"<{len(samples)}h", *samples)
    if data_size is None:
        data_size = len(pcm)
    return struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(pcm),
        b"WAVE",
        b"fmt ",
        16,
        fmt_tag,
        channels,
        rate,
        rate * channels * bits // 8,
        channels * bits // 8,
        bits,
        b"data",
        data_size,
    ) + pcm


class TestWavIo:
    def test_zero_second_of_silence(self, tmp_path):
        path = tmp_path / "zeros.wav"
        write_wav(path, Waveform(np.zeros(16000), 16000))
        w = read_wav(path)
        assert w.sample_rate_hz == 16000
        assert w.samples.shape == (16000,)
        assert np.all(w.samples == 0.0)

    def test_header_sample_rate_passthrough(self, tmp_path):
        path = tmp_path / "slow.wav"
        path.write_bytes(make_wav_bytes([0, 1, -1, 2], rate=8000))
        assert read_wav(path).sample_rate_hz == 8000

    def test_scale_boundary(self, tmp_path):
        path = tmp_path / "edge.wav"
        path.write_bytes(make_wav_bytes([-32768, 32767, 16384]))
        w = read_wav(path)
        assert w.samples[0] == -1.0
        assert w.samples[1] == pytest.approx(32767 / 32768)
        assert w.samples[2] == 0.5

    def test_rejects_non_pcm(self, tmp_path):
        path = tmp_path / "float.wav"
        path.write_bytes(make_wav_bytes([0, 0], fmt_tag=3))
        with pytest.raises(WavFormatError, match="format tag"):
            read_wav(path)

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / "stereo.wav"
        path.write_bytes(make_wav_bytes([0, 0], channels=2))
        with pytest.raises(WavFormatError, match="channels"):
            read_wav(path)

    def test_rejects_truncated_data(self, tmp_path):
        path = tmp_path / "cut.wav"
        path.write_bytes(make_wav_bytes([1, 2, 3], data_size=400))
        with pytest.raises(WavFormatError, match="truncated"):
            read_wav(path)

    def test_rejects_non_riff(self, tmp_path):
        path = tmp_path / "noise.bin"
        path.write_bytes(b"OGGS" + b"\x00" * 40)
        with pytest.raises(WavFormatError, match="RIFF"):
            read_wav(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "absent.wav")

    def test_roundtrip_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = rng.uniform(-0.99, 0.99, size=777)
        path = tmp_path / "rt.wav"
        write_wav(path, Waveform(samples, 16000))
        back = read_wav(path)
        assert np.max(np.abs(back.samples - samples)) <= 1.0 / 32768.0

    def test_waveform_validation(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]), 16000)
        with pytest.raises(ValueError):
            Waveform(np.array([]), 16000)
        with pytest.raises(ValueError):
            Waveform(np.zeros(10), 0)


class TestMelFilterbank:
    def test_mel_scale_values(self):
        assert hz_to_mel(0.0) == 0.0
        assert hz_to_mel(700.0) == pytest.approx(1127.0 * math.log(2.0), abs=1e-9)
        assert float(hz_to_mel(700.0)) == pytest.approx(781.17, abs=0.01)
        freqs = np.array([20.0, 440.0, 1000.0, 7600.0])
        assert np.allclose(mel_to_hz(hz_to_mel(freqs)), freqs, atol=1e-9)

    def test_default_geometry_against_enumerated_corners(self):
        # Independent corner enumeration: 42 points equally spaced in mel
        # between 20 Hz and Nyquist - 400 Hz, mapped to FFT bins.
        cfg = MfccConfig()
        rate = 16000
        fb = build_mel_filterbank(cfg, rate)
        mels = np.linspace(
            1127.0 * math.log(1.0 + 20.0 / 700.0),
            1127.0 * math.log(1.0 + 7600.0 / 700.0),
            42,
        )
        hz = 700.0 * (np.exp(mels / 1127.0) - 1.0)
        corner_bins = np.floor((512 + 1) * hz / rate).astype(int)

        assert fb.filters.shape == (40, 257)
        assert np.array_equal(fb.peak_bins, corner_bins[1:-1])
        assert np.all(np.diff(fb.peak_bins) > 0)
        for m in range(40):
            row = fb.filters[m]
            assert np.all(row >= 0.0)
            assert row.max() > 0.0
            outside = np.ones(257, dtype=bool)
            outside[corner_bins[m] : corner_bins[m + 2]] = False
            assert np.all(row[outside] == 0.0)

    def test_bin_coverage_between_bounds(self):
        cfg = MfccConfig()
        fb = build_mel_filterbank(cfg, 16000)
        low_bin = int(np.floor(513 * 20.0 / 16000))
        high_bin = int(np.floor(513 * 7600.0 / 16000))
        coverage = fb.filters.sum(axis=0)
        assert np.all(coverage[low_bin + 1 : high_bin] > 0.0)

    def test_too_many_filters_rejected(self):
        cfg = MfccConfig(num_mel_filters=300, num_ceps=40)
        with pytest.raises(ValueError, match="too large"):
            build_mel_filterbank(cfg, 16000)

    def test_bounds_validation(self):
        with pytest.raises(ValueError, match="Nyquist"):
            build_mel_filterbank(MfccConfig(high_freq_hz=9000.0), 16000)
        with pytest.raises(ValueError):
            build_mel_filterbank(MfccConfig(low_freq_hz=5000.0, high_freq_hz=400.0), 16000)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MfccConfig(num_ceps=41)
        with pytest.raises(ValueError):
            MfccConfig(pre_emphasis=1.0)
        with pytest.raises(ValueError):
            MfccConfig(fft_size=500)
        with pytest.raises(ValueError):
            MfccConfig(log_floor=0.0)


def brute_force_dct_ii(x):
    """Direct O(n^2) orthonormal DCT-II summation."""
    n = len(x)
    out = np.empty(n)
    for k in range(n):
        acc = 0.0
        for i in range(n):
            acc += x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n))
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        out[k] = scale * acc
    return out


class TestDct:
    def test_constant_vector(self):
        assert np.allclose(dct_ii(np.ones(4), 4), [2.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for x in (np.array([1.0, 0.0, 0.0, 0.0]), rng.standard_normal(7), rng.standard_normal(40)):
            expected = brute_force_dct_ii(x)
            assert np.allclose(dct_ii(x, len(x)), expected, atol=1e-10)
            assert np.allclose(dct_ii(x, 3), expected[:3], atol=1e-10)

    def test_roundtrip_orthonormality(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(16)
        assert np.allclose(idct_ii(dct_ii(x, 16)), x, atol=1e-10)

    def test_truncation_over_length_rejected(self):
        with pytest.raises(ValueError):
            dct_ii(np.ones(4), 5)


class TestComputeMfcc:
    def test_zero_waveform_constant_spectrum(self):
        cfg = MfccConfig()
        feats = compute_mfcc(Waveform(np.zeros(16000), 16000), cfg)
        # All mel energies sit on the log floor, so every frame is the DCT of
        # a constant vector: c0 = sqrt(40)*ln(1e-10), higher coefficients 0.
        assert np.allclose(feats.frames[:, 1:], 0.0, atol=1e-9)
        assert np.allclose(
            feats.frames[:, 0], math.sqrt(40.0) * math.log(1e-10), atol=1e-9
        )
        assert np.all(feats.frames == feats.frames[0])

    def test_frame_count_formula(self):
        cfg = MfccConfig()
        for n in (400, 401, 16000, 12345):
            w = Waveform(np.random.default_rng(n).uniform(-0.5, 0.5, n), 16000)
            feats = compute_mfcc(w, cfg)
            assert feats.num_frames == 1 + (n - 400) // 160
            assert feats.dim == 40
        with pytest.raises(ValueError, match="shorter"):
            compute_mfcc(Waveform(np.zeros(399), 16000), cfg)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        w = Waveform(rng.uniform(-0.8, 0.8, 4800), 16000)
        a = compute_mfcc(w, MfccConfig())
        b = compute_mfcc(w, MfccConfig())
        assert np.array_equal(a.frames, b.frames)

    def test_all_outputs_finite(self):
        # Mixed silence and tone; the log floor guards the silent frames.
        t = np.arange(8000) / 16000.0
        sig = np.where(t < 0.25, 0.0, 0.5 * np.sin(2 * np.pi * 440 * t))
        feats = compute_mfcc(Waveform(sig, 16000), MfccConfig())
        assert np.all(np.isfinite(feats.frames))

    def test_amplitude_scaling_shifts_only_c0(self):
        rng = np.random.default_rng(4)
        base = rng.uniform(-0.2, 0.2, 6400)
        cfg = MfccConfig()
        a = compute_mfcc(Waveform(base, 16000), cfg)
        b = compute_mfcc(Waveform(2.0 * base, 16000), cfg)
        assert np.allclose(a.frames[:, 1:], b.frames[:, 1:], atol=1e-8)
        assert not np.allclose(a.frames[:, 0], b.frames[:, 0], atol=1e-3)

    def test_sine_peaks_at_nearest_filter(self):
        # Plain-DFT oracle: frame, window, and integrate filter energies
        # without the fft-based production path.
        cfg = MfccConfig()
        rate = 16000
        t = np.arange(int(0.3 * rate)) / rate
        sine = np.sin(2.0 * np.pi * 1000.0 * t)
        fb = build_mel_filterbank(cfg, rate)

        x = np.concatenate([sine[:1], sine[1:] - 0.97 * sine[:-1]])
        frame_len, shift, nfft = 400, 160, 512
        window = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(frame_len) / (frame_len - 1))
        k = np.arange(nfft // 2 + 1)
        dft = np.exp(-2j * np.pi * np.outer(k, np.arange(nfft)) / nfft)
        energies = np.zeros(40)
        num_frames = 1 + (len(x) - frame_len) // shift
        for i in range(num_frames):
            frame = np.zeros(nfft)
            frame[:frame_len] = x[i * shift : i * shift + frame_len] * window
            power = np.abs(dft @ frame) ** 2
            energies += fb.filters @ power
        # 1 kHz lies exactly midway between the two straddling peaks
        # (937.5 and 1062.5 Hz), so accept any peak at the minimal distance.
        distances = np.abs(fb.peak_bins * rate / nfft - 1000.0)
        assert distances[np.argmax(energies)] == distances.min()

    def test_energy_c0_option(self):
        rng = np.random.default_rng(5)
        w = Waveform(rng.uniform(-0.5, 0.5, 1600), 16000)
        plain = compute_mfcc(w, MfccConfig())
        energy = compute_mfcc(w, MfccConfig(use_energy_as_c0=True))
        assert not np.allclose(plain.frames[:, 0], energy.frames[:, 0])
        assert np.allclose(plain.frames[:, 1:], energy.frames[:, 1:])


class TestFeatureArchive:
    def test_roundtrip_and_layout(self, tmp_path):
        rng = np.random.default_rng(6)
        mats = [
            FeatureMatrix(rng.standard_normal((3, 2)), utterance_id="utt_a"),
            FeatureMatrix(rng.standard_normal((1, 5)), utterance_id="b"),
        ]
        path = tmp_path / "arc.feat"
        write_feature_archive(path, mats)
        back = read_feature_archive(path)
        assert [m.utterance_id for m in back] == ["utt_a", "b"]
        for orig, copy in zip(mats, back):
            assert np.array_equal(orig.frames, copy.frames)

        data = path.read_bytes()
        assert data[:5] == b"FEAT1"
        (id_len,) = struct.unpack_from("<I", data, 5)
        assert data[9 : 9 + id_len] == b"utt_a"
        t, d = struct.unpack_from("<II", data, 9 + id_len)
        assert (t, d) == (3, 2)
        first_value = struct.unpack_from("<d", data, 17 + id_len)[0]
        assert first_value == mats[0].frames[0, 0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.feat"
        path.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(ArchiveFormatError, match="magic"):
            read_feature_archive(path)

    def test_truncated(self, tmp_path):
        mats = [FeatureMatrix(np.ones((4, 4)), utterance_id="x")]
        path = tmp_path / "cut.feat"
        write_feature_archive(path, mats)
        (tmp_path / "cut2.feat").write_bytes(path.read_bytes()[:-9])
        with pytest.raises(ArchiveFormatError, match="truncated"):
            read_feature_archive(tmp_path / "cut2.feat")

    def test_feature_matrix_validation(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            FeatureMatrix(np.array([[1.0, np.inf]]))
