"""MFCC feature extraction and WAV / feature-archive I/O."""

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft


class WavFormatError(Exception):
    """Raised when a WAV file is not a mono PCM16 RIFF/WAVE container."""


class ArchiveFormatError(Exception):
    """Raised when a feature archive is corrupt or has the wrong magic."""


@dataclass
class Waveform:
    """Mono audio signal with amplitudes normalized to [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class MfccConfig:
    """Parameters of the MFCC pipeline.

    high_freq_hz of None means Nyquist - 400 Hz, resolved against the
    waveform's sample rate when the filterbank is built.
    """

    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_mel_filters: int = 40
    num_ceps: int = 40
    pre_emphasis: float = 0.97
    fft_size: int = 512
    low_freq_hz: float = 20.0
    high_freq_hz: float | None = None
    use_energy_as_c0: bool = False
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.num_ceps > self.num_mel_filters:
            raise ValueError("num_ceps must not exceed num_mel_filters")
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ValueError("pre_emphasis must lie in [0, 1)")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.log_floor <= 0.0:
            raise ValueError("log_floor must be positive")

    def frame_length(self, sample_rate_hz: int) -> int:
        return int(round(sample_rate_hz * self.frame_length_ms / 1000.0))

    def frame_shift(self, sample_rate_hz: int) -> int:
        return int(round(sample_rate_hz * self.frame_shift_ms / 1000.0))

    def resolve_high_freq(self, sample_rate_hz: int) -> float:
        nyquist = sample_rate_hz / 2.0
        high = self.high_freq_hz if self.high_freq_hz is not None else nyquist - 400.0
        if not self.low_freq_hz < high <= nyquist:
            raise ValueError("need low_freq_hz < high_freq_hz <= Nyquist")
        return high


@dataclass
class FeatureMatrix:
    """Time-major matrix of per-frame feature vectors for one utterance."""

    frames: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a (T, D) matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class MelFilterbank:
    """Triangular mel filters as weight rows over fft_size/2 + 1 bins."""

    filters: np.ndarray
    peak_bins: np.ndarray = field(default=None)

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        if np.any(self.filters < 0.0):
            raise ValueError("filter weights must be non-negative")
        if np.any(self.filters.sum(axis=1) <= 0.0):
            raise ValueError("every filter needs at least one positive weight")


def hz_to_mel(f):
    """Mel scale: mel(f) = 1127 * ln(1 + f/700)."""
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def read_wav(path) -> Waveform:
    """Read a mono PCM16 RIFF/WAVE file and scale samples by 1/32768."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    sample_rate = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, chunk_size = struct.unpack_from("<4sI", data, pos)
        pos += 8
        body = data[pos : pos + chunk_size]
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavFormatError(f"{path}: malformed fmt chunk")
            fmt_tag, channels, sample_rate, _, _, bits = struct.unpack_from(
                "<HHIIHH", body, 0
            )
            if fmt_tag != 1:
                raise WavFormatError(
                    f"{path}: format tag {fmt_tag}, only PCM (1) is supported"
                )
            if channels != 1:
                raise WavFormatError(f"{path}: {channels} channels, expected mono")
            if bits != 16:
                raise WavFormatError(f"{path}: {bits}-bit samples, expected 16")
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise WavFormatError(f"{path}: truncated data chunk")
            pcm = body
        pos += chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if sample_rate is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise WavFormatError(f"{path}: missing data chunk")
    raw = np.frombuffer(pcm, dtype="<i2")
    return Waveform(raw.astype(np.float64) / 32768.0, sample_rate)


def write_wav(path, w: Waveform) -> None:
    """Write a Waveform as a mono PCM16 RIFF/WAVE file."""
    scaled = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    pcm = scaled.tobytes()
    byte_rate = w.sample_rate_hz * 2
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(pcm),
        b"WAVE",
        b"fmt ",
        16,
        1,
        1,
        w.sample_rate_hz,
        byte_rate,
        2,
        16,
        b"data",
        len(pcm),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pcm)


def build_mel_filterbank(cfg: MfccConfig, sample_rate_hz: int) -> MelFilterbank:
    """Build triangular filters with corners equally spaced on the mel scale."""
    high = cfg.resolve_high_freq(sample_rate_hz)
    n_bins = cfg.fft_size // 2 + 1
    mel_corners = np.linspace(
        hz_to_mel(cfg.low_freq_hz), hz_to_mel(high), cfg.num_mel_filters + 2
    )
    corner_bins = np.floor(
        (cfg.fft_size + 1) * mel_to_hz(mel_corners) / sample_rate_hz
    ).astype(int)
    if np.any(np.diff(corner_bins) < 1):
        raise ValueError(
            "num_mel_filters too large for fft_size: a filter would cover zero bins"
        )

    filters = np.zeros((cfg.num_mel_filters, n_bins))
    for m in range(cfg.num_mel_filters):
        left, peak, right = corner_bins[m : m + 3]
        for k in range(left, peak):
            filters[m, k] = (k - left) / (peak - left)
        for k in range(peak, right):
            filters[m, k] = (right - k) / (right - peak)
    return MelFilterbank(filters, peak_bins=corner_bins[1:-1].copy())


def dct_ii(x, k: int):
    """Orthonormal DCT-II of the last axis, truncated to k coefficients."""
    x = np.asarray(x, dtype=np.float64)
    if k > x.shape[-1]:
        raise ValueError("k exceeds input length")
    return scipy.fft.dct(x, type=2, norm="ortho", axis=-1)[..., :k]


def idct_ii(c):
    """Inverse of the orthonormal DCT-II (full-length coefficients)."""
    return scipy.fft.idct(np.asarray(c, dtype=np.float64), type=2, norm="ortho", axis=-1)


def compute_mfcc(w: Waveform, cfg: MfccConfig, utterance_id: str = "") -> FeatureMatrix:
    """Compute per-frame MFCCs.

    Pipeline: pre-emphasis, Hamming window, FFT power spectrum, mel filter
    energies, floored log, orthonormal DCT-II truncated to num_ceps. No
    cepstral mean normalization is applied; speaker adaptation vectors take
    its place downstream.
    """
    rate = w.sample_rate_hz
    frame_len = cfg.frame_length(rate)
    shift = cfg.frame_shift(rate)
    if cfg.fft_size < frame_len:
        raise ValueError("fft_size smaller than the frame length")
    n = w.samples.size
    if n < frame_len:
        raise ValueError(f"waveform has {n} samples, shorter than one frame")

    emphasized = np.concatenate(
        [w.samples[:1], w.samples[1:] - cfg.pre_emphasis * w.samples[:-1]]
    )
    num_frames = 1 + (n - frame_len) // shift
    idx = np.arange(frame_len)[None, :] + shift * np.arange(num_frames)[:, None]
    framed = emphasized[idx]

    window = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(frame_len) / (frame_len - 1))
    spectrum = np.fft.rfft(framed * window, n=cfg.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2

    fbank = build_mel_filterbank(cfg, rate)
    mel_energies = power @ fbank.filters.T
    log_mel = np.log(np.maximum(mel_energies, cfg.log_floor))
    ceps = dct_ii(log_mel, cfg.num_ceps)
    if cfg.use_energy_as_c0:
        frame_energy = np.maximum((framed**2).sum(axis=1), cfg.log_floor)
        ceps[:, 0] = np.log(frame_energy)
    return FeatureMatrix(ceps, utterance_id=utterance_id)


_MAGIC = b"FEAT1"


def write_feature_archive(path, mats: list) -> None:
    """Write FeatureMatrix records to a binary archive.

    Layout: magic "FEAT1", then per utterance: id length (u32 LE), id bytes,
    T and D (u32 LE), T*D float64 LE row-major.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for mat in mats:
            ident = mat.utterance_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<II", mat.num_frames, mat.dim))
            fh.write(np.ascontiguousarray(mat.frames, dtype="<f8").tobytes())


def read_feature_archive(path) -> list:
    """Read back an archive written by write_feature_archive, in order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic, not a feature archive")
    pos = len(_MAGIC)
    mats = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise ArchiveFormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ident = data[pos : pos + id_len].decode("utf-8")
        pos += id_len
        if pos + 8 > len(data):
            raise ArchiveFormatError(f"{path}: truncated shape header")
        t, d = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = t * d * 8
        if pos + nbytes > len(data):
            raise ArchiveFormatError(f"{path}: truncated frame data")
        frames = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(t, d)
        pos += nbytes
        mats.append(FeatureMatrix(frames.copy(), utterance_id=ident))
    return mats
