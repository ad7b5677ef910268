"""Seeded synthetic speech corpus: tone-mixture emotions and phone segments."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import (
    EMOTION_CLASSES,
    Manifest,
    ManifestRow,
    read_manifest,
    write_manifest,
)
from .features import Waveform, write_wav

# Per-class spectral/prosodic prototypes: tone mixture (Hz), mixture
# amplitudes, amplitude-modulation rate (Hz) and depth. Pairwise distinct in
# both spectrum and envelope so classes stay separable after MFCC.
EMOTION_RECIPES = {
    "ang": ((220.0, 880.0, 2600.0), (1.0, 0.6, 0.35), 7.0, 0.8),
    "exc": ((330.0, 1320.0, 3300.0), (1.0, 0.6, 0.35), 5.0, 0.6),
    "neu": ((260.0, 520.0, 1560.0), (1.0, 0.6, 0.35), 1.5, 0.15),
    "sad": ((170.0, 340.0, 1020.0), (1.0, 0.6, 0.35), 0.7, 0.45),
}


def phone_tones(index: int) -> tuple:
    """Phone prototype: a log-spaced base tone and its 1.9x partner."""
    base = 260.0 * 1.3**index
    return base, 1.9 * base


@dataclass(frozen=True)
class SynthSpec:
    """Layout and recipes of the synthetic corpus."""

    num_sessions: int = 5
    num_speakers: int = 10
    utterances_per_class: int = 10  # per class per session
    phone_utterances_per_session: int = 20
    num_phones: int = 8
    noise_level: float = 0.02
    duration_range: tuple = (1.0, 3.0)
    phone_duration_range: tuple = (0.35, 0.6)  # per segment, 3-5 segments
    sample_rate_hz: int = 16000
    seed: int = 0

    def __post_init__(self):
        if self.num_sessions < 1 or self.num_speakers < 1:
            raise ValueError("need at least one session and one speaker")
        if self.num_speakers % self.num_sessions:
            raise ValueError("num_speakers must divide evenly across sessions")
        if self.num_phones < 2:
            raise ValueError("proxy task needs at least 2 phone classes")
        lo, hi = self.duration_range
        if not 1.0 <= lo <= hi <= 3.0:
            raise ValueError("utterance durations must lie within 1-3 s")
        plo, phi = self.phone_duration_range
        if 3.0 * plo < 1.0 - 1e-9 or 5.0 * phi > 3.0 + 1e-9:
            raise ValueError(
                "segment durations must keep 3-5 segment utterances within 1-3 s"
            )
        top = max(t for tones, _, _, _ in EMOTION_RECIPES.values() for t in tones)
        top = max(top, phone_tones(self.num_phones - 1)[1])
        if top >= self.sample_rate_hz / 2.0 - 400.0:
            raise ValueError("prototype tones exceed the analysis band")

    @property
    def speakers_per_session(self) -> int:
        return self.num_speakers // self.num_sessions


def _tone_mix(tones, amps, speaker_mult: float, duration: float, rate: int, rng):
    """Sum of sines with per-utterance frequency jitter and random phases."""
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    sig = np.zeros(n)
    for freq, amp in zip(tones, amps):
        jitter = rng.uniform(0.985, 1.015)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        sig += amp * np.sin(2.0 * np.pi * freq * speaker_mult * jitter * t + phase)
    return t, sig


def _finish(sig: np.ndarray, noise_level: float, rng) -> np.ndarray:
    sig = sig * (0.45 / max(np.abs(sig).max(), 1e-9))
    sig = sig + noise_level * rng.standard_normal(sig.shape[0])
    return np.clip(sig, -0.999, 0.999)


def _emotion_utterance(label: str, speaker_mult: float, s: SynthSpec, rng) -> np.ndarray:
    tones, amps, am_rate, am_depth = EMOTION_RECIPES[label]
    duration = rng.uniform(*s.duration_range)
    t, sig = _tone_mix(tones, amps, speaker_mult, duration, s.sample_rate_hz, rng)
    envelope = 1.0 + am_depth * np.sin(
        2.0 * np.pi * am_rate * t + rng.uniform(0.0, 2.0 * np.pi)
    )
    return _finish(sig * envelope, s.noise_level, rng)


def _phone_utterance(speaker_mult: float, s: SynthSpec, rng):
    """3-5 prototype segments; returns (signal, [(start_s, end_s, phone)])."""
    n_segments = int(rng.integers(3, 6))
    pieces, segments = [], []
    clock = 0.0
    for _ in range(n_segments):
        phone = int(rng.integers(s.num_phones))
        duration = rng.uniform(*s.phone_duration_range)
        base, partner = phone_tones(phone)
        _, sig = _tone_mix(
            (base, partner), (1.0, 0.5), speaker_mult, duration, s.sample_rate_hz, rng
        )
        pieces.append(sig)
        segments.append((clock, clock + duration, phone))
        clock += duration
    return _finish(np.concatenate(pieces), s.noise_level, rng), segments


def generate_corpus(s: SynthSpec, out_dir) -> Manifest:
    """Write the emotion corpus (manifest.csv + wav/) and the phone-proxy
    corpus (pretrain_manifest.csv + segments.csv + wav/); byte-identical
    across runs with the same SynthSpec."""
    out = Path(out_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(s.seed)
    speaker_mults = rng.uniform(0.94, 1.06, size=s.num_speakers)

    emotion_rows = []
    proxy_rows = []
    segment_records = []
    per = s.speakers_per_session
    for sess_idx in range(s.num_sessions):
        session = f"ses{sess_idx + 1}"
        speaker_ids = range(sess_idx * per, (sess_idx + 1) * per)
        speakers = [(f"spk{i + 1:02d}", speaker_mults[i]) for i in speaker_ids]
        for label in EMOTION_CLASSES:
            for i in range(s.utterances_per_class):
                speaker, mult = speakers[i % per]
                utt_id = f"emo_{session}_{label}_{i:03d}"
                sig = _emotion_utterance(label, mult, s, rng)
                rel = f"wav/{utt_id}.wav"
                write_wav(out / rel, Waveform(sig, s.sample_rate_hz))
                emotion_rows.append(ManifestRow(utt_id, rel, session, speaker, label))
        for i in range(s.phone_utterances_per_session):
            speaker, mult = speakers[i % per]
            utt_id = f"pho_{session}_{i:03d}"
            sig, segments = _phone_utterance(mult, s, rng)
            rel = f"wav/{utt_id}.wav"
            write_wav(out / rel, Waveform(sig, s.sample_rate_hz))
            proxy_rows.append(ManifestRow(utt_id, rel, session, speaker, "proxy"))
            for start, end, phone in segments:
                segment_records.append((utt_id, start, end, phone))

    write_manifest(out / "manifest.csv", Manifest(emotion_rows))
    write_manifest(out / "pretrain_manifest.csv", Manifest(proxy_rows))
    with open(out / "segments.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_id", "start_s", "end_s", "phone"])
        for utt_id, start, end, phone in segment_records:
            writer.writerow([utt_id, f"{start:.6f}", f"{end:.6f}", phone])
    # Re-read so the returned rows carry paths resolved against out_dir,
    # matching what any later read_manifest() call would produce.
    return read_manifest(out / "manifest.csv")


def read_segments(path) -> dict:
    """segments.csv -> {utt_id: [(start_s, end_s, phone), ...]} in file order."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["utt_id", "start_s", "end_s", "phone"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: segments header must be {','.join(expected)}")
        for rec in reader:
            table.setdefault(rec["utt_id"], []).append(
                (float(rec["start_s"]), float(rec["end_s"]), int(rec["phone"]))
            )
    return table


def frame_labels_from_segments(
    segments, num_frames: int, frame_shift_s: float, frame_length_s: float
) -> np.ndarray:
    """Label each frame with the phone active at the frame's center time;
    frames past the last boundary keep the final phone."""
    labels = np.empty(num_frames, dtype=int)
    for t in range(num_frames):
        center = t * frame_shift_s + frame_length_s / 2.0
        labels[t] = segments[-1][2]
        for start, end, phone in segments:
            if start <= center < end:
                labels[t] = phone
                break
    return labels
