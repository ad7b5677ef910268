"""Shared fixtures: the calibrated synthetic benchmark, built once per session.

The benchmark pipeline (corpus -> MFCC -> adaptation -> proxy pretraining)
feeds the end-to-end acceptance tests; its stage timings are recorded so the
runtime budget can be asserted on top of the cross-validation cost.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from tdnnser.adaptation import (
    accumulate_stats,
    append_adaptation,
    extract_ivector,
    train_total_variability,
    train_ubm,
)
from tdnnser.datagen import (
    SynthSpec,
    frame_labels_from_segments,
    generate_corpus,
    read_segments,
)
from tdnnser.evaluation import Manifest, read_manifest
from tdnnser.features import MfccConfig, compute_mfcc, read_wav, write_feature_archive
from tdnnser.tdnn import default_spec
from tdnnser.training import LabeledFrames, TrainConfig
from tdnnser.transfer import Checkpoint, FeatureFingerprint, pretrain, save_checkpoint

BENCH_SEED = 11
BENCH_WIDTH_FACTOR = 1.0 / 16.0  # hidden width 64
BENCH_COMPONENTS = 16
BENCH_IVECTOR_DIM = 16
BENCH_SYNTH = dict(
    num_sessions=5,
    num_speakers=10,
    utterances_per_class=40,  # 5 * 4 * 40 = 800 emotion utterances
    phone_utterances_per_session=20,
    num_phones=8,
    duration_range=(1.0, 1.5),
    seed=BENCH_SEED,
)
PRETRAIN_CFG = TrainConfig(
    learning_rate=0.003, momentum=0.9, epochs=5, batch_frames=512, lr_decay=0.9, seed=0
)
FINETUNE_CFG = TrainConfig(
    learning_rate=0.003, momentum=0.9, epochs=8, batch_frames=512, lr_decay=0.8, seed=0
)
# Keeps CLI runs dimensionally consistent with the in-process artifacts.
BENCH_RUN_CONFIG = {
    "adaptation": {
        "num_components": BENCH_COMPONENTS,
        "ivector_dim": BENCH_IVECTOR_DIM,
        "ubm_iters": 5,
        "tv_iters": 5,
    },
    "network": {"width_factor": BENCH_WIDTH_FACTOR},
    "pretrain": {"epochs": 5},
    "finetune": {"epochs": 4, "lr_decay": 0.8},
}


@dataclass
class Bench:
    root: Path
    manifest: Manifest
    mfcc: MfccConfig
    features: dict  # adapted emotion features keyed by utt_id
    checkpoint: Checkpoint
    fingerprint: FeatureFingerprint
    timings: dict = field(default_factory=dict)
    manifest_path: Path = None
    features_path: Path = None
    checkpoint_path: Path = None
    config_path: Path = None

    @property
    def pipeline_seconds(self) -> float:
        return float(sum(self.timings.values()))


@pytest.fixture(scope="session")
def bench(tmp_path_factory) -> Bench:
    root = tmp_path_factory.mktemp("bench")
    timings = {}

    t0 = time.perf_counter()
    manifest = generate_corpus(SynthSpec(**BENCH_SYNTH), root)
    timings["datagen"] = time.perf_counter() - t0

    mfcc = MfccConfig()
    t0 = time.perf_counter()
    proxy_manifest = read_manifest(root / "pretrain_manifest.csv")
    emo_raw = {
        r.utt_id: compute_mfcc(read_wav(r.path), mfcc, utterance_id=r.utt_id)
        for r in manifest.rows
    }
    pho_raw = {
        r.utt_id: compute_mfcc(read_wav(r.path), mfcc, utterance_id=r.utt_id)
        for r in proxy_manifest.rows
    }
    timings["mfcc"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pooled = list(emo_raw.values()) + list(pho_raw.values())
    ubm = train_ubm(pooled, c=BENCH_COMPONENTS, iters=5, seed=0)
    stats = [accumulate_stats(ubm, f) for f in pooled]
    tv = train_total_variability(stats, ubm, r=BENCH_IVECTOR_DIM, iters=5, seed=0)

    def adapt(raw):
        return {
            utt_id: append_adaptation(f, extract_ivector(ubm, tv, accumulate_stats(ubm, f)))
            for utt_id, f in raw.items()
        }

    emo_features = adapt(emo_raw)
    pho_features = adapt(pho_raw)
    timings["adaptation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    segments = read_segments(root / "segments.csv")
    shift = mfcc.frame_shift_ms / 1000.0
    length = mfcc.frame_length_ms / 1000.0
    proxy_items = [
        LabeledFrames(f, frame_labels_from_segments(segments[utt_id], f.num_frames, shift, length))
        for utt_id, f in pho_features.items()
    ]
    feature_dim = next(iter(emo_features.values())).dim
    spec = default_spec(
        input_dim=feature_dim,
        head_dim=BENCH_SYNTH["num_phones"],
        width_factor=BENCH_WIDTH_FACTOR,
    )
    fingerprint = FeatureFingerprint.from_configs(mfcc, ivector_dim=BENCH_IVECTOR_DIM)
    checkpoint, _ = pretrain(proxy_items, spec, PRETRAIN_CFG, fingerprint)
    timings["pretrain"] = time.perf_counter() - t0

    artifacts = root / "artifacts"
    artifacts.mkdir()
    features_path = artifacts / "features_adapted.feat"
    write_feature_archive(features_path, [emo_features[r.utt_id] for r in manifest.rows])
    checkpoint_path = artifacts / "checkpoint.ck"
    save_checkpoint(checkpoint, checkpoint_path)
    config_path = artifacts / "run.json"
    config_path.write_text(json.dumps(BENCH_RUN_CONFIG, indent=2))

    return Bench(
        root=root,
        manifest=manifest,
        mfcc=mfcc,
        features=emo_features,
        checkpoint=checkpoint,
        fingerprint=fingerprint,
        timings=timings,
        manifest_path=root / "manifest.csv",
        features_path=features_path,
        checkpoint_path=checkpoint_path,
        config_path=config_path,
    )
