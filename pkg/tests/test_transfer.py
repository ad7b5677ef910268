"""Transfer pipeline tests: pretraining, head surgery, freezing, checkpoints."""

import numpy as np
import pytest

from tdnnser.features import FeatureMatrix, MfccConfig
from tdnnser.tdnn import Network, forward, forward_bottleneck, default_spec
from tdnnser.training import LabeledFrames, TrainConfig, softmax
from tdnnser.transfer import (
    Checkpoint,
    CheckpointFormatError,
    FeatureFingerprint,
    FingerprintMismatchError,
    FreezePolicy,
    attach_head,
    ensure_compatible,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

MFCC = MfccConfig(num_ceps=10, num_mel_filters=12)
IVEC_DIM = 2
FP = FeatureFingerprint.from_configs(MFCC, IVEC_DIM)
FEAT_DIM = MFCC.num_ceps + IVEC_DIM


def proxy_data(n_utts=6, frames=8, head_dim=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_utts):
        x = FeatureMatrix(rng.standard_normal((frames, FEAT_DIM)), utterance_id=f"u{k}")
        out.append(LabeledFrames(x, rng.integers(0, head_dim, size=frames)))
    return out


def small_pretrained(epochs=2, head_dim=8, seed=0):
    spec = default_spec(input_dim=FEAT_DIM, head_dim=head_dim, width_factor=1 / 128)
    cfg = TrainConfig(learning_rate=0.01, epochs=epochs, batch_frames=64, seed=seed)
    ck, report = pretrain(proxy_data(head_dim=head_dim), spec, cfg, FP)
    return ck, report


class TestFingerprint:
    def test_from_configs(self):
        assert FP.feature_dim == 12
        assert FP.num_ceps == 10
        assert FP.num_mel_filters == 12
        assert FP.high_freq_hz is None
        assert FP.ivector_dim == IVEC_DIM

    def test_ensure_compatible(self):
        ck, _ = small_pretrained(epochs=0)
        ensure_compatible(ck, FP)
        other = FeatureFingerprint.from_configs(
            MfccConfig(num_ceps=8, num_mel_filters=12), 4
        )
        with pytest.raises(FingerprintMismatchError):
            ensure_compatible(ck, other)


class TestPretrain:
    def test_zero_epochs_checkpoints_the_init(self):
        spec = default_spec(input_dim=FEAT_DIM, head_dim=8, width_factor=1 / 128)
        cfg = TrainConfig(learning_rate=0.01, epochs=0, batch_frames=64, seed=5)
        ck, report = pretrain(proxy_data(), spec, cfg, FP)
        init = Network.initialize(spec, 5)
        for w, ref in zip(ck.network.weights, init.weights):
            assert np.array_equal(w, ref)
        assert report.losses == []
        assert ck.task == "proxy-asr"
        assert ck.epochs == 0 and ck.seed == 5

    def test_deterministic(self):
        a, _ = small_pretrained(seed=3)
        b, _ = small_pretrained(seed=3)
        for wa, wb in zip(a.network.weights, b.network.weights):
            assert np.array_equal(wa, wb)

    def test_training_actually_moves_parameters(self):
        ck, report = small_pretrained(epochs=2)
        init = Network.initialize(ck.network.spec, ck.seed)
        assert any(
            not np.array_equal(w, ref)
            for w, ref in zip(ck.network.weights, init.weights)
        )
        assert len(report.losses) == 2

    def test_rejects_mismatched_feature_dim(self):
        spec = default_spec(input_dim=FEAT_DIM, head_dim=8, width_factor=1 / 128)
        cfg = TrainConfig(epochs=1)
        rng = np.random.default_rng(0)
        bad = [
            LabeledFrames(
                FeatureMatrix(rng.standard_normal((5, FEAT_DIM + 1))),
                np.zeros(5, dtype=int),
            )
        ]
        with pytest.raises(FingerprintMismatchError):
            pretrain(bad, spec, cfg, FP)

    def test_rejects_mismatched_network_input(self):
        spec = default_spec(input_dim=FEAT_DIM + 3, head_dim=8, width_factor=1 / 128)
        with pytest.raises(FingerprintMismatchError):
            pretrain(proxy_data(), spec, TrainConfig(epochs=1), FP)

    def test_rejects_empty_corpus(self):
        spec = default_spec(input_dim=FEAT_DIM, head_dim=8, width_factor=1 / 128)
        with pytest.raises(ValueError):
            pretrain([], spec, TrainConfig(epochs=1), FP)


class TestAttachHead:
    def test_mid_stack_tap_keeps_twelve_layers(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        assert net.spec.num_tdnn_layers == 12
        assert net.spec.prefinal_dim == 32
        assert net.spec.head_dim == 4
        for k in range(12):
            assert np.array_equal(net.weights[k], ck.network.weights[k])
            assert np.array_equal(net.biases[k], ck.network.biases[k])

    def test_last_layer_tap(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn13", num_classes=4, hidden_dim=32, seed=1)
        assert net.spec.num_tdnn_layers == 13
        for k in range(13):
            assert np.array_equal(net.weights[k], ck.network.weights[k])

    def test_prefinal_tap_absorbs_old_prefinal(self):
        # The old fully connected prefinal layer becomes a 14th regular layer.
        ck, _ = small_pretrained()
        net = attach_head(ck, "prefinal", num_classes=4, hidden_dim=32, seed=1)
        assert net.spec.num_tdnn_layers == 14
        assert net.spec.layers[13].context_offsets == (0,)
        x = FeatureMatrix(np.random.default_rng(2).standard_normal((9, FEAT_DIM)))
        old = forward_bottleneck(ck.network, x, "prefinal")
        new = forward_bottleneck(net, x, "tdnn14")
        assert np.max(np.abs(new.frames - old.frames)) <= 1e-12

    @pytest.mark.parametrize("tap", ["tdnn12", "tdnn13"])
    def test_bottleneck_preserved(self, tap):
        ck, _ = small_pretrained()
        net = attach_head(ck, tap, num_classes=4, hidden_dim=32, seed=9)
        x = FeatureMatrix(np.random.default_rng(3).standard_normal((7, FEAT_DIM)))
        old = forward_bottleneck(ck.network, x, tap)
        new = forward_bottleneck(net, x, tap)
        assert np.max(np.abs(new.frames - old.frames)) <= 1e-12

    def test_new_head_emits_class_logits(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        x = FeatureMatrix(np.random.default_rng(4).standard_normal((6, FEAT_DIM)))
        probs = softmax(forward(net, x).logits)
        assert probs.shape == (6, 4)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_attached_layers_depend_on_seed(self):
        ck, _ = small_pretrained()
        a = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        b = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=2)
        assert not np.array_equal(a.weights[-2], b.weights[-2])
        assert np.array_equal(a.weights[0], b.weights[0])

    def test_rejects_bad_arguments(self):
        ck, _ = small_pretrained()
        with pytest.raises(ValueError):
            attach_head(ck, "tdnn12", num_classes=1)
        with pytest.raises(ValueError):
            attach_head(ck, "tdnn99", num_classes=4)


class TestFreezePolicy:
    def test_freeze_pretrained_leaves_attached_layers(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        policy = FreezePolicy.freeze_pretrained(net)
        n = len(net.weights)
        assert policy.frozen_layers == frozenset(range(n - 2))
        policy.validate(net)

    def test_train_all_is_empty(self):
        assert FreezePolicy.train_all().frozen_layers == frozenset()

    def test_rejects_freezing_the_head(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        n = len(net.weights)
        with pytest.raises(ValueError):
            FreezePolicy({n - 1}).validate(net)
        with pytest.raises(ValueError):
            FreezePolicy({n + 5}).validate(net)


class TestFinetune:
    def finetune_data(self, seed=20):
        rng = np.random.default_rng(seed)
        out = []
        for k in range(5):
            x = FeatureMatrix(rng.standard_normal((6, FEAT_DIM)))
            out.append(LabeledFrames.from_utterance_label(x, k % 4))
        return out

    def test_frozen_stack_only_head_moves(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        cfg = TrainConfig(learning_rate=0.05, epochs=2, batch_frames=64, seed=0)
        tuned = finetune(net, self.finetune_data(), FreezePolicy.freeze_pretrained(net), cfg)
        n = len(net.weights)
        for k in range(n - 2):
            assert np.array_equal(tuned.weights[k], net.weights[k])
            assert np.array_equal(tuned.biases[k], net.biases[k])
        assert not np.array_equal(tuned.weights[n - 2], net.weights[n - 2])
        assert not np.array_equal(tuned.weights[n - 1], net.weights[n - 1])

    def test_zero_learning_rate_changes_nothing(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        cfg = TrainConfig(learning_rate=0.0, epochs=2, batch_frames=64, seed=0)
        tuned = finetune(net, self.finetune_data(), FreezePolicy.train_all(), cfg)
        for wa, wb in zip(tuned.weights, net.weights):
            assert np.array_equal(wa, wb)

    def test_rejects_bad_policy_and_empty_data(self):
        ck, _ = small_pretrained()
        net = attach_head(ck, "tdnn12", num_classes=4, hidden_dim=32, seed=1)
        cfg = TrainConfig(epochs=1)
        with pytest.raises(ValueError):
            finetune(net, self.finetune_data(), FreezePolicy({len(net.weights) - 1}), cfg)
        with pytest.raises(ValueError):
            finetune(net, [], FreezePolicy.train_all(), cfg)


class TestCheckpointIo:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        ck, _ = small_pretrained(epochs=1)
        path = tmp_path / "model.ck"
        save_checkpoint(ck, path)
        loaded = load_checkpoint(path)
        assert loaded.fingerprint == ck.fingerprint
        assert loaded.task == ck.task
        assert loaded.epochs == ck.epochs and loaded.seed == ck.seed
        assert loaded.network.spec == ck.network.spec
        for wa, wb in zip(loaded.network.weights, ck.network.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(loaded.network.biases, ck.network.biases):
            assert np.array_equal(ba, bb)

    def test_save_is_deterministic(self, tmp_path):
        ck, _ = small_pretrained(epochs=1)
        a, b = tmp_path / "a.ck", tmp_path / "b.ck"
        save_checkpoint(ck, a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_explicit_high_freq_survives(self, tmp_path):
        mfcc = MfccConfig(num_ceps=10, num_mel_filters=12, high_freq_hz=7200.0)
        fp = FeatureFingerprint.from_configs(mfcc, IVEC_DIM)
        spec = default_spec(input_dim=FEAT_DIM, head_dim=8, width_factor=1 / 128)
        ck = Checkpoint(Network.initialize(spec, 0), fp, task="t", epochs=0, seed=0)
        path = tmp_path / "model.ck"
        save_checkpoint(ck, path)
        assert load_checkpoint(path).fingerprint.high_freq_hz == 7200.0

    def test_none_high_freq_survives(self, tmp_path):
        ck, _ = small_pretrained(epochs=0)
        assert ck.fingerprint.high_freq_hz is None
        path = tmp_path / "model.ck"
        save_checkpoint(ck, path)
        assert load_checkpoint(path).fingerprint.high_freq_hz is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ck"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        ck, _ = small_pretrained(epochs=0)
        path = tmp_path / "model.ck"
        save_checkpoint(ck, path)
        raw = bytearray(path.read_bytes())
        raw[7:11] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        ck, _ = small_pretrained(epochs=0)
        path = tmp_path / "model.ck"
        save_checkpoint(ck, path)
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)
