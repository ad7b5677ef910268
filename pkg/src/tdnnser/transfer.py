"""Pretraining, checkpoint surgery, and fine-tuning with freeze policies."""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .features import MfccConfig
from .tdnn import LayerSpec, Network, NetworkSpec, resolve_tap
from .training import LabeledFrames, TrainConfig, train

DEFAULT_HEAD_HIDDEN_DIM = 256


class CheckpointFormatError(Exception):
    """Raised on a corrupt or wrong-version checkpoint file."""


class FingerprintMismatchError(Exception):
    """Raised when a checkpoint's feature fingerprint does not match the
    feature pipeline it is being used with."""


@dataclass(frozen=True)
class FeatureFingerprint:
    """Identifies the feature pipeline a network was trained on."""

    feature_dim: int
    num_ceps: int
    num_mel_filters: int
    frame_length_ms: float
    frame_shift_ms: float
    pre_emphasis: float
    fft_size: int
    low_freq_hz: float
    high_freq_hz: float | None
    log_floor: float
    ivector_dim: int

    @classmethod
    def from_configs(cls, mfcc: MfccConfig, ivector_dim: int) -> "FeatureFingerprint":
        return cls(
            feature_dim=mfcc.num_ceps + ivector_dim,
            num_ceps=mfcc.num_ceps,
            num_mel_filters=mfcc.num_mel_filters,
            frame_length_ms=mfcc.frame_length_ms,
            frame_shift_ms=mfcc.frame_shift_ms,
            pre_emphasis=mfcc.pre_emphasis,
            fft_size=mfcc.fft_size,
            low_freq_hz=mfcc.low_freq_hz,
            high_freq_hz=mfcc.high_freq_hz,
            log_floor=mfcc.log_floor,
            ivector_dim=ivector_dim,
        )


@dataclass
class Checkpoint:
    """Serialized network plus the feature fingerprint and provenance."""

    network: Network
    fingerprint: FeatureFingerprint
    task: str
    epochs: int
    seed: int


@dataclass(frozen=True)
class FreezePolicy:
    """Full-stack layer indices whose parameters stay fixed during
    fine-tuning. The freshly attached hidden layer and softmax head must
    remain trainable."""

    frozen_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "frozen_layers", frozenset(int(k) for k in self.frozen_layers))

    @classmethod
    def freeze_pretrained(cls, net: Network) -> "FreezePolicy":
        """Freeze everything except the attached hidden layer and head."""
        return cls(frozenset(range(len(net.weights) - 2)))

    @classmethod
    def train_all(cls) -> "FreezePolicy":
        return cls(frozenset())

    def validate(self, net: Network) -> None:
        n = len(net.weights)
        attached = {n - 2, n - 1}
        if self.frozen_layers & attached:
            raise ValueError("freeze policy must leave the attached head trainable")
        if any(k < 0 or k >= n for k in self.frozen_layers):
            raise ValueError("frozen layer index out of range")


def ensure_compatible(ck: Checkpoint, fingerprint: FeatureFingerprint) -> None:
    """Raise unless the checkpoint was trained on this feature pipeline."""
    if ck.fingerprint != fingerprint:
        raise FingerprintMismatchError(
            f"checkpoint features {ck.fingerprint} do not match pipeline {fingerprint}"
        )


def pretrain(
    data,
    spec: NetworkSpec,
    cfg: TrainConfig,
    fingerprint: FeatureFingerprint,
    task: str = "proxy-asr",
    on_epoch=None,
):
    """Train the full stack on frame-level proxy labels; returns
    (Checkpoint, TrainReport). epochs=0 checkpoints the seeded init."""
    data = list(data)
    if not data:
        raise ValueError("empty pretraining corpus")
    for item in data:
        if item.features.dim != fingerprint.feature_dim:
            raise FingerprintMismatchError(
                f"utterance {item.utterance_id!r} has dim {item.features.dim}, "
                f"fingerprint says {fingerprint.feature_dim}"
            )
    if spec.input_dim != fingerprint.feature_dim:
        raise FingerprintMismatchError(
            f"network input dim {spec.input_dim} does not match fingerprint "
            f"{fingerprint.feature_dim}"
        )
    net = Network.initialize(spec, cfg.seed)
    net, report = train(net, data, cfg, on_epoch=on_epoch)
    ck = Checkpoint(net, fingerprint, task=task, epochs=cfg.epochs, seed=cfg.seed)
    return ck, report


def attach_head(
    ck: Checkpoint,
    tap,
    num_classes: int,
    hidden_dim: int = DEFAULT_HEAD_HIDDEN_DIM,
    seed: int = 0,
) -> Network:
    """Keep layers up to and including the tap, drop everything above, and
    attach a freshly initialized hidden layer plus softmax-ready head.

    Retained parameters are copied unchanged, so tapping the new network at
    its last retained layer reproduces the pretrained bottleneck outputs.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    old_spec = ck.network.spec
    stack_idx = resolve_tap(old_spec, tap)  # full-stack index of the tap

    layers = list(old_spec.layers[: min(stack_idx + 1, old_spec.num_tdnn_layers)])
    if stack_idx == old_spec.num_tdnn_layers:  # prefinal tap joins the retained stack
        layers.append(
            LayerSpec(layers[-1].output_dim, old_spec.prefinal_dim, (0,), "rectifier")
        )
    new_spec = NetworkSpec(tuple(layers), prefinal_dim=hidden_dim, head_dim=num_classes)

    fresh = Network.initialize(new_spec, seed)
    n_retained = stack_idx + 1
    weights = [w.copy() for w in ck.network.weights[:n_retained]] + fresh.weights[-2:]
    biases = [b.copy() for b in ck.network.biases[:n_retained]] + fresh.biases[-2:]
    return Network(new_spec, weights, biases)


def finetune(
    net: Network,
    data,
    policy: FreezePolicy,
    cfg: TrainConfig,
    on_epoch=None,
) -> Network:
    """Fine-tune with gradients applied only to non-frozen layers; frozen
    parameters are bit-identical before and after."""
    data = list(data)
    if not data:
        raise ValueError("empty fine-tuning dataset")
    policy.validate(net)
    tuned, _ = train(
        net, data, cfg, frozen_layers=policy.frozen_layers, on_epoch=on_epoch
    )
    return tuned


_MAGIC = b"TDNNCK2"
_VERSION = 1
_ACTIVATION_CODES = {"rectifier": 0, "identity": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def take_f64(self, count: int, shape) -> np.ndarray:
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Write magic "TDNNCK2", version, fingerprint, provenance, topology and
    the parameter blob, all little-endian with explicit lengths."""
    fp = ck.fingerprint
    spec = ck.network.spec
    high = math.nan if fp.high_freq_hz is None else float(fp.high_freq_hz)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(
            struct.pack(
                "<IIIIIdddddd",
                fp.feature_dim,
                fp.num_ceps,
                fp.num_mel_filters,
                fp.fft_size,
                fp.ivector_dim,
                fp.frame_length_ms,
                fp.frame_shift_ms,
                fp.pre_emphasis,
                fp.low_freq_hz,
                high,
                fp.log_floor,
            )
        )
        fh.write(_pack_str(ck.task))
        fh.write(struct.pack("<Iq", ck.epochs, ck.seed))
        fh.write(struct.pack("<I", spec.num_tdnn_layers))
        for layer in spec.layers:
            fh.write(
                struct.pack(
                    "<IIBI",
                    layer.input_dim,
                    layer.output_dim,
                    _ACTIVATION_CODES[layer.activation],
                    len(layer.context_offsets),
                )
            )
            fh.write(struct.pack(f"<{len(layer.context_offsets)}i", *layer.context_offsets))
        fh.write(struct.pack("<II", spec.prefinal_dim, spec.head_dim))
        for w, b in zip(ck.network.weights, ck.network.biases):
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", b.shape[0]))
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = reader.unpack("<I")
    if version != _VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (
        feature_dim,
        num_ceps,
        num_mel,
        fft_size,
        ivector_dim,
        frame_length_ms,
        frame_shift_ms,
        pre_emphasis,
        low_freq,
        high_freq,
        log_floor,
    ) = reader.unpack("<IIIIIdddddd")
    fingerprint = FeatureFingerprint(
        feature_dim=feature_dim,
        num_ceps=num_ceps,
        num_mel_filters=num_mel,
        frame_length_ms=frame_length_ms,
        frame_shift_ms=frame_shift_ms,
        pre_emphasis=pre_emphasis,
        fft_size=fft_size,
        low_freq_hz=low_freq,
        high_freq_hz=None if math.isnan(high_freq) else high_freq,
        log_floor=log_floor,
        ivector_dim=ivector_dim,
    )
    task = reader.take_str()
    epochs, seed = reader.unpack("<Iq")
    (n_layers,) = reader.unpack("<I")
    layers = []
    for _ in range(n_layers):
        in_dim, out_dim, act_code, n_off = reader.unpack("<IIBI")
        offsets = reader.unpack(f"<{n_off}i")
        layers.append(LayerSpec(in_dim, out_dim, offsets, _ACTIVATION_NAMES[act_code]))
    prefinal_dim, head_dim = reader.unpack("<II")
    spec = NetworkSpec(tuple(layers), prefinal_dim=prefinal_dim, head_dim=head_dim)
    weights, biases = [], []
    for _ in range(len(spec.full_stack())):
        rows, cols = reader.unpack("<II")
        weights.append(reader.take_f64(rows * cols, (rows, cols)))
        (blen,) = reader.unpack("<I")
        biases.append(reader.take_f64(blen, (blen,)))
    network = Network(spec, weights, biases)
    return Checkpoint(network, fingerprint, task=task, epochs=epochs, seed=int(seed))
