"""Frame-level cross-entropy training with momentum SGD."""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .features import FeatureMatrix
from .tdnn import Gradients, Network, backward, forward


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    momentum: float = 0.9
    epochs: int = 10
    batch_frames: int = 512
    lr_decay: float = 0.9
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_frames < 1:
            raise ValueError("batch_frames must be at least 1")


@dataclass
class LabeledFrames:
    """An utterance's feature frames with one integer label per frame."""

    features: FeatureMatrix
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.shape != (self.features.num_frames,):
            raise ValueError("need exactly one label per frame")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative class indices")

    @property
    def utterance_id(self) -> str:
        return self.features.utterance_id

    @classmethod
    def from_utterance_label(cls, features: FeatureMatrix, label: int) -> "LabeledFrames":
        """Replicate the utterance label to every frame."""
        return cls(features, np.full(features.num_frames, int(label)))


@dataclass
class TrainReport:
    """Per-epoch mean loss, frame accuracy, and wall time."""

    losses: list = field(default_factory=list)
    frame_accuracies: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.seconds))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln probs[label], with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], 1e-12)))


def sgd_step(params: list, grads: list, velocity: list, cfg: TrainConfig):
    """In-place momentum update: v <- m*v - lr*g; p <- p + v."""
    for p, g, v in zip(params, grads, velocity):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; aborting epoch")
        v *= cfg.momentum
        v -= cfg.learning_rate * g
        p += v
    return params, velocity


def _frame_loss_and_grad(trace, labels: np.ndarray, scale: float):
    """Summed cross-entropy over frames and d(scale * sum CE)/d logits."""
    probs = softmax(trace.logits)
    t = labels.shape[0]
    picked = np.maximum(probs[np.arange(t), labels], 1e-12)
    loss = float(-np.log(picked).sum())
    grad = probs.copy()
    grad[np.arange(t), labels] -= 1.0
    grad *= scale
    correct = int((probs.argmax(axis=1) == labels).sum())
    return loss, grad, correct


def _batches(data: list, batch_frames: int, order: np.ndarray):
    """Group whole utterances, in the given order, into runs of roughly
    batch_frames frames. Utterances are never split so each one is forwarded
    once per epoch at the current parameters."""
    batch, count = [], 0
    for idx in order:
        batch.append(data[idx])
        count += data[idx].features.num_frames
        if count >= batch_frames:
            yield batch
            batch, count = [], 0
    if batch:
        yield batch


def train(
    net: Network,
    data,
    cfg: TrainConfig,
    frozen_layers=(),
    on_epoch=None,
):
    """Train on mean frame-level cross-entropy; returns (Network, TrainReport).

    frozen_layers lists full-stack layer indices whose parameters stay fixed.
    on_epoch(epoch, loss, acc, net) runs after each epoch; a truthy return
    stops training early. Deterministic under a fixed cfg.seed.
    """
    data = list(data)
    if not data:
        raise ValueError("empty dataset")
    head_dim = net.spec.head_dim
    for item in data:
        if item.labels.max(initial=0) >= head_dim:
            raise ValueError("label outside the network's head range")

    net = net.copy()
    frozen = set(int(k) for k in frozen_layers)
    params = net.weights + net.biases
    n_layers = len(net.weights)
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    total_frames = sum(item.features.num_frames for item in data)
    report = TrainReport()

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = cfg.learning_rate * cfg.lr_decay**epoch
        epoch_cfg = replace(cfg, learning_rate=lr)
        order = rng.permutation(len(data)) if cfg.shuffle else np.arange(len(data))
        loss_sum = 0.0
        correct = 0
        for batch in _batches(data, cfg.batch_frames, order):
            n_batch = sum(item.features.num_frames for item in batch)
            grads = Gradients.zeros_like(net)
            for item in batch:
                trace = forward(net, item.features, mode="dense")
                if not np.all(np.isfinite(trace.logits)):
                    raise DivergenceError(f"non-finite activations at epoch {epoch}")
                loss, logit_grad, hits = _frame_loss_and_grad(
                    trace, item.labels, 1.0 / n_batch
                )
                grads.add_(backward(net, trace, logit_grad))
                loss_sum += loss
                correct += hits
            for k in frozen:
                grads.weights[k][:] = 0.0
                grads.biases[k][:] = 0.0
                velocity[k][:] = 0.0
                velocity[n_layers + k][:] = 0.0
            sgd_step(params, grads.weights + grads.biases, velocity, epoch_cfg)
        mean_loss = loss_sum / total_frames
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        report.losses.append(mean_loss)
        report.frame_accuracies.append(correct / total_frames)
        report.seconds.append(time.perf_counter() - started)
        if on_epoch is not None and on_epoch(
            epoch, mean_loss, report.frame_accuracies[-1], net
        ):
            break
    return net, report


def dataset_loss(net: Network, data) -> float:
    """Mean frame cross-entropy over a dataset at fixed parameters."""
    total, frames = 0.0, 0
    for item in data:
        trace = forward(net, item.features, mode="dense")
        loss, _, _ = _frame_loss_and_grad(trace, item.labels, 1.0)
        total += loss
        frames += item.features.num_frames
    return total / frames


def gradient_check(net: Network, sample: LabeledFrames, step: float) -> float:
    """Max relative error between analytic gradients and central differences.

    Relative error uses |a - n| / max(1e-8, |a| + |n|) per parameter. Meant
    for small networks; the cost is two losses per parameter.
    """
    if step <= 0.0:
        raise ValueError("finite-difference step must be positive")
    if net.num_parameters > 5000:
        raise ValueError("gradient_check is limited to nets with <= 5000 parameters")

    t = sample.features.num_frames
    trace = forward(net, sample.features, mode="dense")
    _, logit_grad, _ = _frame_loss_and_grad(trace, sample.labels, 1.0 / t)
    analytic = backward(net, trace, logit_grad)

    def loss_at() -> float:
        tr = forward(net, sample.features, mode="dense")
        loss, _, _ = _frame_loss_and_grad(tr, sample.labels, 1.0)
        return loss / t

    worst = 0.0
    for arr, grad in zip(
        net.weights + net.biases, analytic.weights + analytic.biases
    ):
        flat, gflat = arr.ravel(), grad.ravel()
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_at()
            flat[i] = original - step
            down = loss_at()
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


def write_train_report(path, report: TrainReport) -> None:
    """CSV with one row per epoch: epoch, loss, frame_acc, seconds."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,frame_acc,seconds\n")
        rows = zip(report.losses, report.frame_accuracies, report.seconds)
        for epoch, (loss, acc, sec) in enumerate(rows):
            fh.write(f"{epoch},{loss:.6f},{acc:.6f},{sec:.3f}\n")
