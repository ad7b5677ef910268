"""Sub-sampled time-delay network: spliced affine layers, forward/backward."""

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMatrix

ACTIVATIONS = ("rectifier", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """One spliced affine layer.

    The affine input is the concatenation, over context_offsets, of the
    previous layer's outputs, so the weight matrix is
    (output_dim, input_dim * len(context_offsets)).
    """

    input_dim: int
    output_dim: int
    context_offsets: tuple = (0,)
    activation: str = "rectifier"

    def __post_init__(self):
        offsets = tuple(int(o) for o in self.context_offsets)
        object.__setattr__(self, "context_offsets", offsets)
        if not offsets or 0 not in offsets:
            raise ValueError("context_offsets must be non-empty and contain 0")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("context_offsets must be strictly increasing")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer dims must be positive")

    @property
    def fan_in(self) -> int:
        return self.input_dim * len(self.context_offsets)


@dataclass(frozen=True)
class NetworkSpec:
    """TDNN topology: spliced hidden layers, a fully connected prefinal
    rectifier layer, and a linear head emitting per-frame logits."""

    layers: tuple
    prefinal_dim: int
    head_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("need at least one TDNN layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.input_dim != prev.output_dim:
                raise ValueError("layer input_dim must chain to previous output_dim")
        if self.prefinal_dim < 1 or self.head_dim < 1:
            raise ValueError("prefinal_dim and head_dim must be positive")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def num_tdnn_layers(self) -> int:
        return len(self.layers)

    def full_stack(self) -> list:
        """TDNN layers followed by prefinal (rectifier) and head (identity)."""
        last = self.layers[-1].output_dim
        return list(self.layers) + [
            LayerSpec(last, self.prefinal_dim, (0,), "rectifier"),
            LayerSpec(self.prefinal_dim, self.head_dim, (0,), "identity"),
        ]


def default_spec(
    input_dim: int = 140, head_dim: int = 4, width_factor: float = 1.0
) -> NetworkSpec:
    """13 spliced layers plus a fully connected prefinal layer.

    Offsets: {0} for layers 1 and 5, {-1,0,1} for layers 2-4, {-3,0,3} for
    layers 6-13. Hidden widths are 1024 scaled by width_factor.
    """
    width = max(1, round(1024 * width_factor))
    layers = []
    for k in range(1, 14):
        if k in (1, 5):
            offsets = (0,)
        elif 2 <= k <= 4:
            offsets = (-1, 0, 1)
        else:
            offsets = (-3, 0, 3)
        layers.append(
            LayerSpec(input_dim if k == 1 else width, width, offsets, "rectifier")
        )
    return NetworkSpec(tuple(layers), prefinal_dim=width, head_dim=head_dim)


def receptive_field(spec: NetworkSpec) -> tuple:
    """(left, right) context in frames seen by one output frame."""
    left = sum(-min(layer.context_offsets) for layer in spec.layers)
    right = sum(max(layer.context_offsets) for layer in spec.layers)
    return left, right


@dataclass
class Network:
    """A NetworkSpec with its parameters, ordered as spec.full_stack()."""

    spec: NetworkSpec
    weights: list
    biases: list

    def __post_init__(self):
        stack = self.spec.full_stack()
        if len(self.weights) != len(stack) or len(self.biases) != len(stack):
            raise ValueError("parameter count does not match the layer stack")
        for layer, w, b in zip(stack, self.weights, self.biases):
            if w.shape != (layer.output_dim, layer.fan_in) or b.shape != (
                layer.output_dim,
            ):
                raise ValueError("parameter shapes do not match the spec")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int) -> "Network":
        """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for layer in spec.full_stack():
            bound = np.sqrt(6.0 / (layer.fan_in + layer.output_dim))
            weights.append(
                rng.uniform(-bound, bound, size=(layer.output_dim, layer.fan_in))
            )
            biases.append(np.zeros(layer.output_dim))
        return cls(spec, weights, biases)

    def copy(self) -> "Network":
        return Network(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    @property
    def num_parameters(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))


@dataclass
class ActivationTrace:
    """Layer outputs restricted to the computed frames.

    frame_indices[k] maps row i of outputs[k] to its utterance frame index;
    evaluations counts layer-frame evaluations across the whole stack.
    """

    outputs: list
    frame_indices: list
    input_frames: np.ndarray
    mode: str
    evaluations: int

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class Gradients:
    """Per-layer parameter gradients, ordered as spec.full_stack()."""

    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, net: Network) -> "Gradients":
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )

    def add_(self, other: "Gradients") -> None:
        for w, ow in zip(self.weights, other.weights):
            w += ow
        for b, ob in zip(self.biases, other.biases):
            b += ob

    def scale_(self, factor: float) -> None:
        for w in self.weights:
            w *= factor
        for b in self.biases:
            b *= factor


def _splice(prev: np.ndarray, prev_pos: np.ndarray, need: np.ndarray, offsets) -> np.ndarray:
    """Gather prev rows at clamped need+offset frames, concatenated per frame."""
    t_total = prev_pos.shape[0]
    src = np.clip(need[:, None] + np.asarray(offsets)[None, :], 0, t_total - 1)
    rows = prev_pos[src]
    return prev[rows].reshape(need.shape[0], -1)


def _need_sets(stack, t: int, output_frames) -> list:
    """Propagate requested output frames down the stack through each layer's
    offsets; returns the sorted frame set each layer must compute."""
    need = [None] * len(stack)
    need[-1] = output_frames
    for k in range(len(stack) - 1, 0, -1):
        offsets = np.asarray(stack[k].context_offsets)
        src = np.clip(need[k][:, None] + offsets[None, :], 0, t - 1)
        need[k - 1] = np.unique(src)
    return need


def forward(
    net: Network, x: FeatureMatrix, mode: str = "dense", output_frames=None
) -> ActivationTrace:
    """Run the network over an utterance.

    Dense mode computes every layer at every frame. Sub-sampled mode computes,
    per layer, only the frames needed by the requested output frames
    (need-set propagation through each layer's splice offsets). Out-of-range
    context indices replicate the first/last frame.
    """
    if mode not in ("dense", "subsampled"):
        raise ValueError("mode must be 'dense' or 'subsampled'")
    stack = net.spec.full_stack()
    if x.dim != net.spec.input_dim:
        raise ValueError(f"input dim {x.dim} does not match network {net.spec.input_dim}")
    if not np.all(np.isfinite(x.frames)):
        raise ValueError("non-finite input features")
    t = x.num_frames
    all_frames = np.arange(t)
    if output_frames is None:
        requested = all_frames
    else:
        requested = np.unique(np.asarray(output_frames, dtype=int))
        if requested.size == 0 or requested[0] < 0 or requested[-1] >= t:
            raise ValueError("output_frames out of range")

    if mode == "dense":
        need = [all_frames] * len(stack)
    else:
        need = _need_sets(stack, t, requested)

    outputs, frame_indices = [], []
    prev = x.frames
    prev_pos = all_frames  # row lookup: utterance frame -> row in prev
    evaluations = 0
    for k, layer in enumerate(stack):
        need_k = need[k]
        spliced = _splice(prev, prev_pos, need_k, layer.context_offsets)
        z = spliced @ net.weights[k].T + net.biases[k]
        out = np.maximum(z, 0.0) if layer.activation == "rectifier" else z
        outputs.append(out)
        frame_indices.append(need_k)
        evaluations += need_k.shape[0]
        pos = np.full(t, -1, dtype=int)
        pos[need_k] = np.arange(need_k.shape[0])
        prev, prev_pos = out, pos
    return ActivationTrace(outputs, frame_indices, x.frames, mode, evaluations)


def _scatter_offset(dst: np.ndarray, src: np.ndarray, offset: int) -> None:
    """dst[clamp(t + offset)] += src[t], vectorized over t."""
    t = dst.shape[0]
    if offset == 0:
        dst += src
    elif offset > 0:
        if offset < t:
            dst[offset:] += src[: t - offset]
            dst[-1] += src[t - offset :].sum(axis=0)
        else:
            dst[-1] += src.sum(axis=0)
    else:
        back = -offset
        if back < t:
            dst[: t - back] += src[back:]
            dst[0] += src[:back].sum(axis=0)
        else:
            dst[0] += src.sum(axis=0)


def backward(net: Network, trace: ActivationTrace, output_grad: np.ndarray) -> Gradients:
    """Exact parameter gradients given per-frame logit gradients.

    Requires a dense trace over the same input; gradients accumulate across
    frames and splice offsets, including the clamped edge frames.
    """
    if trace.mode != "dense":
        raise ValueError("backward requires a dense-mode trace")
    stack = net.spec.full_stack()
    if len(trace.outputs) != len(stack):
        raise ValueError("trace does not match the network")
    t = trace.input_frames.shape[0]
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != (t, stack[-1].output_dim):
        raise ValueError("output_grad shape mismatch")

    all_frames = np.arange(t)
    grads_w, grads_b = [], []
    delta = output_grad  # gradient at the current layer's output, (T, out)
    for k in range(len(stack) - 1, -1, -1):
        layer = stack[k]
        prev = trace.input_frames if k == 0 else trace.outputs[k - 1]
        spliced = _splice(prev, all_frames, all_frames, layer.context_offsets)
        grads_w.append(delta.T @ spliced)
        grads_b.append(delta.sum(axis=0))
        if k == 0:
            break
        back = delta @ net.weights[k]  # (T, len(offsets)*prev_dim)
        prev_dim = stack[k - 1].output_dim
        prev_grad = np.zeros((t, prev_dim))
        for j, offset in enumerate(layer.context_offsets):
            _scatter_offset(
                prev_grad, back[:, j * prev_dim : (j + 1) * prev_dim], offset
            )
        if stack[k - 1].activation == "rectifier":
            prev_grad *= trace.outputs[k - 1] > 0.0
        delta = prev_grad
    grads_w.reverse()
    grads_b.reverse()
    return Gradients(grads_w, grads_b)


def kink_margin(net: Network, x: FeatureMatrix) -> float:
    """Smallest rectifier pre-activation magnitude, normalized by the
    layer's input magnitude.

    Perturbing one parameter by a step h shifts a unit's pre-activation by
    at most h * (1 + max |input|), so central finite differences are only
    trustworthy when this margin exceeds a couple of steps; gradient-check
    harnesses redraw probe inputs below that."""
    stack = net.spec.full_stack()
    t = x.num_frames
    all_frames = np.arange(t)
    prev = x.frames
    margin = np.inf
    for k, layer in enumerate(stack):
        spliced = _splice(prev, all_frames, all_frames, layer.context_offsets)
        z = spliced @ net.weights[k].T + net.biases[k]
        if layer.activation == "rectifier":
            # exact zeros sit on the kink itself
            scale = 1.0 + float(np.abs(spliced).max())
            margin = min(margin, float(np.abs(z).min()) / scale)
            prev = np.maximum(z, 0.0)
        else:
            prev = z
    return margin


def resolve_tap(spec: NetworkSpec, tap) -> int:
    """Map a tap name (1-based layer index, 'tdnnN', or 'prefinal') to a
    full-stack index."""
    n = spec.num_tdnn_layers
    if isinstance(tap, str):
        name = tap.strip().lower()
        if name == "prefinal":
            return n
        if name.startswith("tdnn"):
            tap = int(name[4:])
        else:
            raise ValueError(f"unknown tap {tap!r}")
    idx = int(tap)
    if not 1 <= idx <= n:
        raise ValueError(f"tap index {idx} outside 1..{n}")
    return idx - 1


def forward_bottleneck(net: Network, x: FeatureMatrix, tap) -> FeatureMatrix:
    """Post-activation outputs of the tapped layer at every frame; layers
    above the tap are not computed."""
    stop = resolve_tap(net.spec, tap)
    stack = net.spec.full_stack()
    if x.dim != net.spec.input_dim:
        raise ValueError(f"input dim {x.dim} does not match network {net.spec.input_dim}")
    t = x.num_frames
    all_frames = np.arange(t)
    prev = x.frames
    for k in range(stop + 1):
        layer = stack[k]
        spliced = _splice(prev, all_frames, all_frames, layer.context_offsets)
        z = spliced @ net.weights[k].T + net.biases[k]
        prev = np.maximum(z, 0.0) if layer.activation == "rectifier" else z
    return FeatureMatrix(prev, utterance_id=x.utterance_id)
