"""JSON run configuration: strict keys, ledger defaults, seed override."""

import copy
import json
import os
from dataclasses import dataclass

from .datagen import SynthSpec
from .features import MfccConfig
from .tdnn import LayerSpec, NetworkSpec
from .training import TrainConfig

SEED_ENV_VAR = "TDNN_TRANSFER_SEED"

DEFAULTS = {
    "seed": 0,
    "mfcc": {
        "frame_length_ms": 25.0,
        "frame_shift_ms": 10.0,
        "num_mel_filters": 40,
        "num_ceps": 40,
        "pre_emphasis": 0.97,
        "fft_size": 512,
        "low_freq_hz": 20.0,
        "high_freq_hz": None,  # null means Nyquist - 400 Hz
        "use_energy_as_c0": False,
        "log_floor": 1e-10,
    },
    "adaptation": {
        "num_components": 64,
        "ivector_dim": 100,
        "ubm_iters": 10,
        "tv_iters": 10,
        "max_frames": 200000,  # UBM training frames are thinned above this
    },
    "network": {
        "width_factor": 1.0,
        "strides": [0, 1, 1, 1, 0, 3, 3, 3, 3, 3, 3, 3, 3],
        "head_hidden_dim": 256,
    },
    "pretrain": {
        "learning_rate": 0.003,
        "momentum": 0.9,
        "epochs": 10,
        "batch_frames": 512,
        "lr_decay": 0.9,
        "shuffle": True,
    },
    "finetune": {
        "learning_rate": 0.003,
        "momentum": 0.9,
        "epochs": 10,
        "batch_frames": 512,
        "lr_decay": 0.9,
        "shuffle": True,
    },
    "tap": "tdnn12",
    "freeze_pretrained": False,
    "datagen": {
        "num_sessions": 5,
        "num_speakers": 10,
        "utterances_per_class": 10,
        "phone_utterances_per_session": 20,
        "num_phones": 8,
        "noise_level": 0.02,
        "duration_range": [1.0, 3.0],
        "phone_duration_range": [0.35, 0.6],
        "sample_rate_hz": 16000,
    },
}


class ConfigError(Exception):
    """Raised on malformed configuration: bad JSON, unknown keys, bad values."""


def _merge(defaults: dict, override: dict, path: str) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            merged[key] = _merge(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


@dataclass(frozen=True)
class AdaptationConfig:
    num_components: int = 64
    ivector_dim: int = 100
    ubm_iters: int = 10
    tv_iters: int = 10
    max_frames: int = 200000

    def __post_init__(self):
        if self.num_components < 1 or self.ivector_dim < 0:
            raise ValueError("need num_components >= 1 and ivector_dim >= 0")


@dataclass(frozen=True)
class NetworkConfig:
    width_factor: float = 1.0
    strides: tuple = (0, 1, 1, 1, 0, 3, 3, 3, 3, 3, 3, 3, 3)
    head_hidden_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.strides or any(s < 0 for s in self.strides):
            raise ValueError("strides must be a non-empty list of counts >= 0")
        if self.width_factor <= 0.0:
            raise ValueError("width_factor must be positive")

    def build_spec(self, input_dim: int, head_dim: int) -> NetworkSpec:
        """Stride s becomes splice offsets {-s, 0, s} ({0} for s = 0)."""
        width = max(1, round(1024 * self.width_factor))
        layers = []
        for k, stride in enumerate(self.strides):
            offsets = (0,) if stride == 0 else (-stride, 0, stride)
            layers.append(
                LayerSpec(input_dim if k == 0 else width, width, offsets, "rectifier")
            )
        return NetworkSpec(tuple(layers), prefinal_dim=width, head_dim=head_dim)


@dataclass
class RunConfig:
    """Materialized configuration tree with the resolved JSON for echoing."""

    seed: int
    mfcc: MfccConfig
    adaptation: AdaptationConfig
    network: NetworkConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    tap: str
    freeze_pretrained: bool
    datagen: SynthSpec
    resolved: dict


def _build(tree: dict) -> RunConfig:
    seed = tree["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    try:
        mfcc = MfccConfig(**tree["mfcc"])
        adaptation = AdaptationConfig(**tree["adaptation"])
        network = NetworkConfig(**tree["network"])
        pretrain = TrainConfig(seed=seed, **tree["pretrain"])
        finetune = TrainConfig(seed=seed, **tree["finetune"])
        dg = tree["datagen"]
        datagen = SynthSpec(
            num_sessions=dg["num_sessions"],
            num_speakers=dg["num_speakers"],
            utterances_per_class=dg["utterances_per_class"],
            phone_utterances_per_session=dg["phone_utterances_per_session"],
            num_phones=dg["num_phones"],
            noise_level=dg["noise_level"],
            duration_range=tuple(dg["duration_range"]),
            phone_duration_range=tuple(dg["phone_duration_range"]),
            sample_rate_hz=dg["sample_rate_hz"],
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    tap = tree["tap"]
    if not isinstance(tap, (str, int)):
        raise ConfigError("tap must be a layer name or index")
    return RunConfig(
        seed=seed,
        mfcc=mfcc,
        adaptation=adaptation,
        network=network,
        pretrain=pretrain,
        finetune=finetune,
        tap=tap,
        freeze_pretrained=bool(tree["freeze_pretrained"]),
        datagen=datagen,
        resolved=tree,
    )


def load_run_config(path=None) -> RunConfig:
    """Load a JSON config merged over the defaults. Every default equals the
    module ledger values; unknown keys are rejected. The TDNN_TRANSFER_SEED
    environment variable, when set, overrides the seed."""
    override = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                override = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: top-level config must be an object")
    tree = _merge(DEFAULTS, override, "")
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            tree["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from exc
    return _build(tree)


def write_config_echo(out_dir, cfg: RunConfig) -> None:
    """Drop the exact resolved config next to the artifacts it produced."""
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
