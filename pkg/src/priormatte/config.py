"""Model and training configuration, shared by the CLI and the tests.

Config files are YAML with two top-level mappings, `model:` and `train:`;
every key mirrors a dataclass field below.  Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .attention import PriorMode


@dataclass
class ModelConfig:
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    window: int = 7
    prior_mode: str = "uk_fg_bg_memory"
    decoder_widths: tuple = (256, 128, 64, 32, 16)
    decoder_blocks: tuple = (10, 4, 2, 1, 1)
    norm_groups: int = 4
    dtype: str = "float32"

    def prior_mode_enum(self) -> PriorMode:
        return PriorMode(self.prior_mode)

    def encoder_config(self):
        from .encoder import EncoderConfig
        return EncoderConfig(
            embed_dim=self.embed_dim, depths=tuple(self.depths),
            heads=tuple(self.heads), window=self.window,
            prior_mode=self.prior_mode_enum())

    def decoder_config(self):
        from .decoder import DecoderConfig
        return DecoderConfig(
            widths=tuple(self.decoder_widths),
            blocks=tuple(self.decoder_blocks),
            norm_groups=self.norm_groups)


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    steps: int = 200
    batch_size: int = 2
    crop: int = 64
    synth_margin: int = 32
    seed: int = 0
    lap_levels: int = 5
    w_l1: float = 1.0
    w_comp: float = 1.0
    w_lap: float = 1.0
    intermediate_weight: float = 0.5
    trimap_lo: float = 0.0
    trimap_hi: float = 1.0
    dilate_min: int = 1
    dilate_max: int = 3
    log_every: int = 10
    checkpoint_every: int = 100

    def loss_weights(self):
        return LossWeights(self.w_l1, self.w_comp, self.w_lap)


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_comp: float = 1.0
    w_lap: float = 1.0

    def __post_init__(self):
        if min(self.w_l1, self.w_comp, self.w_lap) < 0:
            raise ValueError("loss weights must be non-negative")


def toy_model_config(prior_mode="uk_fg_bg_memory") -> ModelConfig:
    """Desk-scale test configuration (64-128 px inputs)."""
    return ModelConfig(
        embed_dim=8, depths=(1, 1, 2, 1), heads=(2, 2, 4, 4), window=4,
        prior_mode=prior_mode, decoder_widths=(32, 16, 16, 8, 8),
        decoder_blocks=(1, 1, 1, 1, 1), norm_groups=2)


def tiny_model_config(prior_mode="uk_fg_bg_memory") -> ModelConfig:
    """Full-size configuration, retained for parameter accounting."""
    return ModelConfig(prior_mode=prior_mode)


def _from_mapping(cls, data, label):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown {label} config keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in data.items()}
    return cls(**kwargs)


def load_config(path):
    """Read a YAML config file; returns (ModelConfig, TrainConfig)."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    model = _from_mapping(ModelConfig, raw.get("model", {}), "model")
    train = _from_mapping(TrainConfig, raw.get("train", {}), "train")
    return model, train


def save_config(model_cfg: ModelConfig, train_cfg: TrainConfig, path):
    data = {
        "model": {k: list(v) if isinstance(v, tuple) else v
                  for k, v in asdict(model_cfg).items()},
        "train": asdict(train_cfg),
    }
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
