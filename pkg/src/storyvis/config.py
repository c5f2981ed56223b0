"""Configuration dataclasses and the desk/paper presets.

Every knob used anywhere in the pipeline lives here so that runs are fully
described by a single RunConfig, which can be loaded from / dumped to YAML.
Unknown keys in a config file are rejected with the exact key path.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class MartConfig:
    """Shape of one memory-augmented recurrent transformer stack."""

    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    num_memory_cells: int = 3
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    max_seq_len: int = 64
    ffn_size: Optional[int] = None  # defaults to 2 * hidden_size

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        for name in ("hidden_size", "num_layers", "num_heads", "num_memory_cells"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.ffn_size is None:
            self.ffn_size = 2 * self.hidden_size


@dataclass
class TextConfig:
    word_dim: int = 64           # per-word embedding size (300 at paper scale)
    sent_dim: int = 128          # sentence embedding size
    cond_dim: int = 128          # story conditioning vector size
    pretrained_path: Optional[str] = None  # optional "token v1 .. vD" text file


@dataclass
class GeneratorConfig:
    image_size: int = 32
    gist_dim: Optional[int] = None   # output channels of the gist filter; defaults to cond_dim
    gist_proj_dim: int = 16          # length of the projected sentence signal the filter scans
    gru_dim: int = 64                # GRU hidden size in the context encoder
    noise_dim: Optional[int] = None  # per-frame noise size; defaults to sent_dim
    region_grid: int = 4             # sub-region grid side; N = region_grid**2
    region_dim: int = 48             # channels of the sub-region feature columns
    base_channels: int = 64          # widest conv width in the two synthesis stages
    num_res_blocks: int = 1


@dataclass
class DiscriminatorConfig:
    base_channels: int = 24


@dataclass
class CaptionerConfig:
    feature_dim: int = 128           # region feature size (2048 at paper scale)
    mart: MartConfig = field(default_factory=lambda: MartConfig(hidden_size=64, num_heads=4))
    variant: str = "mart_video"      # alternative dual networks are a config axis only


@dataclass
class ModelConfig:
    story_len: int = 5
    num_chars: int = 9
    max_tokens: int = 24             # caption length L after pad/truncate
    text: TextConfig = field(default_factory=TextConfig)
    mart: MartConfig = field(default_factory=MartConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    recurrent_memory_init: bool = True  # False = plain-transformer baseline (zero memory init)

    def __post_init__(self):
        if self.generator.gist_dim is None:
            self.generator.gist_dim = self.text.cond_dim
        if self.generator.noise_dim is None:
            self.generator.noise_dim = self.text.sent_dim


@dataclass
class SynthConfig:
    """Synthetic shape-story dataset shape."""

    num_stories: int = 2000
    story_len: int = 5
    image_size: int = 32
    max_tokens: int = 24
    second_char_prob: float = 0.35
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.num_stories < 1:
            raise ConfigError("num_stories must be >= 1")
        if self.story_len < 1:
            raise ConfigError("story_len must be >= 1")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")


@dataclass
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    epochs: int = 120
    decay_every: int = 20            # epochs between lr decays
    decay_factor: float = 0.5
    image_batch: int = 20            # frames per image-discriminator update
    story_batch: int = 4             # stories per story-discriminator / generator update
    g_updates: int = 2               # generator updates per discriminator update pair
    lambda_dual: float = 1.0
    lambda_char: float = 1.0
    checkpoint_every: int = 10       # epochs between checkpoints
    seed: int = 0
    max_steps: Optional[int] = None  # hard cap on optimizer steps (smoke runs)

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.image_batch < 1 or self.story_batch < 1:
            raise ConfigError("batch sizes must be >= 1")


@dataclass
class PretrainConfig:
    """Schedules for the frozen metric/dual models."""

    captioner_epochs: int = 8
    captioner_batch: int = 8
    captioner_lr: float = 1e-3
    captioner_patience: int = 2      # epochs of non-improving val loss before stop
    classifier_epochs: int = 6
    classifier_batch: int = 64
    classifier_lr: float = 1e-3
    damsm_epochs: int = 6
    damsm_batch: int = 8
    damsm_lr: float = 2e-3


@dataclass
class EvalConfig:
    num_negatives: int = 4
    rprecision_runs: int = 10
    rprecision_mismatches: int = 99
    classifier_threshold: float = 0.5
    damsm_gamma1: float = 5.0
    damsm_gamma2: float = 5.0
    damsm_gamma3: float = 10.0
    damsm_gamma_story: float = 15.0


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 7
    out_dir: str = "runs/default"
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def desk_config() -> RunConfig:
    """Small configuration that trains end to end on one CPU core."""
    cfg = RunConfig(preset="desk")
    cfg.data = SynthConfig(num_stories=2000, story_len=5, image_size=32, max_tokens=12)
    cfg.model = ModelConfig(
        story_len=5,
        max_tokens=12,
        text=TextConfig(word_dim=64, sent_dim=128, cond_dim=128),
        mart=MartConfig(hidden_size=64, num_layers=2, num_heads=4, num_memory_cells=3),
        generator=GeneratorConfig(image_size=32, region_grid=4, region_dim=48,
                                  base_channels=64, gru_dim=64),
        discriminator=DiscriminatorConfig(base_channels=24),
        captioner=CaptionerConfig(
            feature_dim=128,
            mart=MartConfig(hidden_size=64, num_layers=2, num_heads=4, num_memory_cells=3)),
    )
    cfg.train = TrainConfig(epochs=5, decay_every=20, checkpoint_every=2)
    return cfg


def paper_config() -> RunConfig:
    """Paper-scale hyperparameters (60h-class training; not run in tests)."""
    cfg = RunConfig(preset="paper")
    cfg.data = SynthConfig(num_stories=2000, story_len=5, image_size=64, max_tokens=24)
    cfg.model = ModelConfig(
        story_len=5,
        max_tokens=24,
        text=TextConfig(word_dim=300, sent_dim=128, cond_dim=128),
        mart=MartConfig(hidden_size=192, num_layers=2, num_heads=6, num_memory_cells=3),
        generator=GeneratorConfig(image_size=64, region_grid=8, region_dim=64,
                                  base_channels=128, gru_dim=128),
        discriminator=DiscriminatorConfig(base_channels=64),
        captioner=CaptionerConfig(
            feature_dim=2048,
            mart=MartConfig(hidden_size=192, num_layers=2, num_heads=6, num_memory_cells=3,
                            max_seq_len=96)),
    )
    cfg.train = TrainConfig(epochs=120, decay_every=20, checkpoint_every=10)
    return cfg


PRESETS = {"desk": desk_config, "paper": paper_config}


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at '{path or '<root>'}', got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        keypath = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key '{keypath}'")
        ftype = fields[key].type
        if dataclasses.is_dataclass(_resolve(ftype)) and isinstance(value, dict):
            kwargs[key] = _from_dict(_resolve(ftype), value, keypath)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _resolve(ftype):
    # field types are classes here (no string annotations in this module)
    return ftype


def _merge_into(cfg, data, path=""):
    """Apply a (possibly partial) dict onto an existing config tree."""
    for key, value in data.items():
        keypath = f"{path}.{key}" if path else key
        if not hasattr(cfg, key) or key not in {f.name for f in dataclasses.fields(cfg)}:
            raise ConfigError(f"unknown config key '{keypath}'")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge_into(current, value, keypath)
        else:
            if isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)


def load_run_config(path=None, overrides=None, preset=None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus dotted-key overrides.

    The file's `preset` key picks the base defaults (the `preset` argument,
    when given, wins over the file); remaining keys override them.
    `overrides` is a mapping of dotted paths ("train.epochs") to values and
    wins over the file.
    """
    data = {}
    if path is not None:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
    preset = preset or data.get("preset", "desk")
    data = {k: v for k, v in data.items() if k != "preset"}
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
    cfg = PRESETS[preset]()
    _merge_into(cfg, data)
    for dotted, value in (overrides or {}).items():
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in {f.name for f in dataclasses.fields(node)}:
                raise ConfigError(f"unknown config key '{dotted}'")
            node = getattr(node, part)
        _merge_into(node, {parts[-1]: value}, path=".".join(parts[:-1]))
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg) -> str:
    """Stable hash of a config tree; used to guard checkpoint compatibility."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
