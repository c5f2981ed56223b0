"""Story visualization: recurrent text-to-image-sequence GAN with a frozen
captioning critic, plus the full automatic evaluation suite."""

__version__ = "0.1.0"

from .config import (ConfigError, EvalConfig, ModelConfig, PretrainConfig,
                     RunConfig, SynthConfig, TrainConfig, config_hash,
                     desk_config, load_run_config, paper_config)

__all__ = [
    "ConfigError", "EvalConfig", "ModelConfig", "PretrainConfig", "RunConfig",
    "SynthConfig", "TrainConfig", "config_hash", "desk_config",
    "load_run_config", "paper_config", "__version__",
]
