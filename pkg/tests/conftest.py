"""Shared fixtures: a tiny fast model configuration and a small dataset.

Everything here is sized for speed on one CPU core; the desk-scale
configuration is exercised only by the end-to-end acceptance tests.
"""

import numpy as np
import pytest
import torch

from storyvis.config import (CaptionerConfig, DiscriminatorConfig,
                             GeneratorConfig, MartConfig, ModelConfig,
                             PretrainConfig, RunConfig, SynthConfig,
                             TextConfig, TrainConfig)
from storyvis.data.dataset import StoryDataset
from storyvis.data.shapes import generate_all_splits

torch.set_num_threads(1)

TINY_SYNTH = dict(num_stories=60, story_len=5, image_size=32, max_tokens=10)


def make_tiny_model(**overrides):
    """Small ModelConfig; dropout 0 so eval/train agree bit-exactly."""
    kwargs = dict(
        story_len=5,
        num_chars=9,
        max_tokens=10,
        text=TextConfig(word_dim=16, sent_dim=24, cond_dim=20),
        mart=MartConfig(hidden_size=16, num_layers=2, num_heads=2,
                        num_memory_cells=2, dropout=0.0, max_seq_len=32),
        generator=GeneratorConfig(image_size=32, gist_proj_dim=6, gru_dim=12,
                                  region_grid=4, region_dim=12,
                                  base_channels=16, num_res_blocks=1),
        discriminator=DiscriminatorConfig(base_channels=8),
        captioner=CaptionerConfig(
            feature_dim=16,
            mart=MartConfig(hidden_size=16, num_layers=2, num_heads=2,
                            num_memory_cells=2, dropout=0.0, max_seq_len=32)),
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def make_tiny_run(**train_overrides):
    cfg = RunConfig(preset="desk", seed=11, out_dir="runs/test")
    cfg.data = SynthConfig(**TINY_SYNTH)
    cfg.model = make_tiny_model()
    train = dict(epochs=2, image_batch=10, story_batch=2, seed=5)
    train.update(train_overrides)
    cfg.train = TrainConfig(**train)
    cfg.pretrain = PretrainConfig(
        captioner_epochs=2, captioner_batch=4, captioner_lr=1e-3,
        classifier_epochs=2, classifier_batch=32,
        damsm_epochs=1, damsm_batch=4)
    return cfg


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_all_splits(SynthConfig(**TINY_SYNTH), seed=3)


@pytest.fixture(scope="session")
def tiny_train(tiny_splits):
    return tiny_splits["train"]


@pytest.fixture(scope="session")
def tiny_val(tiny_splits):
    return tiny_splits["val"]


@pytest.fixture(scope="session")
def tiny_vocab(tiny_train):
    return tiny_train.vocab


def subset_dataset(ds, n, split=None):
    """First n stories of ds as a standalone dataset (shared vocab)."""
    return StoryDataset(stories=list(ds.stories[:n]), split=split or ds.split,
                        vocab=ds.vocab, char_names=list(ds.char_names),
                        max_tokens=ds.max_tokens)


def batch_of(ds, n, device=None):
    from storyvis.utils import story_batch
    return story_batch(ds, list(range(min(n, len(ds.stories)))))


def assert_close(actual, expected, tol=1e-6, msg=""):
    actual = float(actual)
    expected = float(expected)
    assert abs(actual - expected) <= tol, \
        f"{msg} expected {expected!r}, got {actual!r} (tol {tol})"


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
