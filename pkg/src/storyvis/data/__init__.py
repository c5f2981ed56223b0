from .dataset import (
    DataIntegrityError,
    Story,
    StoryDataset,
    Vocab,
    dataset_checksum,
    load_pororo_sv,
    save_pororo_sv,
    tokenize_caption,
)
from .discriminative import DiscriminativeSet, DiscriminativeSets, build_discriminative_sets
from .shapes import CHARACTERS, generate_shape_stories, render_caption

__all__ = [
    "CHARACTERS",
    "DataIntegrityError",
    "DiscriminativeSet",
    "DiscriminativeSets",
    "Story",
    "StoryDataset",
    "Vocab",
    "build_discriminative_sets",
    "dataset_checksum",
    "generate_shape_stories",
    "load_pororo_sv",
    "render_caption",
    "save_pororo_sv",
    "tokenize_caption",
]
