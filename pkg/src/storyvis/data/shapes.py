"""Deterministic synthetic shape-story dataset.

Nine named characters, each a fixed (shape, color) pair, act out short
stories on a 3x3 stage. Every frame is rendered from its caption alone by a
fixed rule, so captions are recoverable from pixels by construction and the
renderer doubles as a test oracle. Character usage is long-tailed so
per-character score breakdowns are meaningful.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from ..config import SynthConfig
from .dataset import Story, StoryDataset, Vocab, frames_from_uint8, frames_to_uint8


@dataclass(frozen=True)
class Character:
    name: str
    shape: str
    color: tuple


CHARACTERS = [
    Character("rosy", "circle", (230, 60, 60)),
    Character("bluey", "square", (60, 90, 230)),
    Character("sunny", "triangle", (235, 220, 70)),
    Character("minty", "diamond", (70, 200, 120)),
    Character("plume", "cross", (160, 90, 220)),
    Character("rusty", "pentagon", (235, 140, 50)),
    Character("pearl", "ring", (240, 240, 240)),
    Character("breeze", "star", (80, 210, 225)),
    Character("berry", "hexagon", (220, 80, 180)),
]

CHAR_INDEX = {c.name: i for i, c in enumerate(CHARACTERS)}

PLACES = [
    ("top left", 0, 0), ("top", 0, 1), ("top right", 0, 2),
    ("left", 1, 0), ("middle", 1, 1), ("right", 1, 2),
    ("bottom left", 2, 0), ("bottom", 2, 1), ("bottom right", 2, 2),
]
PLACE_INDEX = {p[0]: (p[1], p[2]) for p in PLACES}

# singular / plural verb forms; the visual encoding is shape-independent
ACTIONS = [("stands", "stand"), ("jumps", "jump"), ("sits", "sit"), ("grows", "grow")]
ACTION_INDEX = {form: i for i, pair in enumerate(ACTIONS) for form in pair}

BACKGROUND = (24, 24, 28)


def _regular_polygon(cx, cy, rx, ry, sides, phase):
    pts = []
    for i in range(sides):
        a = phase + 2 * math.pi * i / sides
        pts.append((cx + rx * math.cos(a), cy + ry * math.sin(a)))
    return pts


def _star_points(cx, cy, rx, ry, phase):
    pts = []
    for i in range(10):
        a = phase + math.pi * i / 5
        f = 1.0 if i % 2 == 0 else 0.45
        pts.append((cx + f * rx * math.cos(a), cy + f * ry * math.sin(a)))
    return pts


def _draw_shape(draw, shape, color, cx, cy, rx, ry, line_width):
    up = -math.pi / 2  # pointy side up
    if shape == "circle":
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=color)
    elif shape == "ring":
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry],
                     outline=color, width=line_width)
    elif shape == "square":
        draw.polygon(_regular_polygon(cx, cy, rx, ry, 4, math.pi / 4), fill=color)
    elif shape == "diamond":
        draw.polygon(_regular_polygon(cx, cy, rx, ry, 4, up), fill=color)
    elif shape == "triangle":
        draw.polygon(_regular_polygon(cx, cy, rx, ry, 3, up), fill=color)
    elif shape == "pentagon":
        draw.polygon(_regular_polygon(cx, cy, rx, ry, 5, up), fill=color)
    elif shape == "hexagon":
        draw.polygon(_regular_polygon(cx, cy, rx, ry, 6, 0.0), fill=color)
    elif shape == "star":
        draw.polygon(_star_points(cx, cy, rx, ry, up), fill=color)
    elif shape == "cross":
        t = 0.38
        pts = [(-t, -1), (t, -1), (t, -t), (1, -t), (1, t), (t, t),
               (t, 1), (-t, 1), (-t, t), (-1, t), (-1, -t), (-t, -t)]
        draw.polygon([(cx + px * rx, cy + py * ry) for px, py in pts], fill=color)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def render_structured(names, action, place, image_size):
    """Render a frame from its structured description; the caption rule."""
    img = Image.new("RGB", (image_size, image_size), BACKGROUND)
    draw = ImageDraw.Draw(img)
    row, col = PLACE_INDEX[place]
    cell = image_size / 3.0
    cx0 = (col + 0.5) * cell
    cy0 = (row + 0.5) * cell
    base_r = image_size / 10.0
    line_width = max(1, image_size // 20)

    action_id = ACTION_INDEX[action]
    for slot, name in enumerate(names):
        char = CHARACTERS[CHAR_INDEX[name]]
        cx, cy = cx0, cy0
        rx = ry = base_r * (0.8 if len(names) == 2 else 1.0)
        if len(names) == 2:
            cx += (-1 if slot == 0 else 1) * image_size / 10.0
        if action_id == 1:      # jumps: raised and slightly smaller
            cy -= image_size / 12.0
            rx *= 0.85
            ry *= 0.85
        elif action_id == 2:    # sits: lowered and squashed
            cy += image_size / 14.0
            ry *= 0.6
        elif action_id == 3:    # grows: enlarged
            rx *= 1.4
            ry *= 1.4
        _draw_shape(draw, char.shape, char.color, cx, cy, rx, ry, line_width)
    return frames_from_uint8(np.asarray(img, dtype=np.uint8))


def parse_caption(caption):
    """Invert the caption template into (names, action, place)."""
    tokens = caption.lower().split()
    try:
        at = tokens.index("at")
    except ValueError:
        raise ValueError(f"caption {caption!r} does not match the template") from None
    action = tokens[at - 1]
    place = " ".join(tokens[at + 2:])
    names = [t for t in tokens[:at - 1] if t != "and"]
    if action not in ACTION_INDEX or place not in PLACE_INDEX or \
            not names or any(n not in CHAR_INDEX for n in names):
        raise ValueError(f"caption {caption!r} does not match the template")
    return names, action, place


def render_caption(caption, image_size):
    """Render a frame from a caption string alone (the round-trip oracle)."""
    return render_structured(*parse_caption(caption), image_size)


def _emit_caption(names, action_id, place):
    singular, plural = ACTIONS[action_id]
    if len(names) == 1:
        return f"{names[0]} {singular} at the {place}"
    return f"{names[0]} and {names[1]} {plural} at the {place}"


# harmonic weights give a long-tailed character frequency distribution
_CHAR_WEIGHTS = np.array([1.0 / (i + 1) for i in range(len(CHARACTERS))])
_CHAR_WEIGHTS /= _CHAR_WEIGHTS.sum()

_NEIGHBORS = {}
for _p, _r, _c in PLACES:
    _NEIGHBORS[_p] = [q for q, rr, cc in PLACES
                      if abs(rr - _r) + abs(cc - _c) == 1]


def _generate_story(cfg, rng, story_id):
    protagonist = CHARACTERS[rng.choice(len(CHARACTERS), p=_CHAR_WEIGHTS)].name
    place = PLACES[rng.integers(len(PLACES))][0]
    captions, frames, labels = [], [], []
    for _ in range(cfg.story_len):
        names = [protagonist]
        if rng.random() < cfg.second_char_prob:
            others = [c.name for c in CHARACTERS if c.name != protagonist]
            w = np.array([_CHAR_WEIGHTS[CHAR_INDEX[n]] for n in others])
            names.append(others[rng.choice(len(others), p=w / w.sum())])
        action_id = int(rng.integers(len(ACTIONS)))
        caption = _emit_caption(names, action_id, place)
        captions.append(caption)
        frames.append(render_caption(caption, cfg.image_size))
        lab = np.zeros(len(CHARACTERS), dtype=np.float32)
        for n in names:
            lab[CHAR_INDEX[n]] = 1.0
        labels.append(lab)
        # the scene drifts to an adjacent cell between frames
        if rng.random() < 0.5:
            place = _NEIGHBORS[place][rng.integers(len(_NEIGHBORS[place]))]
    return Story(story_id=story_id, frames=np.stack(frames),
                 captions=captions, char_labels=np.stack(labels))


def _generate_corpus(cfg, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    stories = [_generate_story(cfg, rng, f"sh{i:05d}") for i in range(cfg.num_stories)]
    vocab = Vocab.build(c for s in stories for c in s.captions)
    n_train = int(cfg.split_fractions[0] * cfg.num_stories)
    n_val = int(cfg.split_fractions[1] * cfg.num_stories)
    by_split = {"train": stories[:n_train],
                "val": stories[n_train:n_train + n_val],
                "test": stories[n_train + n_val:]}
    return by_split, vocab


def generate_shape_stories(cfg: SynthConfig, seed: int, split: str = "train") -> StoryDataset:
    """Deterministic synthetic dataset; identical (cfg, seed) => identical bytes."""
    by_split, vocab = _generate_corpus(cfg, seed)
    if split not in by_split:
        raise ValueError(f"unknown split {split!r}")
    return StoryDataset(stories=by_split[split], split=split, vocab=vocab,
                        char_names=[c.name for c in CHARACTERS],
                        max_tokens=cfg.max_tokens)


def generate_all_splits(cfg: SynthConfig, seed: int) -> dict:
    """All three splits from one pass (what the CLI writes to disk)."""
    by_split, vocab = _generate_corpus(cfg, seed)
    return {split: StoryDataset(stories=stories, split=split, vocab=vocab,
                                char_names=[c.name for c in CHARACTERS],
                                max_tokens=cfg.max_tokens)
            for split, stories in by_split.items()}
