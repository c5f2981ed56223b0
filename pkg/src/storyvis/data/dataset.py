"""Story dataset container plus the Pororo-SV on-disk layout.

Layout:
    <root>/frames/<story_id>/<k>.png     k = 0..T-1, lossless PNG
    <root>/captions.jsonl                {"story_id":..., "captions":[T strings]}
    <root>/labels.jsonl                  {"story_id":..., "labels":[T x num_chars 0/1]}
    <root>/splits.json                   {"train":[ids], "val":[ids], "test":[ids]}
    <root>/characters.json               optional ordered character-name list

Images are stored as uint8 and mapped to float32 in [-1, 1] in memory
(v / 127.5 - 1), so synthetic frames that were quantized at render time
round-trip exactly.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..config import ConfigError


class DataIntegrityError(ValueError):
    """A story on disk or in memory violates the dataset invariants."""


def tokenize_caption(caption, max_tokens):
    """Lowercase + whitespace tokenization, truncated to max_tokens."""
    return caption.lower().split()[:max_tokens]


@dataclass
class Vocab:
    """Closed token<->id bijection with pad/bos/eos specials at 0/1/2."""

    tokens: list

    PAD = 0
    BOS = 1
    EOS = 2
    SPECIALS = ("<pad>", "<bos>", "<eos>")

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataIntegrityError("duplicate tokens in vocab")
        if tuple(self.tokens[:3]) != self.SPECIALS:
            raise DataIntegrityError("vocab must start with <pad>, <bos>, <eos>")

    @classmethod
    def build(cls, captions):
        seen = set()
        for cap in captions:
            seen.update(cap.lower().split())
        return cls(list(cls.SPECIALS) + sorted(seen))

    def __len__(self):
        return len(self.tokens)

    def encode(self, caption, max_tokens):
        """Returns (ids, mask) arrays of length max_tokens; OOV raises."""
        words = tokenize_caption(caption, max_tokens)
        ids = np.zeros(max_tokens, dtype=np.int64)
        mask = np.zeros(max_tokens, dtype=bool)
        for i, w in enumerate(words):
            if w not in self.index:
                raise LookupError(f"token {w!r} not in vocab (closed vocabulary)")
            ids[i] = self.index[w]
            mask[i] = True
        return ids, mask

    def decode(self, ids):
        """Ids back to a space-joined string, specials stripped."""
        words = [self.tokens[i] for i in ids
                 if i not in (self.PAD, self.BOS, self.EOS)]
        return " ".join(words)

    def content_hash(self):
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


@dataclass
class Story:
    """T aligned (caption, frame, character-label) triples."""

    story_id: str
    frames: np.ndarray      # (T, H, W, 3) float32 in [-1, 1]
    captions: list          # T raw caption strings
    char_labels: np.ndarray  # (T, num_chars) float32 in {0, 1}
    token_ids: np.ndarray = None    # (T, L) int64, filled by StoryDataset
    token_mask: np.ndarray = None   # (T, L) bool

    def validate(self, num_chars):
        T = len(self.captions)
        if not (self.frames.shape[0] == T == self.char_labels.shape[0]):
            raise DataIntegrityError(
                f"story {self.story_id}: frame/caption/label counts disagree "
                f"({self.frames.shape[0]}/{T}/{self.char_labels.shape[0]})")
        if self.char_labels.shape[1] != num_chars:
            raise DataIntegrityError(
                f"story {self.story_id}: expected {num_chars} character labels")
        if self.frames.min() < -1.0 or self.frames.max() > 1.0:
            raise DataIntegrityError(f"story {self.story_id}: pixel values outside [-1, 1]")
        for cap in self.captions:
            if not cap.split():
                raise DataIntegrityError(f"story {self.story_id}: empty caption")


@dataclass
class StoryDataset:
    stories: list
    split: str
    vocab: Vocab
    char_names: list
    max_tokens: int = 24
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.stories = sorted(self.stories, key=lambda s: s.story_id)
        for story in self.stories:
            story.validate(len(self.char_names))
            if story.token_ids is None:
                ids = np.stack([self.vocab.encode(c, self.max_tokens)[0] for c in story.captions])
                mask = np.stack([self.vocab.encode(c, self.max_tokens)[1] for c in story.captions])
                story.token_ids, story.token_mask = ids, mask
            if not story.token_mask.any(axis=1).all():
                raise DataIntegrityError(f"story {story.story_id}: caption with no tokens")
        self._by_id = {s.story_id: s for s in self.stories}

    def __len__(self):
        return len(self.stories)

    def __getitem__(self, i):
        return self.stories[i]

    def by_id(self, story_id):
        return self._by_id[story_id]

    @property
    def story_len(self):
        return len(self.stories[0].captions) if self.stories else 0


def frames_to_uint8(frames):
    return np.round((np.asarray(frames, dtype=np.float32) + 1.0) * 127.5).astype(np.uint8)


def frames_from_uint8(raw):
    return raw.astype(np.float32) / 127.5 - 1.0


def save_pororo_sv(root, datasets):
    """Write splits to disk in the Pororo-SV layout; lossless PNG frames."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    captions, labels, splits = [], [], {}
    char_names = None
    for ds in datasets:
        splits[ds.split] = [s.story_id for s in ds.stories]
        char_names = ds.char_names
        for story in ds.stories:
            sdir = root / "frames" / story.story_id
            sdir.mkdir(exist_ok=True)
            for k, frame in enumerate(frames_to_uint8(story.frames)):
                Image.fromarray(frame).save(sdir / f"{k}.png")
            captions.append({"story_id": story.story_id, "captions": story.captions})
            labels.append({"story_id": story.story_id,
                           "labels": story.char_labels.astype(int).tolist()})
    captions.sort(key=lambda r: r["story_id"])
    labels.sort(key=lambda r: r["story_id"])
    with open(root / "captions.jsonl", "w") as f:
        for rec in captions:
            f.write(json.dumps(rec) + "\n")
    with open(root / "labels.jsonl", "w") as f:
        for rec in labels:
            f.write(json.dumps(rec) + "\n")
    with open(root / "splits.json", "w") as f:
        json.dump({k: sorted(v) for k, v in splits.items()}, f, indent=0, sort_keys=True)
    with open(root / "characters.json", "w") as f:
        json.dump(char_names, f)


def _read_jsonl(path):
    records = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rec = json.loads(line)
                records[rec["story_id"]] = rec
    return records


def load_pororo_sv(root, split, image_size=None, max_tokens=24, vocab=None):
    """Load one split from a Pororo-SV-format directory.

    Images are resized to image_size (when given) and rescaled to [-1, 1].
    The vocab is built over the captions of ALL splits so that splits share
    one id space; pass `vocab` to reuse an existing one.
    """
    root = Path(root)
    splits_path = root / "splits.json"
    if not splits_path.exists():
        raise ConfigError(f"missing split file {splits_path}")
    with open(splits_path) as f:
        splits = json.load(f)
    if split not in splits:
        raise ConfigError(f"split '{split}' not present in {splits_path}")

    captions = _read_jsonl(root / "captions.jsonl")
    labels = _read_jsonl(root / "labels.jsonl")
    if not captions:
        raise DataIntegrityError(f"no caption records found under {root}")

    chars_path = root / "characters.json"
    if chars_path.exists():
        with open(chars_path) as f:
            char_names = json.load(f)
    else:
        num = len(next(iter(labels.values()))["labels"][0])
        char_names = [f"char{i}" for i in range(num)]

    if vocab is None:
        vocab = Vocab.build(c for rec in captions.values() for c in rec["captions"])

    stories = []
    for story_id in splits[split]:
        if story_id not in captions or story_id not in labels:
            raise DataIntegrityError(f"story {story_id}: missing caption or label record")
        caps = captions[story_id]["captions"]
        labs = np.asarray(labels[story_id]["labels"], dtype=np.float32)
        sdir = root / "frames" / story_id
        frame_paths = sorted(sdir.glob("*.png"), key=lambda p: int(p.stem))
        if len(frame_paths) != len(caps):
            raise DataIntegrityError(
                f"story {story_id}: {len(frame_paths)} frames for {len(caps)} captions")
        frames = []
        for p in frame_paths:
            img = Image.open(p).convert("RGB")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            frames.append(np.asarray(img, dtype=np.uint8))
        stories.append(Story(story_id=story_id,
                             frames=frames_from_uint8(np.stack(frames)),
                             captions=list(caps),
                             char_labels=labs))
    return StoryDataset(stories=stories, split=split, vocab=vocab,
                        char_names=char_names, max_tokens=max_tokens)


def dataset_checksum(ds):
    """Content hash over frames, captions, and labels (order-stable)."""
    h = hashlib.sha256()
    for story in ds.stories:
        h.update(story.story_id.encode())
        h.update(frames_to_uint8(story.frames).tobytes())
        h.update("\x1f".join(story.captions).encode())
        h.update(story.char_labels.astype(np.uint8).tobytes())
    return h.hexdigest()
