"""Assemble every metric into one serializable report.

The report's field order is stable so downstream diffs are meaningful, and a
per-frame prediction dump is written next to it so any headline number can
be recomputed from raw decisions.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from ..data.discriminative import build_discriminative_sets
from ..utils import story_batch
from .bleu import evaluate_bleu
from .classifier import evaluate_characters, predict_characters
from .discriminative import evaluate_discriminative
from .damsm import evaluate_r_precision


@dataclass
class MetricReport:
    char_f1: float
    char_exact_match: float
    per_character_f1: List[float]
    bleu2: float
    bleu3: float
    disc_top1: float
    disc_top2: float
    r_precision_mean: float
    r_precision_std: float
    metadata: dict = field(default_factory=dict)

    def validate(self):
        rates = [self.char_f1, self.char_exact_match, self.bleu2, self.bleu3,
                 self.disc_top1, self.disc_top2, self.r_precision_mean,
                 *self.per_character_f1]
        for v in rates:
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"metric value {v} outside [0, 100]")
        if self.r_precision_std < 0:
            raise ValueError("negative std")
        return self

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _require(model, name, command):
    if model is None:
        raise ValueError(
            f"missing {name}; run `storyvis pretrain {command}` first")
    return model


@torch.no_grad()
def generate_split(generator, ds, seed=0, batch_size=8):
    """Generate every story in the split; returns (B,T,3,H,W) tensor.

    Each batch gets its own seed derived from its start offset, so a batch's
    draws never depend on how many batches ran before it.
    """
    chunks = []
    for start in range(0, len(ds.stories), batch_size):
        idxs = list(range(start, min(start + batch_size, len(ds.stories))))
        batch = story_batch(ds, idxs)
        frames = generator.generate_story(
            batch["token_ids"], batch["token_mask"], seed=seed + start)
        chunks.append(torch.stack([f.image for f in frames], dim=1))
    return torch.cat(chunks)


def full_report(generator, ds, captioner, classifier, matcher, eval_cfg,
                seed=0, out_dir=None, metadata=None) -> MetricReport:
    """Run generation plus all metrics on a split."""
    _require(captioner, "captioner snapshot", "captioner")
    _require(classifier, "classifier snapshot", "classifier")
    _require(matcher, "matching-model snapshot", "damsm")
    generated = generate_split(generator, ds, seed=seed)
    b, t = generated.shape[:2]

    flat = generated.flatten(0, 1)
    labels = np.concatenate([s.char_labels for s in ds.stories])
    char_f1, em, per_char = evaluate_characters(
        classifier, flat, labels, threshold=eval_cfg.classifier_threshold)

    gt_captions = [s.captions for s in ds.stories]
    bleu2, bleu3 = evaluate_bleu(captioner, generated, gt_captions, ds.vocab)

    disc_sets = build_discriminative_sets(
        ds, num_negatives=eval_cfg.num_negatives, seed=seed)
    id_to_row = {s.story_id: i for i, s in enumerate(ds.stories)}
    if len(disc_sets) > 0:
        finals = torch.stack(
            [generated[id_to_row[d.story_id], -1] for d in disc_sets])
        top1, top2 = evaluate_discriminative(classifier.features, disc_sets, finals)
    else:
        top1 = top2 = 0.0

    token_ids = torch.from_numpy(np.stack([s.token_ids for s in ds.stories]))
    token_mask = torch.from_numpy(np.stack([s.token_mask for s in ds.stories]))
    with torch.no_grad():
        text_embs, _, _ = matcher.encode_story_text(token_ids, token_mask)
        visual_embs = matcher.encode_story_visual(generated)
    rp_mean, rp_std = evaluate_r_precision(
        visual_embs.numpy(), text_embs.numpy(),
        runs=eval_cfg.rprecision_runs,
        mismatches=eval_cfg.rprecision_mismatches, seed=seed)

    report = MetricReport(
        char_f1=char_f1, char_exact_match=em, per_character_f1=per_char,
        bleu2=bleu2, bleu3=bleu3, disc_top1=top1, disc_top2=top2,
        r_precision_mean=rp_mean, r_precision_std=rp_std,
        metadata={"split": ds.split, "seed": seed,
                  "num_stories": len(ds.stories),
                  "disc_sets": len(disc_sets),
                  "disc_sets_skipped": disc_sets.num_skipped,
                  **(metadata or {})}).validate()

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            f.write(report.to_json() + "\n")
        _dump_frame_predictions(
            os.path.join(out_dir, "frame_predictions.jsonl"),
            classifier, ds, flat, labels, eval_cfg.classifier_threshold)
    return report


def _dump_frame_predictions(path, classifier, ds, flat_images, labels,
                            threshold):
    preds = predict_characters(classifier, flat_images, threshold)
    t = ds.story_len
    with open(path, "w") as f:
        for i, pred in enumerate(preds):
            story = ds.stories[i // t]
            f.write(json.dumps({
                "story_id": story.story_id,
                "frame": i % t,
                "pred": [int(x) for x in pred],
                "label": [int(x) for x in labels[i]],
            }) + "\n")
    return path
