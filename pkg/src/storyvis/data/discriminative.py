"""Candidate sets for the discriminative evaluation metric.

For each story, the ground-truth final frame is grouped with negatives taken
from other stories whose final-frame character-label vector is identical.
Stories without enough eligible negatives are skipped and counted.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class DiscriminativeSet:
    story_id: str
    candidates: np.ndarray   # (num_negatives + 1, H, W, 3), shuffled
    answer_index: int        # position of the ground-truth frame
    candidate_ids: list      # story ids the candidates came from, same order

    @property
    def target_frame(self):
        return self.candidates[self.answer_index]


@dataclass
class DiscriminativeSets:
    sets: list
    num_skipped: int

    def __len__(self):
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)


def build_discriminative_sets(ds, num_negatives=4, seed=0) -> DiscriminativeSets:
    """One candidate set per story with >= num_negatives label-matched frames.

    Eligibility: identical final-frame label vector, different story_id.
    Sampling is seeded; skipped stories are counted in the returned report.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    keys = [s.char_labels[-1].astype(np.uint8).tobytes() for s in ds.stories]
    by_label = {}
    for i, key in enumerate(keys):
        by_label.setdefault(key, []).append(i)

    sets, skipped = [], 0
    for i, story in enumerate(ds.stories):
        pool = [j for j in by_label[keys[i]] if j != i]
        if len(pool) < num_negatives:
            skipped += 1
            continue
        chosen = rng.choice(len(pool), size=num_negatives, replace=False)
        neg_idx = [pool[int(c)] for c in chosen]
        frames = [story.frames[-1]] + [ds.stories[j].frames[-1] for j in neg_idx]
        ids = [story.story_id] + [ds.stories[j].story_id for j in neg_idx]
        order = rng.permutation(num_negatives + 1)
        candidates = np.stack([frames[int(k)] for k in order])
        candidate_ids = [ids[int(k)] for k in order]
        answer = int(np.where(order == 0)[0][0])
        sets.append(DiscriminativeSet(story_id=story.story_id,
                                      candidates=candidates,
                                      answer_index=answer,
                                      candidate_ids=candidate_ids))
    return DiscriminativeSets(sets=sets, num_skipped=skipped)
