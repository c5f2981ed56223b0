"""Discriminative ranking: is the generated final frame closest to the truth?

Each evaluation set holds the ground-truth final frame and 4 negatives with
the same character set. Candidates are ranked by cosine similarity between
classifier features of the generated frame and of each candidate; ties break
toward the lowest candidate index so reports are deterministic.
"""

import numpy as np
import torch


def rank_by_cosine(query, candidates, eps=1e-8):
    """Indices of `candidates` (K,D) sorted by cosine to `query` (D,), best
    first; equal similarities keep ascending index order."""
    q = query / max(float(np.linalg.norm(query)), eps)
    c = candidates / np.maximum(
        np.linalg.norm(candidates, axis=1, keepdims=True), eps)
    sims = c @ q
    return np.argsort(-sims, kind="stable")


@torch.no_grad()
def evaluate_discriminative(feature_fn, disc_sets, generated_finals,
                            batch_size=64):
    """(top1, top2) percentages over the evaluation sets.

    feature_fn: maps (B,3,H,W) in [-1,1] to (B,D) features.
    generated_finals: (num_sets, 3, H, W), aligned with disc_sets order.
    """
    sets = list(disc_sets)
    if len(sets) == 0:
        raise ValueError("no discriminative evaluation sets")
    if generated_finals.shape[0] != len(sets):
        raise ValueError("one generated final frame per set required")

    def feats(images):
        out = [feature_fn(images[i:i + batch_size])
               for i in range(0, images.shape[0], batch_size)]
        return torch.cat(out).cpu().numpy()

    gen_feats = feats(generated_finals)
    top1 = top2 = 0
    for i, ds in enumerate(sets):
        cand = torch.from_numpy(ds.candidates).permute(0, 3, 1, 2).contiguous()
        ranking = rank_by_cosine(gen_feats[i], feats(cand))
        if ranking[0] == ds.answer_index:
            top1 += 1
        if ds.answer_index in ranking[:2]:
            top2 += 1
    return 100.0 * top1 / len(sets), 100.0 * top2 / len(sets)
