"""Corpus BLEU with add-epsilon smoothing for zero n-gram matches.

Single reference per hypothesis (the dataset has one caption per frame).
Smoothing replaces a zero clipped-match count with a small epsilon so a
fully disjoint corpus scores near zero instead of exactly zero, and an
identical corpus scores exactly 100.
"""

import math
from collections import Counter

SMOOTH_EPS = 1e-9


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n):
    """BLEU-max_n over a corpus of token lists, as a percentage.

    Uniform 1/max_n weights, standard brevity penalty, clipped modified
    n-gram precision pooled over the corpus.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference count mismatch")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h_counts = ngram_counts(hyp, n)
            r_counts = ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_p = 0.0
    for n in range(max_n):
        num = matches[n] if matches[n] > 0 else SMOOTH_EPS
        den = totals[n] if totals[n] > 0 else SMOOTH_EPS
        log_p += math.log(num / den) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    if hyp_len == 0:
        return 0.0
    return 100.0 * bp * math.exp(log_p)


def evaluate_bleu(captioner, frames, gt_captions, vocab, batch_size=8):
    """Greedy-caption generated stories and score against ground truth.

    frames: (B, T, 3, H, W); gt_captions: per story, list of T raw strings.
    Returns (bleu2, bleu3).
    """
    hyps, refs = [], []
    for start in range(0, frames.shape[0], batch_size):
        chunk = frames[start:start + batch_size]
        decoded = captioner.greedy_decode(chunk)
        for i, story in enumerate(decoded):
            for k, ids in enumerate(story):
                hyps.append([vocab.tokens[t] for t in ids])
                refs.append(gt_captions[start + i][k].lower().split())
    return corpus_bleu(hyps, refs, 2), corpus_bleu(hyps, refs, 3)
