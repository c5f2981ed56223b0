"""Hierarchical image-text matching model behind the R-precision metric.

Frame level follows the DAMSM recipe: word features attend over image
sub-regions and matched pairs are pulled together with batch-contrastive
softmax losses. On top of that sit story-level embeddings (a bidirectional
LSTM over sentence embeddings on the text side, an average over frame
embeddings on the visual side) with the same contrastive loss in both
directions at a sharper smoothing coefficient.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils import story_batch


def _cosine_matrix(a, b, eps=1e-8):
    a = a / a.norm(dim=-1, keepdim=True).clamp(min=eps)
    b = b / b.norm(dim=-1, keepdim=True).clamp(min=eps)
    return a @ b.t()


class HierarchicalDamsm(nn.Module):
    def __init__(self, vocab_size, image_size, embed_dim=64, word_dim=64,
                 region_grid=4):
        super().__init__()
        if embed_dim % 2:
            raise ValueError("embed_dim must be even (bidirectional encoders)")
        self.embed_dim = embed_dim
        self.embed = nn.Embedding(vocab_size, word_dim, padding_idx=0)
        self.word_rnn = nn.GRU(word_dim, embed_dim // 2, batch_first=True,
                               bidirectional=True)
        self.story_rnn = nn.LSTM(embed_dim, embed_dim // 2, batch_first=True,
                                 bidirectional=True)
        blocks, cin, size = [], 3, image_size
        ch = 32
        while size > region_grid:
            cout = embed_dim if size // 2 == region_grid else ch
            blocks += [nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                       nn.GroupNorm(8, cout), nn.LeakyReLU(0.2, inplace=True)]
            cin, ch, size = cout, min(ch * 2, embed_dim), size // 2
        self.image_tower = nn.Sequential(*blocks)
        self.frame_proj = nn.Linear(embed_dim, embed_dim)
        self._frozen = False

    # -- text ------------------------------------------------------------
    def encode_words(self, token_ids, mask):
        """(B,L) -> word features (B,L,D) and sentence embeddings (B,D)."""
        lengths = mask.to(torch.int64).sum(dim=1).cpu()
        packed = nn.utils.rnn.pack_padded_sequence(
            self.embed(token_ids), lengths, batch_first=True,
            enforce_sorted=False)
        out, h_n = self.word_rnn(packed)
        words, _ = nn.utils.rnn.pad_packed_sequence(
            out, batch_first=True, total_length=token_ids.shape[1])
        sent = torch.cat([h_n[0], h_n[1]], dim=-1)
        return words, sent

    def encode_story_text(self, token_ids, token_mask):
        """(B,T,L) -> (story_emb (B,D), word feats (B,T,L,D), sents (B,T,D))."""
        b, t, length = token_ids.shape
        words, sents = self.encode_words(
            token_ids.reshape(b * t, length), token_mask.reshape(b * t, length))
        sents = sents.view(b, t, -1)
        _, (h_n, _) = self.story_rnn(sents)
        story = torch.cat([h_n[0], h_n[1]], dim=-1)
        return story, words.view(b, t, length, -1), sents

    # -- images ----------------------------------------------------------
    def encode_frames(self, images):
        """(B,3,H,W) -> (region features (B,D,N), frame embeddings (B,D))."""
        fmap = self.image_tower(images)
        regions = fmap.flatten(2)
        frame = self.frame_proj(regions.mean(dim=2))
        return regions, frame

    def encode_story_visual(self, images):
        """(B,T,3,H,W) -> (B,D): average of per-frame embeddings."""
        b, t = images.shape[:2]
        _, frame = self.encode_frames(images.flatten(0, 1))
        return frame.view(b, t, -1).mean(dim=1)

    # -- freeze ------------------------------------------------------------
    @property
    def frozen(self):
        return self._frozen

    def freeze(self):
        self.requires_grad_(False)
        super().train(False)
        self._frozen = True
        return self

    def train(self, mode=True):
        if mode and self._frozen:
            raise RuntimeError("matching model is frozen")
        return super().train(mode)


# -- losses -------------------------------------------------------------

def word_loss(regions, words, mask, gamma1, gamma2, gamma3):
    """Batch-contrastive word-to-region matching loss, both directions.

    regions (B,D,N); words (B,L,D); mask (B,L). Per (image, text) pair the
    match score is the gamma2-smoothed log-sum-exp of per-word cosines to
    their attended region contexts.
    """
    b = regions.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    scores = torch.zeros(b, b, device=regions.device)
    for j in range(b):
        keep = mask[j].to(torch.bool)
        e = words[j][keep]                                    # (Lj, D)
        s = torch.einsum("ld,bdn->bln", e, regions)           # (B, Lj, N)
        s = F.softmax(s, dim=1)
        alpha = F.softmax(gamma1 * s, dim=2)
        ctx = torch.einsum("bln,bdn->bld", alpha, regions)
        rel = F.cosine_similarity(ctx, e[None].expand_as(ctx), dim=-1)
        scores[:, j] = torch.logsumexp(gamma2 * rel, dim=1) / gamma2
    logits = gamma3 * scores
    targets = torch.arange(b, device=regions.device)
    return F.cross_entropy(logits, targets), \
        F.cross_entropy(logits.t(), targets)


def sentence_loss(frame_embs, sent_embs, gamma3):
    b = frame_embs.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    logits = gamma3 * _cosine_matrix(frame_embs, sent_embs)
    targets = torch.arange(b, device=frame_embs.device)
    return F.cross_entropy(logits, targets), \
        F.cross_entropy(logits.t(), targets)


def story_contrastive_loss(visual_embs, text_embs, gamma):
    """The two story-level losses: P(story_i | visual_i) cross-entropy with
    the batch as candidates, and the text-to-visual mirror."""
    b = visual_embs.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    logits = gamma * _cosine_matrix(visual_embs, text_embs)
    targets = torch.arange(b, device=visual_embs.device)
    return F.cross_entropy(logits, targets), \
        F.cross_entropy(logits.t(), targets)


def train_h_damsm(train_ds, pre_cfg, eval_cfg, image_size, region_grid=4,
                  embed_dim=64, seed=0, log=None) -> HierarchicalDamsm:
    """Joint word/sentence/story matching training; returns the model frozen."""
    if len(train_ds.stories) == 0:
        raise ValueError("cannot train the matching model on an empty dataset")
    if pre_cfg.damsm_batch < 2:
        raise ValueError("contrastive training needs batch size >= 2")
    gen = torch.Generator().manual_seed(seed)
    model = HierarchicalDamsm(len(train_ds.vocab), image_size,
                              embed_dim=embed_dim, region_grid=region_grid)
    opt = torch.optim.Adam(model.parameters(), lr=pre_cfg.damsm_lr)
    g1, g2, g3 = eval_cfg.damsm_gamma1, eval_cfg.damsm_gamma2, eval_cfg.damsm_gamma3
    gs = eval_cfg.damsm_gamma_story
    for epoch in range(pre_cfg.damsm_epochs):
        order = torch.randperm(len(train_ds.stories), generator=gen).tolist()
        total, count = 0.0, 0
        for start in range(0, len(order) - 1, pre_cfg.damsm_batch):
            idxs = order[start:start + pre_cfg.damsm_batch]
            if len(idxs) < 2:
                continue
            batch = story_batch(train_ds, idxs)
            b, t = batch["frames"].shape[:2]
            story_t, words, sents = model.encode_story_text(
                batch["token_ids"], batch["token_mask"])
            regions, frame_embs = model.encode_frames(
                batch["frames"].flatten(0, 1))
            story_v = frame_embs.view(b, t, -1).mean(dim=1)
            w0, w1 = word_loss(regions, words.flatten(0, 1),
                               batch["token_mask"].flatten(0, 1), g1, g2, g3)
            s0, s1 = sentence_loss(frame_embs, sents.flatten(0, 1), g3)
            st0, st1 = story_contrastive_loss(story_v, story_t, gs)
            loss = w0 + w1 + s0 + s1 + st0 + st1
            opt.zero_grad()
            loss.backward()
            opt.step()
            total, count = total + float(loss.detach()), count + 1
        if log:
            log(f"matching epoch {epoch}: loss {total / max(count, 1):.4f}")
    return model.freeze()


def evaluate_r_precision(visual_embs, text_embs, runs=10, mismatches=99,
                         seed=0):
    """R-precision (R=1) over `runs` seeded draws of mismatched candidates.

    visual_embs (M,D): story embeddings of generated stories; text_embs
    (M,D): embeddings of the matching captions, index-aligned. Returns
    (mean, std) of the percentage of stories whose true caption outranks all
    `mismatches` sampled alternatives by cosine similarity.
    """
    v = np.asarray(visual_embs, dtype=np.float64)
    t = np.asarray(text_embs, dtype=np.float64)
    m = v.shape[0]
    if m < mismatches + 1:
        raise ValueError(
            f"need at least {mismatches + 1} stories, got {m}")
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    sims = v @ t.T                                            # (M, M)
    scores = []
    for r in range(runs):
        rng = np.random.default_rng(seed + r)
        hits = 0
        for i in range(m):
            pool = rng.permutation(m - 1)[:mismatches]
            pool = pool + (pool >= i)                         # skip self
            cand = sims[i, np.concatenate([[i], pool])]
            hits += int(np.argmax(cand) == 0)
        scores.append(100.0 * hits / m)
    return float(np.mean(scores)), float(np.std(scores))


def save_damsm(path, model: HierarchicalDamsm, vocab, image_size):
    torch.save({"header": {"vocab_hash": vocab.content_hash(),
                           "image_size": image_size,
                           "embed_dim": model.embed_dim},
                "state_dict": model.state_dict()}, path)
    return path


def load_damsm(path, vocab, image_size, region_grid=4) -> HierarchicalDamsm:
    from ..config import ConfigError
    blob = torch.load(path, map_location="cpu", weights_only=False)
    header = blob.get("header", {})
    if (header.get("vocab_hash") != vocab.content_hash()
            or header.get("image_size") != image_size):
        raise ConfigError(f"matching snapshot at {path} does not match the config")
    model = HierarchicalDamsm(len(vocab), image_size,
                              embed_dim=header["embed_dim"],
                              region_grid=region_grid)
    model.load_state_dict(blob["state_dict"])
    return model.freeze()
