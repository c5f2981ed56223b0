"""Video captioner over per-frame region features.

The same recurrent-transformer core as the context encoder, run over frames:
each step sees [memory ; N region tokens ; shifted caption tokens]. Region
positions attend only to memory and regions; caption position i additionally
sees captions <= i (causal), so teacher forcing cannot leak future tokens.
Pretrained on ground truth, then frozen: during GAN training it only scores
generated frames, with gradients flowing back into the pixels.
"""

import dataclasses
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig
from .data.dataset import Vocab
from .mart import MemoryState, MemoryTransformer
from .utils import story_batch


class RegionEncoder(nn.Module):
    """Image -> N x d_f region feature matrix, differentiable in the pixels.

    GroupNorm instead of BatchNorm so the frozen module has no running
    statistics to drift.
    """

    def __init__(self, image_size, region_grid, feature_dim):
        super().__init__()
        blocks, cin, size = [], 3, image_size
        ch = 32
        while size > region_grid:
            cout = feature_dim if size // 2 == region_grid else ch
            blocks += [nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                       nn.GroupNorm(8, cout), nn.LeakyReLU(0.2, inplace=True)]
            cin, ch, size = cout, min(ch * 2, feature_dim), size // 2
        self.net = nn.Sequential(*blocks)

    def forward(self, image):
        """(B, 3, H, W) -> (B, N, d_f), rows in row-major grid order."""
        fmap = self.net(image)
        return fmap.flatten(2).transpose(1, 2)


def shift_tokens(token_ids, token_mask):
    """Content tokens -> decoder inputs/targets with BOS/EOS.

    Returns (inputs (B,L+1), input_mask, targets (B,L+1), target_mask):
    inputs = [BOS, w_1..], targets = [w_1.., EOS] with EOS at each row's
    true length.
    """
    b, length = token_ids.shape
    token_mask = token_mask.to(torch.bool)
    pad_col = torch.zeros(b, 1, dtype=token_ids.dtype, device=token_ids.device)
    inputs = torch.cat([pad_col + Vocab.BOS, token_ids * token_mask], dim=1)
    input_mask = torch.cat(
        [torch.ones(b, 1, dtype=torch.bool, device=token_ids.device),
         token_mask], dim=1)
    targets = torch.cat([token_ids * token_mask, pad_col], dim=1)
    target_mask = torch.cat(
        [token_mask, torch.zeros(b, 1, dtype=torch.bool,
                                 device=token_ids.device)], dim=1)
    lengths = token_mask.sum(dim=1)
    rows = torch.arange(b, device=token_ids.device)
    targets[rows, lengths] = Vocab.EOS
    target_mask[rows, lengths] = True
    return inputs, input_mask, targets, target_mask


def caption_nll(log_probs, targets, target_mask):
    """Mean negative log-likelihood over unmasked target positions."""
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = target_mask.to(log_probs.dtype)
    return -(picked * mask).sum() / mask.sum()


class VideoCaptioner(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size):
        super().__init__()
        cap = cfg.captioner
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.num_regions = cfg.generator.region_grid ** 2
        hidden = cap.mart.hidden_size
        needed = self.num_regions + cfg.max_tokens + 1
        if cap.mart.max_seq_len < needed:
            raise ConfigError(
                f"captioner max_seq_len {cap.mart.max_seq_len} < regions+tokens+1 = {needed}")
        self.region_enc = RegionEncoder(
            cfg.generator.image_size, cfg.generator.region_grid, cap.feature_dim)
        self.region_proj = nn.Linear(cap.feature_dim, hidden)
        self.token_embed = nn.Embedding(vocab_size, hidden, padding_idx=Vocab.PAD)
        self.type_embed = nn.Embedding(2, hidden)  # 0 = region, 1 = text
        self.mart = MemoryTransformer(cap.mart, cond_dim=hidden)
        self.memory_seed = nn.Parameter(torch.zeros(hidden))
        self.head = nn.Linear(hidden, vocab_size)
        self._frozen = False

    # -- freeze contract -----------------------------------------------------
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
            raise RuntimeError("captioner is frozen; training mode is a contract violation")
        return super().train(mode)

    # -- core ----------------------------------------------------------------
    def initial_memory(self, batch) -> MemoryState:
        return self.mart.init_memory(self.memory_seed[None].expand(batch, -1))

    def extract_region_features(self, images):
        """(B, 3, H, W) in [-1,1] -> (B, N, d_f)."""
        return self.region_enc(images)

    def _attn_mask(self, text_len, device):
        """Visibility over [regions ; text]: regions see regions, text is causal."""
        n, s = self.num_regions, self.num_regions + text_len
        mask = torch.zeros(s, s, dtype=torch.bool, device=device)
        mask[:, :n] = True
        causal = torch.tril(torch.ones(text_len, text_len, dtype=torch.bool,
                                       device=device))
        mask[n:, n:] = causal
        mask[:n, n:] = False
        return mask

    def _encode_frame(self, regions, text_ids, text_mask, memory):
        """One frame's joint sequence -> (text hidden states, new memory)."""
        b = regions.shape[0]
        reg = self.region_proj(regions) + self.type_embed.weight[0]
        text = self.token_embed(text_ids) + self.type_embed.weight[1]
        seq = torch.cat([reg, text], dim=1)
        seq_mask = torch.cat(
            [torch.ones(b, self.num_regions, dtype=torch.bool,
                        device=regions.device), text_mask], dim=1)
        hidden, new_mem = self.mart.step(
            seq, seq_mask, memory, attn_mask=self._attn_mask(
                text_ids.shape[1], regions.device))
        return hidden[:, self.num_regions:], new_mem

    def teacher_forced(self, features, token_ids, token_mask):
        """features (B,T,N,d_f), tokens (B,T,L) -> per-frame log-probs.

        Returns (log_probs (B,T,L+1,V), targets, target_mask); every
        distribution is a log-softmax, so rows log-sum-exp to 0.
        """
        b, t = features.shape[:2]
        memory = self.initial_memory(b)
        logps, targets, tmasks = [], [], []
        for k in range(t):
            inputs, in_mask, tgt, tgt_mask = shift_tokens(
                token_ids[:, k], token_mask[:, k])
            hidden, memory = self._encode_frame(
                features[:, k], inputs, in_mask, memory)
            logps.append(F.log_softmax(self.head(hidden), dim=-1))
            targets.append(tgt)
            tmasks.append(tgt_mask)
        return (torch.stack(logps, dim=1), torch.stack(targets, dim=1),
                torch.stack(tmasks, dim=1))

    def story_nll(self, frames, token_ids, token_mask):
        """frames (B,T,3,H,W) -> mean NLL of the ground-truth captions."""
        b, t = frames.shape[:2]
        feats = self.extract_region_features(frames.flatten(0, 1))
        feats = feats.view(b, t, self.num_regions, -1)
        log_probs, targets, tmask = self.teacher_forced(
            feats, token_ids, token_mask)
        return caption_nll(log_probs, targets, tmask)

    @torch.no_grad()
    def greedy_decode(self, frames, max_len=None) -> List[List[List[int]]]:
        """Per story, per frame: decoded content-token ids (no specials)."""
        was_training = self.training
        super().train(False)
        try:
            b, t = frames.shape[:2]
            max_len = max_len or self.cfg.max_tokens
            feats = self.extract_region_features(frames.flatten(0, 1))
            feats = feats.view(b, t, self.num_regions, -1)
            memory = self.initial_memory(b)
            stories = [[] for _ in range(b)]
            for k in range(t):
                ids = torch.full((b, 1), Vocab.BOS, dtype=torch.long,
                                 device=frames.device)
                alive = torch.ones(b, dtype=torch.bool, device=frames.device)
                for _ in range(max_len):
                    mask = ids != Vocab.PAD
                    hidden, _ = self._encode_frame(feats[:, k], ids, mask, memory)
                    nxt = self.head(hidden[:, -1]).argmax(dim=-1)
                    nxt = torch.where(alive, nxt, torch.full_like(nxt, Vocab.PAD))
                    ids = torch.cat([ids, nxt[:, None]], dim=1)
                    alive = alive & (nxt != Vocab.EOS)
                    if not alive.any():
                        break
                # one memory update per frame, on the full decoded sequence
                mask = ids != Vocab.PAD
                _, memory = self._encode_frame(feats[:, k], ids, mask, memory)
                for i in range(b):
                    row = [int(x) for x in ids[i, 1:]
                           if int(x) not in (Vocab.PAD, Vocab.BOS, Vocab.EOS)]
                    stories[i].append(row)
            return stories
        finally:
            super().train(was_training)


def dual_loss(captioner: VideoCaptioner, generated_frames, token_ids, token_mask):
    """Caption NLL of ground-truth captions under the FROZEN captioner.

    The captioner's weights take no gradient; the pixels do, which is the
    whole point: the generator is pushed toward images the captioner can
    describe with the right words.
    """
    if not captioner.frozen:
        raise RuntimeError("dual loss requires a pretrained, frozen captioner")
    return captioner.story_nll(generated_frames, token_ids, token_mask)


# -- snapshots ---------------------------------------------------------------

def _snapshot_header(cfg: ModelConfig, vocab: Vocab):
    return {
        "captioner": dataclasses.asdict(cfg.captioner),
        "image_size": cfg.generator.image_size,
        "region_grid": cfg.generator.region_grid,
        "max_tokens": cfg.max_tokens,
        "vocab_hash": vocab.content_hash(),
        "vocab_size": len(vocab),
    }


def save_captioner(path, captioner: VideoCaptioner, cfg: ModelConfig, vocab: Vocab):
    torch.save({"header": _snapshot_header(cfg, vocab),
                "state_dict": captioner.state_dict()}, path)
    return path


def load_captioner(path, cfg: ModelConfig, vocab: Vocab) -> VideoCaptioner:
    """Load and freeze; header mismatches are refused, not coerced."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    expect = _snapshot_header(cfg, vocab)
    if blob.get("header") != expect:
        raise ConfigError(
            f"captioner snapshot at {path} does not match the current config/vocab")
    cap = VideoCaptioner(cfg, len(vocab))
    cap.load_state_dict(blob["state_dict"])
    return cap.freeze()


# -- pretraining -------------------------------------------------------------

def pretrain_captioner(train_ds, val_ds, cfg: ModelConfig, pre_cfg, seed=0,
                       log=None) -> VideoCaptioner:
    """Teacher-forced cross-entropy until the val loss stops improving.

    Returns the captioner frozen at its best validation state.
    """
    if len(train_ds.stories) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    gen = torch.Generator().manual_seed(seed)
    cap = VideoCaptioner(cfg, len(train_ds.vocab))
    opt = torch.optim.Adam(cap.parameters(), lr=pre_cfg.captioner_lr)
    best_val, best_state, stale = float("inf"), None, 0
    for epoch in range(pre_cfg.captioner_epochs):
        cap.train()
        order = torch.randperm(len(train_ds.stories), generator=gen).tolist()
        total, count = 0.0, 0
        for start in range(0, len(order), pre_cfg.captioner_batch):
            batch = story_batch(train_ds, order[start:start + pre_cfg.captioner_batch])
            loss = cap.story_nll(batch["frames"], batch["token_ids"],
                                 batch["token_mask"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total, count = total + float(loss.detach()), count + 1
        val = evaluate_caption_loss(cap, val_ds, pre_cfg.captioner_batch)
        if log:
            log(f"captioner epoch {epoch}: train {total / max(count, 1):.4f} val {val:.4f}")
        if val < best_val - 1e-4:
            best_val, stale = val, 0
            best_state = {k: v.detach().clone() for k, v in cap.state_dict().items()}
        else:
            stale += 1
            if stale >= pre_cfg.captioner_patience:
                break
    if best_state is not None:
        cap.load_state_dict(best_state)
    return cap.freeze()


@torch.no_grad()
def evaluate_caption_loss(cap: VideoCaptioner, ds, batch_size=8):
    was_training = cap.training
    nn.Module.train(cap, False)
    try:
        total, count = 0.0, 0
        for start in range(0, len(ds.stories), batch_size):
            batch = story_batch(ds, list(range(start, min(start + batch_size,
                                                          len(ds.stories)))))
            loss = cap.story_nll(batch["frames"], batch["token_ids"],
                                 batch["token_mask"])
            total += float(loss) * len(batch["story_ids"])
            count += len(batch["story_ids"])
        return total / max(count, 1)
    finally:
        nn.Module.train(cap, was_training)


@torch.no_grad()
def greedy_token_accuracy(cap: VideoCaptioner, ds, limit=None, batch_size=8):
    """Position-wise token accuracy of greedy captions against ground truth."""
    n = min(limit or len(ds.stories), len(ds.stories))
    hits, total = 0, 0
    for start in range(0, n, batch_size):
        idxs = list(range(start, min(start + batch_size, n)))
        batch = story_batch(ds, idxs)
        decoded = cap.greedy_decode(batch["frames"])
        for i, idx in enumerate(idxs):
            story = ds.stories[idx]
            for k in range(len(story.captions)):
                gt = [int(x) for x in story.token_ids[k][story.token_mask[k]]]
                hyp = decoded[i][k]
                hits += sum(1 for a, b in zip(gt, hyp) if a == b)
                total += len(gt)
    return 100.0 * hits / max(total, 1)
