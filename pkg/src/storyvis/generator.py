"""Two-stage frame synthesis with cross-frame feature copying.

Stage 1 turns the gist vector into a coarse image and a grid of sub-region
feature columns. Stage 2 re-reads the words: it attends words onto the
current sub-regions and onto the previous frame's sub-regions (the copy
path), concatenates all three feature banks and refines up to full
resolution. The copy path is what lets frame k reuse what frame k-1 drew.
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .context import ContextEncoder, FrameContext
from .mart import masked_softmax
from .text import CaptionEmbedder, ConditioningState, StoryEncoder


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1, bias=False)


def up_block(cin, cout):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        conv3x3(cin, cout),
        nn.BatchNorm2d(cout),
        nn.ReLU(True),
    )


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(ch, ch), nn.BatchNorm2d(ch), nn.ReLU(True),
            conv3x3(ch, ch), nn.BatchNorm2d(ch))
        self.act = nn.ReLU(True)

    def forward(self, x):
        return self.act(x + self.body(x))


@dataclass
class GeneratedFrame:
    image: torch.Tensor            # (B, 3, H, W) in [-1, 1]
    stage1_features: torch.Tensor  # (B, D_i, N)
    stage2_features: torch.Tensor  # (B, D_i, N)


class WordRegionAttention(nn.Module):
    """Attend projected word encodings onto image sub-region columns.

    For each region j, beta_j = softmax_i(h_j . U m_i) over unmasked words i,
    and the context column is sum_i beta_ji (U m_i). A zero feature matrix
    (the first frame's copy source) gives zero logits, hence uniform weights.
    """

    def __init__(self, word_dim, region_dim):
        super().__init__()
        self.proj = nn.Linear(word_dim, region_dim, bias=False)

    def forward(self, words, mask, regions):
        """words (B,L,d_w), mask (B,L), regions (B,D_i,N) -> ((B,D_i,N), beta)."""
        projected = self.proj(words)                       # (B, L, D_i)
        scores = torch.einsum("bdn,bld->bnl", regions, projected)
        beta = masked_softmax(scores, mask[:, None, :].to(torch.bool), dim=-1)
        context = torch.einsum("bnl,bld->bdn", beta, projected)
        return context, beta


class Stage1Generator(nn.Module):
    """Gist vector -> coarse RGB at H/2 plus the sub-region feature grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        gen = cfg.generator
        self.grid = gen.region_grid
        ch = gen.base_channels
        self.fc = nn.Sequential(
            nn.Linear(gen.gist_dim, ch * 2 * 4 * 4),
            nn.BatchNorm1d(ch * 2 * 4 * 4),
            nn.ReLU(True))
        # 4x4 seed up to H/2
        ups = []
        size, cin = 4, ch * 2
        while size < gen.image_size // 2:
            ups.append(up_block(cin, ch))
            cin = ch
            size *= 2
        self.trunk = nn.Sequential(*ups) if ups else nn.Identity()
        self.trunk_out = cin
        self.to_rgb = nn.Sequential(conv3x3(cin, 3), nn.Tanh())
        self.to_regions = nn.Conv2d(cin, gen.region_dim, 1)

    def forward(self, o_k):
        b = o_k.shape[0]
        x = self.fc(o_k).view(b, -1, 4, 4)
        x = self.trunk(x)
        low = self.to_rgb(x)
        grid = torch.nn.functional.adaptive_avg_pool2d(x, self.grid)
        features = self.to_regions(grid).flatten(2)        # (B, D_i, N)
        return low, features


class Stage2Generator(nn.Module):
    """Refine [regions ; word context ; copy context] up to full resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        gen = cfg.generator
        self.grid = gen.region_grid
        ch = gen.base_channels
        self.word_attn = WordRegionAttention(cfg.mart.hidden_size, gen.region_dim)
        self.fuse = nn.Sequential(
            conv3x3(3 * gen.region_dim, ch), nn.BatchNorm2d(ch), nn.ReLU(True))
        self.res = nn.Sequential(*[ResBlock(ch) for _ in range(gen.num_res_blocks)])
        ups = []
        size, cin = self.grid, ch
        while size < gen.image_size:
            cout = max(ch // 2, 16) if size * 2 == gen.image_size else ch
            ups.append(up_block(cin, cout))
            cin = cout
            size *= 2
        self.trunk = nn.Sequential(*ups)
        self.to_rgb = nn.Sequential(conv3x3(cin, 3), nn.Tanh())
        self.to_regions = nn.Conv2d(cin, gen.region_dim, 1)

    def forward(self, stage1_features, m_k, mask, copy_context):
        b, d, n = stage1_features.shape
        word_context, beta = self.word_attn(m_k, mask, stage1_features)
        stacked = torch.cat([stage1_features, word_context, copy_context], dim=1)
        x = stacked.view(b, 3 * d, self.grid, self.grid)
        x = self.res(self.fuse(x))
        x = self.trunk(x)
        image = self.to_rgb(x)
        grid = torch.nn.functional.adaptive_avg_pool2d(x, self.grid)
        features = self.to_regions(grid).flatten(2)
        return image, features, beta


class FrameGenerator(nn.Module):
    """One frame: stage 1, copy from the previous frame, stage 2."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stage1 = Stage1Generator(cfg)
        self.copy_attn = WordRegionAttention(
            cfg.mart.hidden_size, cfg.generator.region_dim)
        self.stage2 = Stage2Generator(cfg)

    def zero_features(self, batch, device=None, dtype=None):
        gen = self.cfg.generator
        return torch.zeros(batch, gen.region_dim, gen.region_grid ** 2,
                           device=device, dtype=dtype)

    def copy_transform(self, m_k, mask, prev_features):
        context, _ = self.copy_attn(m_k, mask, prev_features)
        return context

    def forward(self, ctx: FrameContext, prev_features) -> GeneratedFrame:
        low, s1 = self.stage1(ctx.o_k)
        copy_context = self.copy_transform(ctx.m_k, ctx.mask, prev_features)
        image, s2, _ = self.stage2(s1, ctx.m_k, ctx.mask, copy_context)
        frame = GeneratedFrame(image=image, stage1_features=s1, stage2_features=s2)
        frame.low_res = low
        return frame


class StoryGenerator(nn.Module):
    """Full text-to-story pipeline; owns the text encoders."""

    def __init__(self, cfg: ModelConfig, vocab_size):
        super().__init__()
        self.cfg = cfg
        self.embedder = CaptionEmbedder(vocab_size, cfg.text)
        self.story_encoder = StoryEncoder(cfg.text, cfg.story_len)
        self.context_encoder = ContextEncoder(cfg)
        self.frame_gen = FrameGenerator(cfg)

    def embed_captions(self, token_ids, token_mask):
        """(B,T,L) ids -> word tensors (B,T,L,d_w) and sentences (B,T,d_s)."""
        b, t, length = token_ids.shape
        words, sents = self.embedder(
            token_ids.reshape(b * t, length), token_mask.reshape(b * t, length))
        return (words.view(b, t, length, -1), sents.view(b, t, -1))

    def forward(self, token_ids, token_mask, eps_story=None, eps_frames=None,
                generator=None, cond=None):
        """Returns (frames: list of T GeneratedFrame, cond, contexts).

        `cond` lets a caller hold the story conditioning fixed (it reads the
        whole caption sequence, so it is the one deliberately non-causal
        input to the per-frame recurrences).
        """
        words, sents = self.embed_captions(token_ids, token_mask)
        if cond is None:
            cond = self.story_encoder(sents, eps=eps_story, generator=generator)
        contexts = self.context_encoder.encode(
            words, token_mask, sents, cond.h0, eps=eps_frames, generator=generator)
        prev = self.frame_gen.zero_features(
            token_ids.shape[0], device=words.device, dtype=words.dtype)
        frames = []
        for ctx in contexts:
            frame = self.frame_gen(ctx, prev)
            frames.append(frame)
            prev = frame.stage2_features
        return frames, cond, contexts

    @torch.no_grad()
    def generate_story(self, token_ids, token_mask, seed=0) -> List[GeneratedFrame]:
        """Deterministic inference: every noise draw comes from `seed`."""
        was_training = self.training
        self.eval()
        gen = torch.Generator().manual_seed(seed)
        try:
            frames, _, _ = self.forward(token_ids, token_mask, generator=gen)
        finally:
            self.train(was_training)
        return frames

    def story_tensor(self, frames: List[GeneratedFrame]) -> torch.Tensor:
        """Stack per-frame images into (B, T, 3, H, W)."""
        return torch.stack([f.image for f in frames], dim=1)
