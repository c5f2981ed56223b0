"""Per-frame conditioning: recurrent word encodings, GRU track, and the gist.

Two recurrences run side by side over a story. The memory transformer carries
discourse context through its memory cells and yields contextual word
encodings m_k plus a pooled summary c_k; a GRU over [s_k; eps_k] supplies the
per-frame stochastic track g_k. The two meet in text2gist, which generates a
filter from [c_k; g_k] and applies it to the projected sentence to produce
the gist vector o_k that seeds image synthesis.
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .mart import MemoryState, MemoryTransformer


@dataclass
class FrameContext:
    """Everything the generator needs for one frame."""

    m_k: torch.Tensor      # (B, L, hidden) contextual word encodings
    mask: torch.Tensor     # (B, L) bool token mask
    c_k: torch.Tensor      # (B, hidden) attention-pooled summary
    g_k: torch.Tensor      # (B, d_g) GRU output
    o_k: torch.Tensor      # (B, C_out) gist vector
    q_k: torch.Tensor      # (B, d_g) GRU hidden (== g_k for a GRU cell)
    eps_k: torch.Tensor    # (B, d_noise) the noise draw used


class ContextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = cfg.generator
        self.mart = MemoryTransformer(
            cfg.mart, input_dim=cfg.text.word_dim, cond_dim=cfg.text.cond_dim)
        self.gru = nn.GRUCell(cfg.text.sent_dim + gen.noise_dim, gen.gru_dim)
        self.filter_net = nn.Linear(
            cfg.mart.hidden_size + gen.gru_dim, gen.gist_dim * gen.gist_proj_dim)
        self.sent_proj = nn.Linear(cfg.text.sent_dim, gen.gist_proj_dim, bias=False)

    def initial_memory(self, h0) -> MemoryState:
        """Memory from the conditioning vector; zeros under the ablation flag."""
        mem = self.mart.init_memory(h0)
        if not self.cfg.recurrent_memory_init:
            mem = MemoryState(tuple(torch.zeros_like(c) for c in mem.cells))
        return mem

    def gru_step(self, s_k, eps_k, q_prev):
        """One GRU cell step on the concatenated [sentence; noise] input."""
        q_k = self.gru(torch.cat([s_k, eps_k], dim=-1), q_prev)
        return q_k, q_k

    def text2gist(self, c_k, g_k, s_k):
        """o_k[c] = sum_j Filter([c_k;g_k])[c,j] * tanh(W_I s_k)[j].

        The generated filter spans the whole projected sentence signal, so
        each output channel is a single correlation value.
        """
        b = c_k.shape[0]
        filt = self.filter_net(torch.cat([c_k, g_k], dim=-1))
        filt = filt.view(b, self.cfg.generator.gist_dim, self.cfg.generator.gist_proj_dim)
        signal = torch.tanh(self.sent_proj(s_k))
        return torch.bmm(filt, signal.unsqueeze(-1)).squeeze(-1)

    def encode(self, words, masks, sents, h0, eps=None, generator=None,
               ) -> List[FrameContext]:
        """Thread both recurrences over the T frames of a story batch.

        words (B,T,L,d_w), masks (B,T,L), sents (B,T,d_s), h0 (B,d_h).
        `eps` optionally supplies the (B,T,d_noise) noise draws; otherwise
        they come from torch's RNG (or `generator`).
        """
        b, t = words.shape[:2]
        if eps is None:
            eps = torch.randn(b, t, self.cfg.generator.noise_dim,
                              generator=generator, dtype=words.dtype,
                              device=words.device)
        memory = self.initial_memory(h0)
        q = torch.zeros(b, self.cfg.generator.gru_dim,
                        dtype=words.dtype, device=words.device)
        frames = []
        for k in range(t):
            m_k, memory = self.mart.step(words[:, k], masks[:, k], memory)
            c_k, _ = self.mart.attention_pool(m_k, masks[:, k])
            g_k, q = self.gru_step(sents[:, k], eps[:, k], q)
            o_k = self.text2gist(c_k, g_k, sents[:, k])
            frames.append(FrameContext(m_k=m_k, mask=masks[:, k].to(torch.bool),
                                       c_k=c_k, g_k=g_k, o_k=o_k, q_k=q,
                                       eps_k=eps[:, k]))
        return frames
