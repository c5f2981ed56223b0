"""Recurrent transformer with per-layer memory cells.

Each layer owns a small bank of memory vectors that persists across the
frames of a story. Token positions attend over [memory; tokens]; after each
frame the memory is refreshed through a gated residual update, which is what
carries context forward in time.
"""

import io
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn

from .config import MartConfig


def masked_softmax(scores, mask, dim=-1):
    """Softmax over `dim` restricted to positions where `mask` is True.

    Masked positions come out exactly 0 (not merely tiny): the exponentials
    are multiplied by the mask rather than offset by a large negative.
    `mask` must broadcast to `scores`. Rows with no unmasked entry are an
    error, not a silent uniform.
    """
    mask = torch.broadcast_to(mask.to(torch.bool), scores.shape)
    if not mask.any(dim=dim).all():
        raise ValueError("softmax row with every position masked")
    filled = scores.masked_fill(~mask, float("-inf"))
    shifted = filled - filled.amax(dim=dim, keepdim=True)
    exps = torch.exp(shifted) * mask
    return exps / exps.sum(dim=dim, keepdim=True)


@dataclass
class MemoryState:
    """Per-layer memory banks, each (B, num_cells, hidden)."""

    cells: Tuple[torch.Tensor, ...]

    def detach(self):
        return MemoryState(tuple(c.detach() for c in self.cells))

    def clone(self):
        return MemoryState(tuple(c.clone() for c in self.cells))

    def serialize(self) -> bytes:
        buf = io.BytesIO()
        torch.save([c.detach().cpu() for c in self.cells], buf)
        return buf.getvalue()

    @classmethod
    def deserialize(cls, data: bytes) -> "MemoryState":
        cells = torch.load(io.BytesIO(data), weights_only=True)
        return cls(tuple(cells))


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: MartConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.hidden_size // cfg.num_heads
        self.q = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.k = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.v = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.out = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query, keyvalue, kv_mask):
        """query (B,Lq,H), keyvalue (B,Lk,H) -> (B,Lq,H).

        kv_mask is (B,Lk) for plain padding or (B,Lq,Lk) when different
        query positions may see different keys (causal text decoding).
        """
        q, k, v = self._split(self.q(query)), self._split(self.k(keyvalue)), \
            self._split(self.v(keyvalue))
        scores = q @ k.transpose(-2, -1) / self.head_dim ** 0.5
        mask = kv_mask[:, None, None, :] if kv_mask.dim() == 2 \
            else kv_mask[:, None, :, :]
        attn = masked_softmax(scores, mask, dim=-1)
        ctx = self.drop(attn) @ v
        b, _, lq, _ = ctx.shape
        return self.out(ctx.transpose(1, 2).reshape(b, lq, -1))


class MartLayer(nn.Module):
    def __init__(self, cfg: MartConfig):
        super().__init__()
        h = cfg.hidden_size
        self.attn = MultiHeadAttention(cfg)
        self.attn_norm = nn.LayerNorm(h, eps=cfg.layer_norm_eps)
        self.ffn = nn.Sequential(
            nn.Linear(h, cfg.ffn_size), nn.GELU(), nn.Linear(cfg.ffn_size, h))
        self.ffn_norm = nn.LayerNorm(h, eps=cfg.layer_norm_eps)
        self.mem_attn = MultiHeadAttention(cfg)
        self.mem_candidate = nn.Linear(h, h)
        self.mem_gate = nn.Linear(2 * h, h)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, hidden, mask, memory, attn_mask=None):
        kv = torch.cat([memory, hidden], dim=1)
        b, m = memory.shape[:2]
        if attn_mask is None:
            kv_mask = torch.cat(
                [torch.ones(b, m, dtype=torch.bool, device=mask.device), mask],
                dim=1)
        else:
            # per-query visibility over tokens; memory always visible
            tok = mask[:, None, :] & attn_mask
            mem_part = torch.ones(b, tok.shape[1], m, dtype=torch.bool,
                                  device=mask.device)
            kv_mask = torch.cat([mem_part, tok], dim=-1)
        hidden = self.attn_norm(hidden + self.drop(self.attn(hidden, kv, kv_mask)))
        hidden = self.ffn_norm(hidden + self.drop(self.ffn(hidden)))
        return hidden

    def update_memory(self, memory, hidden, mask):
        """Gated residual refresh: new = g * candidate + (1 - g) * old."""
        kv = torch.cat([memory, hidden], dim=1)
        kv_mask = torch.cat(
            [torch.ones(memory.shape[:2], dtype=torch.bool,
                        device=mask.device), mask], dim=1)
        pooled = self.mem_attn(memory, kv, kv_mask)
        candidate = torch.tanh(self.mem_candidate(pooled))
        gate = torch.sigmoid(self.mem_gate(torch.cat([memory, candidate], dim=-1)))
        return gate * candidate + (1.0 - gate) * memory


class MemoryTransformer(nn.Module):
    """The recurrent core: step() consumes one frame's tokens at a time."""

    def __init__(self, cfg: MartConfig, input_dim=None, cond_dim=None):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_size
        input_dim = h if input_dim is None else input_dim
        self.input_proj = (nn.Identity() if input_dim == h
                           else nn.Linear(input_dim, h))
        self.pos_embed = nn.Embedding(cfg.max_seq_len, h)
        self.input_norm = nn.LayerNorm(h, eps=cfg.layer_norm_eps)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(MartLayer(cfg) for _ in range(cfg.num_layers))
        # one projection row per (layer, cell) pair, applied to h0
        self.mem_init = nn.Linear(
            h if cond_dim is None else cond_dim,
            cfg.num_layers * cfg.num_memory_cells * h)
        self.pool_query = nn.Parameter(torch.randn(h) / h ** 0.5)

    def init_memory(self, h0) -> MemoryState:
        """Project the story conditioning vector into every memory cell."""
        b = h0.shape[0]
        flat = torch.tanh(self.mem_init(h0))
        per_layer = flat.view(b, self.cfg.num_layers,
                              self.cfg.num_memory_cells, self.cfg.hidden_size)
        return MemoryState(tuple(per_layer[:, i] for i in range(self.cfg.num_layers)))

    def step(self, words, mask, memory: MemoryState, attn_mask=None):
        """One frame: (B,L,d_in) words + (B,L) mask -> (B,L,H) states, new memory.

        `attn_mask` optionally restricts token-to-token visibility, (L,L) or
        (B,L,L), on top of the padding mask (used for causal decoding).
        Nothing from this call leaks backward in time: earlier frames'
        outputs depend only on earlier memory.
        """
        b, length, _ = words.shape
        if length > self.cfg.max_seq_len:
            raise ValueError(
                f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}")
        mask = mask.to(torch.bool)
        if attn_mask is not None and attn_mask.dim() == 2:
            attn_mask = attn_mask[None].expand(b, -1, -1)
        pos = torch.arange(length, device=words.device)
        hidden = self.input_proj(words) + self.pos_embed(pos)[None]
        hidden = self.drop(self.input_norm(hidden))
        new_cells = []
        for layer, mem in zip(self.layers, memory.cells):
            hidden = layer(hidden, mask, mem, attn_mask=attn_mask)
            new_cells.append(layer.update_memory(mem, hidden, mask))
        return hidden, MemoryState(tuple(new_cells))

    def attention_pool(self, states, mask):
        """Collapse token states to one vector with a learned query.

        Returns (pooled (B,H), weights (B,L)); weights are a proper
        distribution over unmasked positions, exactly 0 where masked.
        """
        scores = states @ self.pool_query
        alpha = masked_softmax(scores, mask.to(torch.bool), dim=-1)
        return (alpha.unsqueeze(-1) * states).sum(dim=1), alpha
