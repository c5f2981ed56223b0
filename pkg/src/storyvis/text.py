"""Caption embedding and the story conditioning encoder.

The story conditioning vector is sampled from a learned Gaussian posterior
over the concatenated sentence embeddings (conditional augmentation), which
adds a KL regularizer toward the standard normal.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import TextConfig


@dataclass
class ConditioningState:
    """Posterior moments and the sampled story conditioning vector."""

    mu: torch.Tensor      # (B, d)
    sigma: torch.Tensor   # (B, d), strictly positive std
    eps: torch.Tensor     # (B, d), the Gaussian draw used
    h0: torch.Tensor      # (B, d) == mu + sigma * eps

    @classmethod
    def from_moments(cls, mu, sigma, eps):
        return cls(mu=mu, sigma=sigma, eps=eps, h0=mu + sigma * eps)


class CaptionEmbedder(nn.Module):
    """Word embedding table plus a mask-aware-mean sentence embedding."""

    def __init__(self, vocab_size, cfg: TextConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.word_dim, padding_idx=0)
        self.sent_proj = nn.Linear(cfg.word_dim, cfg.sent_dim)
        if cfg.pretrained_path:
            self.load_pretrained(cfg.pretrained_path)

    def load_pretrained(self, path, vocab_tokens=None):
        """Initialize rows from a whitespace "token v1 .. vD" text file.

        Tokens are matched by the caller-provided token list (index == row);
        unmatched rows keep their random init.
        """
        if vocab_tokens is None:
            return 0
        table = {}
        dim = self.embed.embedding_dim
        with open(path) as f:
            for line in f:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    continue
                table[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
        hits = 0
        with torch.no_grad():
            for i, tok in enumerate(vocab_tokens):
                if tok in table:
                    self.embed.weight[i] = torch.from_numpy(table[tok])
                    hits += 1
        return hits

    def forward(self, token_ids, mask):
        """(B, L) ids + (B, L) mask -> word matrix (B, L, d_w), sentence (B, d_s).

        Masked positions are zeroed in the word matrix; the sentence embedding
        is the mask-aware mean of the word vectors, linearly projected.
        """
        if token_ids.min() < 0 or token_ids.max() >= self.vocab_size:
            raise LookupError("token id outside the closed vocabulary")
        if not mask.any(dim=-1).all():
            raise ValueError("caption with no unpadded tokens")
        words = self.embed(token_ids) * mask.unsqueeze(-1)
        mean = words.sum(dim=1) / mask.sum(dim=1, keepdim=True)
        return words, self.sent_proj(mean)


class StoryEncoder(nn.Module):
    """Gaussian posterior over the concatenated sentence embeddings."""

    def __init__(self, cfg: TextConfig, story_len):
        super().__init__()
        self.cond_dim = cfg.cond_dim
        self.net = nn.Sequential(
            nn.Linear(cfg.sent_dim * story_len, cfg.cond_dim * 2),
            nn.ReLU(True),
            nn.Linear(cfg.cond_dim * 2, cfg.cond_dim * 2),
        )

    def moments(self, sentences):
        """(B, T, d_s) -> (mu, sigma); positivity via exp of a log-variance."""
        out = self.net(sentences.reshape(sentences.shape[0], -1))
        mu, logvar = out[:, :self.cond_dim], out[:, self.cond_dim:]
        return mu, torch.exp(0.5 * logvar)

    def forward(self, sentences, eps=None, generator=None) -> ConditioningState:
        mu, sigma = self.moments(sentences)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator,
                              dtype=mu.dtype, device=mu.device)
        return ConditioningState.from_moments(mu, sigma, eps)


def kl_loss(state: ConditioningState) -> torch.Tensor:
    """KL(N(mu, diag(sigma^2)) || N(0, I)), summed over dims, mean over batch."""
    if (state.sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    var = state.sigma ** 2
    per_sample = 0.5 * (state.mu ** 2 + var - torch.log(var) - 1.0).sum(dim=-1)
    return per_sample.mean()
