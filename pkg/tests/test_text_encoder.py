"""Caption embedding, conditioning posterior, and KL regularizer tests.

The KL term has two independent oracles: the closed form evaluated in numpy
float64, and (for the scalar case) direct numerical integration of
q(x) log(q(x)/p(x)), which validates the formula itself rather than just the
torch transcription of it.
"""

import numpy as np
import pytest
import torch

from storyvis.config import TextConfig
from storyvis.text import (CaptionEmbedder, ConditioningState, StoryEncoder,
                           kl_loss)

from conftest import assert_close


def closed_form_kl(mu, sigma):
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(sigma, dtype=np.float64) ** 2
    per_sample = 0.5 * (mu ** 2 + var - np.log(var) - 1.0).sum(axis=-1)
    return per_sample.mean()


def quadrature_kl(mu, sigma):
    """KL(N(mu, sigma^2) || N(0,1)) for scalars by numerical integration."""
    x = np.linspace(mu - 12 * sigma, mu + 12 * sigma, 400001, dtype=np.float64)
    q = np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    p = np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi)
    integrand = np.where(q > 0, q * (np.log(np.maximum(q, 1e-300)) -
                                     np.log(np.maximum(p, 1e-300))), 0.0)
    return np.trapezoid(integrand, x)


def test_closed_form_matches_quadrature():
    for mu, sigma in [(0.0, 1.0), (0.7, 0.4), (-1.3, 2.1), (2.5, 0.9)]:
        analytic = closed_form_kl([[mu]], [[sigma]])
        numeric = quadrature_kl(mu, sigma)
        assert abs(analytic - numeric) < 1e-8, (mu, sigma)


def test_kl_loss_matches_closed_form(rng):
    for _ in range(100):
        b, d = int(rng.integers(1, 6)), int(rng.integers(1, 12))
        mu = rng.normal(size=(b, d)) * 2.0
        sigma = rng.uniform(0.1, 3.0, size=(b, d))
        state = ConditioningState.from_moments(
            torch.tensor(mu, dtype=torch.float64),
            torch.tensor(sigma, dtype=torch.float64),
            torch.zeros(b, d, dtype=torch.float64))
        assert_close(kl_loss(state), closed_form_kl(mu, sigma), tol=1e-6,
                     msg="kl_loss")


def test_kl_is_zero_at_standard_normal():
    state = ConditioningState.from_moments(
        torch.zeros(4, 8), torch.ones(4, 8), torch.zeros(4, 8))
    assert_close(kl_loss(state), 0.0, tol=1e-7, msg="kl at prior")


def test_kl_rejects_nonpositive_sigma():
    state = ConditioningState.from_moments(
        torch.zeros(2, 3), torch.ones(2, 3), torch.zeros(2, 3))
    state.sigma[1, 2] = 0.0
    with pytest.raises(ValueError, match="strictly positive"):
        kl_loss(state)


def test_reparameterization_identity():
    mu = torch.randn(3, 5)
    sigma = torch.rand(3, 5) + 0.1
    eps = torch.randn(3, 5)
    state = ConditioningState.from_moments(mu, sigma, eps)
    assert torch.equal(state.h0, mu + sigma * eps)
    zero = ConditioningState.from_moments(mu, sigma, torch.zeros_like(eps))
    assert torch.equal(zero.h0, mu)


@pytest.fixture()
def embedder():
    torch.manual_seed(0)
    return CaptionEmbedder(12, TextConfig(word_dim=6, sent_dim=4, cond_dim=4))


def test_embedder_masks_and_means(embedder):
    ids = torch.tensor([[3, 7, 0, 0], [5, 0, 0, 0]])
    mask = torch.tensor([[True, True, False, False],
                         [True, False, False, False]])
    words, sents = embedder(ids, mask)
    assert words.shape == (2, 4, 6) and sents.shape == (2, 4)
    assert torch.equal(words[0, 2:], torch.zeros(2, 6))
    assert torch.equal(words[1, 1:], torch.zeros(3, 6))

    weight = embedder.embed.weight.detach().numpy().astype(np.float64)
    w = embedder.sent_proj.weight.detach().numpy().astype(np.float64)
    b = embedder.sent_proj.bias.detach().numpy().astype(np.float64)
    mean0 = (weight[3] + weight[7]) / 2.0
    mean1 = weight[5]
    assert np.allclose(sents[0].detach().numpy(), w @ mean0 + b, atol=1e-6)
    assert np.allclose(sents[1].detach().numpy(), w @ mean1 + b, atol=1e-6)


def test_embedder_pad_row_is_zero(embedder):
    assert torch.equal(embedder.embed.weight[0], torch.zeros(6))


def test_embedder_rejects_bad_input(embedder):
    good_mask = torch.ones(1, 2, dtype=torch.bool)
    with pytest.raises(LookupError, match="closed vocabulary"):
        embedder(torch.tensor([[3, 12]]), good_mask)
    with pytest.raises(LookupError, match="closed vocabulary"):
        embedder(torch.tensor([[-1, 3]]), good_mask)
    with pytest.raises(ValueError, match="no unpadded tokens"):
        embedder(torch.tensor([[3, 4]]), torch.zeros(1, 2, dtype=torch.bool))


def test_load_pretrained_hits_and_skips(embedder, tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text(
        "alpha 1 2 3 4 5 6\n"
        "beta 0.5 0.5 0.5 0.5 0.5 0.5\n"
        "broken 1 2 3\n"
        "gamma 9 9 9 9 9 9\n")
    tokens = ["<pad>", "<bos>", "<eos>", "alpha", "beta", "delta"]
    before = embedder.embed.weight[5].clone()
    hits = embedder.load_pretrained(path, vocab_tokens=tokens)
    assert hits == 2
    assert torch.equal(embedder.embed.weight[3],
                       torch.tensor([1.0, 2, 3, 4, 5, 6]))
    assert torch.equal(embedder.embed.weight[4], torch.full((6,), 0.5))
    assert torch.equal(embedder.embed.weight[5], before)
    assert embedder.load_pretrained(path) == 0


def test_story_encoder_shapes_and_determinism():
    torch.manual_seed(1)
    enc = StoryEncoder(TextConfig(word_dim=6, sent_dim=4, cond_dim=10), story_len=3)
    sents = torch.randn(2, 3, 4)
    mu, sigma = enc.moments(sents)
    assert mu.shape == (2, 10) and sigma.shape == (2, 10)
    assert (sigma > 0).all()

    eps = torch.randn(2, 10)
    state = enc(sents, eps=eps)
    assert torch.equal(state.h0, mu + sigma * eps)

    g1 = torch.Generator().manual_seed(42)
    g2 = torch.Generator().manual_seed(42)
    a = enc(sents, generator=g1)
    b = enc(sents, generator=g2)
    assert torch.equal(a.eps, b.eps) and torch.equal(a.h0, b.h0)


def test_story_encoder_uses_all_frames():
    torch.manual_seed(2)
    enc = StoryEncoder(TextConfig(word_dim=6, sent_dim=4, cond_dim=8), story_len=4)
    sents = torch.randn(1, 4, 4)
    mu, _ = enc.moments(sents)
    bumped = sents.clone()
    bumped[0, 3] += 1.0
    mu2, _ = enc.moments(bumped)
    assert not torch.equal(mu, mu2), "conditioning must read the full story"
