"""Image and story discriminators plus the adversarial loss formulas.

The image discriminator judges one frame against its sentence and the story
conditioning vector (local consistency) and carries a multi-label character
head. The story discriminator sees all T frames and the full caption
sequence (global consistency).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig

EPS = 1e-8


@dataclass
class DiscOutput:
    prob: torch.Tensor         # (B,) in (0,1)
    char_logits: torch.Tensor  # (B, num_chars)


def down_block(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


def _tower(image_size, base):
    """Stride-2 stack from image_size down to a 4x4 map."""
    blocks, cin, size = [], 3, image_size
    ch = base
    first = True
    while size > 4:
        blocks.append(down_block(cin, ch, norm=not first))
        cin, ch, size, first = ch, ch * 2, size // 2, False
    return nn.Sequential(*blocks), cin


class ImageDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tower, feat_ch = _tower(
            cfg.generator.image_size, cfg.discriminator.base_channels)
        cond_dim = cfg.text.sent_dim + cfg.text.cond_dim
        self.joint = nn.Sequential(
            nn.Conv2d(feat_ch + cond_dim, feat_ch, 1, bias=False),
            nn.BatchNorm2d(feat_ch),
            nn.LeakyReLU(0.2, inplace=True))
        self.score = nn.Conv2d(feat_ch, 1, 4)
        # character head reads the image-only features: labels are a property
        # of the frame, not of the caption pairing
        self.char_head = nn.Linear(feat_ch, cfg.num_chars)

    def forward(self, image, s_k, h0) -> DiscOutput:
        feats = self.tower(image)                             # (B, C, 4, 4)
        cond = torch.cat([s_k, h0], dim=-1)
        cond = cond[:, :, None, None].expand(-1, -1, feats.shape[2], feats.shape[3])
        joint = self.joint(torch.cat([feats, cond], dim=1))
        prob = torch.sigmoid(self.score(joint).flatten(1)).squeeze(-1)
        char_logits = self.char_head(feats.mean(dim=(2, 3)))
        return DiscOutput(prob=prob, char_logits=char_logits)


class StoryDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.story_len = cfg.story_len
        self.tower, feat_ch = _tower(
            cfg.generator.image_size, cfg.discriminator.base_channels)
        self.frame_pool = nn.Conv2d(feat_ch, feat_ch, 4)      # 4x4 -> 1x1
        self.text_proj = nn.Linear(cfg.text.sent_dim * cfg.story_len, feat_ch)
        self.score = nn.Sequential(
            nn.Linear(feat_ch * cfg.story_len + feat_ch, feat_ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(feat_ch, 1))

    def forward(self, frames, sents) -> torch.Tensor:
        """frames (B,T,3,H,W), sents (B,T,d_s) -> prob (B,)."""
        b, t = frames.shape[:2]
        if t != self.story_len:
            raise ValueError(f"story discriminator expects T={self.story_len}, got {t}")
        feats = self.frame_pool(self.tower(frames.flatten(0, 1))).flatten(1)
        feats = feats.view(b, -1)                             # time-ordered concat
        text = self.text_proj(sents.reshape(b, -1))
        return torch.sigmoid(self.score(torch.cat([feats, text], dim=-1))).squeeze(-1)


def _log(p):
    return torch.log(p.clamp(min=EPS))


def generator_adv_loss(d_img_fake, d_story_fake):
    """-1/2 E[log D_img(fake)] - 1/2 E[log D_story(fake)]."""
    return -0.5 * _log(d_img_fake).mean() - 0.5 * _log(d_story_fake).mean()


def disc_adv_loss(real_probs, fake_probs):
    """-1/2 E[log D(real)] - 1/2 E[log(1 - D(fake))]."""
    return -0.5 * _log(real_probs).mean() - 0.5 * _log(1.0 - fake_probs).mean()


def char_bce_loss(char_logits, char_labels):
    """Multi-label BCE, mean over (sample, character) decisions."""
    return nn.functional.binary_cross_entropy_with_logits(
        char_logits, char_labels)


def discriminator_losses(img_real, img_fake, story_real, story_fake,
                         char_logits, char_labels):
    """(L_D_img, L_D_story, L_char); char BCE on real frames only."""
    return (disc_adv_loss(img_real, img_fake),
            disc_adv_loss(story_real, story_fake),
            char_bce_loss(char_logits, char_labels))
