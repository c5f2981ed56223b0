"""Adversarial training: two discriminator updates, then two generator updates.

One step = one image-discriminator batch, one story-discriminator batch, and
two generator batches (each freshly sampled). The captioner participates
frozen, scoring generated frames only. All sampling and noise goes through
torch's global RNG so a checkpoint (which stores that RNG state) resumes the
exact stream.
"""

import json
import math
import os

import torch

from .captioner import VideoCaptioner, dual_loss
from .config import ConfigError, RunConfig, config_hash
from .discriminators import (ImageDiscriminator, StoryDiscriminator,
                             char_bce_loss, disc_adv_loss, generator_adv_loss)
from .generator import StoryGenerator
from .text import kl_loss
from .utils import story_batch


def lr_at_epoch(train_cfg, base_lr, epoch):
    """Step-decay schedule: base * factor^(epoch // decay_every)."""
    return base_lr * train_cfg.decay_factor ** (epoch // train_cfg.decay_every)


def is_checkpoint_epoch(train_cfg, epoch):
    """Epochs are 1-based here: the save happens after the epoch completes."""
    return epoch % train_cfg.checkpoint_every == 0


class Trainer:
    def __init__(self, cfg: RunConfig, train_ds, val_ds, captioner: VideoCaptioner,
                 out_dir, classifier=None, log=None):
        if not captioner.frozen:
            raise RuntimeError("trainer requires a frozen captioner")
        self.cfg = cfg
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.captioner = captioner
        self.classifier = classifier
        self.out_dir = out_dir
        self.log = log or (lambda msg: None)
        os.makedirs(out_dir, exist_ok=True)
        torch.manual_seed(cfg.train.seed)
        self.generator = StoryGenerator(cfg.model, len(train_ds.vocab))
        self.img_disc = ImageDiscriminator(cfg.model)
        self.story_disc = StoryDiscriminator(cfg.model)
        betas = tuple(cfg.train.adam_betas)
        self.opt_g = torch.optim.Adam(self.generator.parameters(),
                                      lr=cfg.train.lr_g, betas=betas)
        self.opt_di = torch.optim.Adam(self.img_disc.parameters(),
                                       lr=cfg.train.lr_d, betas=betas)
        self.opt_ds = torch.optim.Adam(self.story_disc.parameters(),
                                       lr=cfg.train.lr_d, betas=betas)
        self.step = 0
        self.counters = {"g_updates": 0, "d_img_updates": 0, "d_story_updates": 0}
        self.steps_per_epoch = max(1, len(train_ds.stories) // cfg.train.story_batch)
        self.last_activations = None

    # -- sampling ------------------------------------------------------------
    def _sample_batch(self, num_stories):
        idxs = torch.randint(len(self.train_ds.stories), (num_stories,)).tolist()
        return story_batch(self.train_ds, idxs)

    def _generate(self, batch, grad):
        """Run the generator on a story batch; detached when grad is False."""
        if grad:
            return self.generator(batch["token_ids"], batch["token_mask"])
        with torch.no_grad():
            return self.generator(batch["token_ids"], batch["token_mask"])

    def _flatten_frames(self, batch, frames, cond, limit):
        """Align (real, fake, s_k, h0, labels) per frame; keep first `limit`."""
        b, t = batch["frames"].shape[:2]
        _, sents = self.generator.embed_captions(batch["token_ids"],
                                                 batch["token_mask"])
        real = batch["frames"].flatten(0, 1)[:limit]
        fake = torch.stack([f.image for f in frames], dim=1).flatten(0, 1)[:limit]
        s = sents.flatten(0, 1)[:limit]
        h0 = cond.h0[:, None, :].expand(b, t, -1).flatten(0, 1)[:limit]
        labels = batch["labels"].flatten(0, 1)[:limit]
        return real, fake, s, h0, labels

    # -- one optimization step -----------------------------------------------
    def training_step(self, capture=False):
        cfg = self.cfg.train
        acts = {}

        # (a) image discriminator, with the character head on real frames
        n_stories = math.ceil(cfg.image_batch / self.train_ds.story_len)
        batch = self._sample_batch(n_stories)
        frames, cond, _ = self._generate(batch, grad=False)
        real, fake, s, h0, labels = self._flatten_frames(
            batch, frames, cond, cfg.image_batch)
        s, h0 = s.detach(), h0.detach()
        out_real = self.img_disc(real, s, h0)
        out_fake = self.img_disc(fake, s, h0)
        l_d_img = disc_adv_loss(out_real.prob, out_fake.prob)
        l_char = char_bce_loss(out_real.char_logits, labels)
        self.opt_di.zero_grad()
        (l_d_img + cfg.lambda_char * l_char).backward()
        self.opt_di.step()
        self.counters["d_img_updates"] += 1
        if capture:
            acts["img_real_probs"] = out_real.prob.detach()
            acts["img_fake_probs"] = out_fake.prob.detach()
            acts["char_logits"] = out_real.char_logits.detach()
            acts["char_labels"] = labels.detach()

        # (b) story discriminator
        batch = self._sample_batch(cfg.story_batch)
        frames, cond, _ = self._generate(batch, grad=False)
        _, sents = self.generator.embed_captions(batch["token_ids"],
                                                 batch["token_mask"])
        sents = sents.detach()
        fake_story = torch.stack([f.image for f in frames], dim=1)
        p_real = self.story_disc(batch["frames"], sents)
        p_fake = self.story_disc(fake_story, sents)
        l_d_story = disc_adv_loss(p_real, p_fake)
        self.opt_ds.zero_grad()
        l_d_story.backward()
        self.opt_ds.step()
        self.counters["d_story_updates"] += 1
        if capture:
            acts["story_real_probs"] = p_real.detach()
            acts["story_fake_probs"] = p_fake.detach()

        # (c) generator, twice, fresh batches
        l_kl = l_g_adv = l_dual = None
        for _ in range(cfg.g_updates):
            batch = self._sample_batch(cfg.story_batch)
            frames, cond, _ = self._generate(batch, grad=True)
            b, t = batch["frames"].shape[:2]
            _, sents = self.generator.embed_captions(batch["token_ids"],
                                                     batch["token_mask"])
            fake_story = torch.stack([f.image for f in frames], dim=1)
            fake_flat = fake_story.flatten(0, 1)
            s_flat = sents.flatten(0, 1)
            h0_flat = cond.h0[:, None, :].expand(b, t, -1).flatten(0, 1)
            img_probs = self.img_disc(fake_flat, s_flat, h0_flat).prob
            story_prob = self.story_disc(fake_story, sents)
            l_kl = kl_loss(cond)
            l_g_adv = generator_adv_loss(img_probs, story_prob)
            l_dual = dual_loss(self.captioner, fake_story,
                               batch["token_ids"], batch["token_mask"])
            self.opt_g.zero_grad()
            (l_kl + l_g_adv + cfg.lambda_dual * l_dual).backward()
            self.opt_g.step()
            self.counters["g_updates"] += 1
        if capture:
            acts["g_img_probs"] = img_probs.detach()
            acts["g_story_probs"] = story_prob.detach()
            acts["cond_mu"] = cond.mu.detach()
            acts["cond_sigma"] = cond.sigma.detach()
            self.last_activations = acts

        self.step += 1
        record = {
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "l_d_img": float(l_d_img.detach()),
            "l_char": float(l_char.detach()),
            "l_d_story": float(l_d_story.detach()),
            "l_kl": float(l_kl.detach()),
            "l_g_adv": float(l_g_adv.detach()),
            "l_dual": float(l_dual.detach()),
            "lr_g": self.opt_g.param_groups[0]["lr"],
            "lr_d": self.opt_di.param_groups[0]["lr"],
        }
        bad = [k for k in record if k.startswith("l_")
               and not math.isfinite(record[k])]
        if bad:
            snap = os.path.join(self.out_dir, "nan_diagnostic.pt")
            self.save_checkpoint(snap)
            raise RuntimeError(
                f"non-finite loss {bad} at step {self.step}; state dumped to {snap}")
        return record

    # -- schedule ------------------------------------------------------------
    def _apply_lr(self, epoch):
        self.opt_g.param_groups[0]["lr"] = lr_at_epoch(
            self.cfg.train, self.cfg.train.lr_g, epoch)
        for opt in (self.opt_di, self.opt_ds):
            opt.param_groups[0]["lr"] = lr_at_epoch(
                self.cfg.train, self.cfg.train.lr_d, epoch)

    def train(self, max_steps=None, loss_log_path=None):
        """Run the configured schedule; returns the list of loss records."""
        cfg = self.cfg.train
        total = cfg.epochs * self.steps_per_epoch
        if cfg.max_steps is not None:
            total = min(total, cfg.max_steps)
        if max_steps is not None:
            total = min(total, max_steps)
        loss_log_path = loss_log_path or os.path.join(self.out_dir, "losses.jsonl")
        if self.step == 0:
            self.save_checkpoint(os.path.join(self.out_dir, "checkpoint_untrained.pt"))
        records = []
        mode = "a" if self.step > 0 else "w"
        with open(loss_log_path, mode) as log_file:
            while self.step < total:
                self._apply_lr(self.step // self.steps_per_epoch)
                record = self.training_step()
                records.append(record)
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
                if self.step % self.steps_per_epoch == 0:
                    epoch = self.step // self.steps_per_epoch
                    self._end_of_epoch(epoch)
        self.save_checkpoint(os.path.join(self.out_dir, "checkpoint_final.pt"))
        return records

    def _end_of_epoch(self, epoch):
        if self.classifier is not None:
            from .evaluation.classifier import validation_char_f1
            f1 = validation_char_f1(self.classifier, self.generator, self.val_ds,
                                    limit=32, seed=0)
            self.log(f"epoch {epoch}: val char F1 {f1:.2f}")
            with open(os.path.join(self.out_dir, "val_f1.jsonl"), "a") as f:
                f.write(json.dumps({"epoch": epoch, "val_char_f1": f1}) + "\n")
        if is_checkpoint_epoch(self.cfg.train, epoch):
            self.save_checkpoint(
                os.path.join(self.out_dir, f"checkpoint_epoch{epoch:04d}.pt"))

    # -- checkpointing ---------------------------------------------------------
    def save_checkpoint(self, path):
        torch.save({
            "config_hash": config_hash(self.cfg),
            "vocab_hash": self.train_ds.vocab.content_hash(),
            "step": self.step,
            "counters": dict(self.counters),
            "generator": self.generator.state_dict(),
            "img_disc": self.img_disc.state_dict(),
            "story_disc": self.story_disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_di": self.opt_di.state_dict(),
            "opt_ds": self.opt_ds.state_dict(),
            "rng": torch.get_rng_state(),
        }, path)
        return path

    def load_checkpoint(self, path):
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob["config_hash"] != config_hash(self.cfg):
            raise ConfigError(
                f"checkpoint {path} was written under a different config "
                f"(hash {blob['config_hash']} != {config_hash(self.cfg)})")
        if blob["vocab_hash"] != self.train_ds.vocab.content_hash():
            raise ConfigError(f"checkpoint {path} uses a different vocabulary")
        self.generator.load_state_dict(blob["generator"])
        self.img_disc.load_state_dict(blob["img_disc"])
        self.story_disc.load_state_dict(blob["story_disc"])
        self.opt_g.load_state_dict(blob["opt_g"])
        self.opt_di.load_state_dict(blob["opt_di"])
        self.opt_ds.load_state_dict(blob["opt_ds"])
        self.step = blob["step"]
        self.counters = dict(blob["counters"])
        torch.set_rng_state(blob["rng"])
        return self


def load_generator(path, cfg: RunConfig, vocab) -> StoryGenerator:
    """Rebuild just the generator from a training checkpoint, for inference."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob["config_hash"] != config_hash(cfg):
        raise ConfigError(
            f"checkpoint {path} was written under a different config")
    if blob["vocab_hash"] != vocab.content_hash():
        raise ConfigError(f"checkpoint {path} uses a different vocabulary")
    gen = StoryGenerator(cfg.model, len(vocab))
    gen.load_state_dict(blob["generator"])
    gen.eval()
    return gen
