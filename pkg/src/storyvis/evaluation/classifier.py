"""Multi-label character classifier and the F1 / exact-match metrics.

Trained from scratch on ground-truth frames (a small conv net is enough at
this image size), then frozen. Its penultimate features double as the
feature space for the discriminative ranking metric.
"""

import numpy as np
import torch
import torch.nn as nn

from ..utils import story_batch


class CharClassifier(nn.Module):
    def __init__(self, image_size, num_chars, base=32):
        super().__init__()
        blocks, cin, size = [], 3, image_size
        ch = base
        while size > 4:
            blocks += [nn.Conv2d(cin, ch, 4, stride=2, padding=1),
                       nn.GroupNorm(8, ch), nn.LeakyReLU(0.2, inplace=True)]
            cin, ch, size = ch, min(ch * 2, 4 * base), size // 2
        self.tower = nn.Sequential(*blocks)
        self.feat_dim = cin
        self.head = nn.Linear(cin, num_chars)
        self._frozen = False

    def features(self, images):
        """Penultimate pooled features, used for cosine ranking."""
        return self.tower(images).mean(dim=(2, 3))

    def forward(self, images):
        return self.head(self.features(images))

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
            raise RuntimeError("classifier is frozen")
        return super().train(mode)


def train_char_classifier(train_ds, val_ds, pre_cfg, image_size, num_chars,
                          seed=0, log=None) -> CharClassifier:
    """Per-frame BCE training; returns the classifier frozen."""
    if len(train_ds.stories) == 0:
        raise ValueError("cannot train the classifier on an empty dataset")
    gen = torch.Generator().manual_seed(seed)
    clf = CharClassifier(image_size, num_chars)
    opt = torch.optim.Adam(clf.parameters(), lr=pre_cfg.classifier_lr)
    frames, labels = _all_frames(train_ds)
    for epoch in range(pre_cfg.classifier_epochs):
        order = torch.randperm(frames.shape[0], generator=gen)
        total, count = 0.0, 0
        for start in range(0, frames.shape[0], pre_cfg.classifier_batch):
            idx = order[start:start + pre_cfg.classifier_batch]
            loss = nn.functional.binary_cross_entropy_with_logits(
                clf(frames[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total, count = total + float(loss.detach()), count + 1
        if log:
            vf, vem, _ = evaluate_on_dataset(clf, val_ds)
            log(f"classifier epoch {epoch}: train BCE {total / max(count, 1):.4f} "
                f"val F1 {vf:.2f} EM {vem:.2f}")
    return clf.freeze()


def _all_frames(ds):
    frames = np.concatenate([s.frames for s in ds.stories])
    labels = np.concatenate([s.char_labels for s in ds.stories])
    return (torch.from_numpy(frames).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(labels))


def micro_f1_counts(pred, labels):
    """Pooled TP/FP/FN micro-F1 (as a percentage) from boolean arrays."""
    pred = np.asarray(pred, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    denom = 2 * tp + fp + fn
    return 100.0 * 2 * tp / denom if denom else 0.0


def _per_class_f1(pred, labels):
    out = []
    for c in range(labels.shape[1]):
        out.append(micro_f1_counts(pred[:, c:c + 1], labels[:, c:c + 1]))
    return out


def evaluate_characters(classifier: CharClassifier, images, labels,
                        threshold=0.5, batch_size=64):
    """(micro_f1, exact_match, per_character_f1), all as percentages.

    images: (M, 3, H, W) in [-1,1]; labels: (M, num_chars) in {0,1}.
    exact_match is the fraction of frames whose full prediction vector
    equals the label vector.
    """
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} frames but {labels.shape[0]} label rows")
    preds = predict_characters(classifier, images, threshold, batch_size)
    labels = np.asarray(labels, dtype=bool)
    micro = micro_f1_counts(preds, labels)
    em = 100.0 * float(np.mean(np.all(preds == labels, axis=1)))
    return micro, em, _per_class_f1(preds, labels)


@torch.no_grad()
def predict_characters(classifier, images, threshold=0.5, batch_size=64):
    outs = []
    for start in range(0, images.shape[0], batch_size):
        logits = classifier(images[start:start + batch_size])
        outs.append((torch.sigmoid(logits) >= threshold).cpu().numpy())
    return np.concatenate(outs)


def evaluate_on_dataset(classifier, ds, threshold=0.5):
    frames, labels = _all_frames(ds)
    return evaluate_characters(classifier, frames, labels.numpy(), threshold)


@torch.no_grad()
def validation_char_f1(classifier, generator, ds, limit=32, seed=0):
    """Micro-F1 of the classifier on freshly generated frames (checkpoint
    selection signal during training)."""
    n = min(limit, len(ds.stories))
    batch = story_batch(ds, list(range(n)))
    frames = generator.generate_story(batch["token_ids"], batch["token_mask"],
                                      seed=seed)
    images = torch.stack([f.image for f in frames], dim=1).flatten(0, 1)
    labels = batch["labels"].flatten(0, 1).numpy()
    micro, _, _ = evaluate_characters(classifier, images, labels, threshold=0.5)
    return micro


def save_classifier(path, clf: CharClassifier, image_size, num_chars):
    torch.save({"header": {"image_size": image_size, "num_chars": num_chars,
                           "feat_dim": clf.feat_dim},
                "state_dict": clf.state_dict()}, path)
    return path


def load_classifier(path, image_size, num_chars) -> CharClassifier:
    from ..config import ConfigError
    blob = torch.load(path, map_location="cpu", weights_only=False)
    header = blob.get("header", {})
    if header.get("image_size") != image_size or header.get("num_chars") != num_chars:
        raise ConfigError(f"classifier snapshot at {path} does not match the config")
    clf = CharClassifier(image_size, num_chars)
    clf.load_state_dict(blob["state_dict"])
    return clf.freeze()
