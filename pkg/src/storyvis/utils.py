"""Shared plumbing: seeding, checksums, batch conversion, grid export."""

import hashlib

import numpy as np
import torch
from PIL import Image

from .data.dataset import frames_to_uint8


def set_seed(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def parameter_checksum(module: torch.nn.Module, include_buffers=False) -> str:
    """Order-stable digest of learnable parameters (optionally buffers too).

    Buffers are excluded by default: BatchNorm running statistics move on any
    forward pass in train mode, which is not a parameter update.
    """
    h = hashlib.sha256()
    items = sorted(module.state_dict().items()) if include_buffers \
        else sorted(module.named_parameters())
    for name, tensor in items:
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def story_batch(dataset, indices):
    """Stack stories `indices` into training tensors.

    frames come out as (B, T, 3, H, W) float32 in [-1, 1] (channels-first
    for conv stacks); token ids/masks as (B, T, L); labels (B, T, C).
    """
    stories = [dataset.stories[i] for i in indices]
    frames = torch.from_numpy(
        np.stack([s.frames for s in stories])).permute(0, 1, 4, 2, 3).contiguous()
    return {
        "story_ids": [s.story_id for s in stories],
        "frames": frames,
        "token_ids": torch.from_numpy(np.stack([s.token_ids for s in stories])),
        "token_mask": torch.from_numpy(np.stack([s.token_mask for s in stories])),
        "labels": torch.from_numpy(np.stack([s.char_labels for s in stories])),
        "captions": [s.captions for s in stories],
    }


def tensor_to_frames(images: torch.Tensor) -> np.ndarray:
    """(T, 3, H, W) or (B, T, 3, H, W) in [-1,1] -> channels-last float array."""
    arr = images.detach().cpu().numpy()
    return np.moveaxis(arr, -3, -1)


def save_image_grid(path, rows, pad=2):
    """Write rows of frames as one PNG; `rows` is a list of (T, H, W, 3) arrays.

    One story per row, frames left to right; rows may come from different
    sources (ground truth above generated, the usual comparison layout).
    """
    rows = [frames_to_uint8(np.asarray(r)) for r in rows]
    t = max(r.shape[0] for r in rows)
    h, w = rows[0].shape[1:3]
    canvas = np.zeros((len(rows) * (h + pad) - pad, t * (w + pad) - pad, 3),
                      dtype=np.uint8)
    for i, row in enumerate(rows):
        for k in range(row.shape[0]):
            y, x = i * (h + pad), k * (w + pad)
            canvas[y:y + h, x:x + w] = row[k]
    Image.fromarray(canvas).save(path)
    return path
