"""The three task objectives: masked reconstruction, classification, trimap segmentation.

Trimap labels use {0 = foreground, 1 = background, 2 = unknown} everywhere
in memory; the unknown/boundary band is trained and scored as a full third
class. All heads are single affine maps on top of encoder features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import TOKEN_INIT_STD, ModelConfig, _init_affine

NUM_CLASSES = 6
NUM_TRIMAP_CLASSES = 3
DEFAULT_MASK_RATIO = 0.5


@dataclass
class MaskPattern:
    """Boolean patch mask with its target masking fraction."""

    mask: np.ndarray
    ratio: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


def sample_mask(rng: np.random.Generator, num_patches: int, ratio: float) -> MaskPattern:
    """Draw round(ratio * num_patches) masked positions uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    k = round(ratio * num_patches)
    mask = np.zeros(num_patches, dtype=bool)
    if k:
        mask[rng.choice(num_patches, size=k, replace=False)] = True
    return MaskPattern(mask, ratio)


def stack_masks(patterns) -> np.ndarray:
    """(B, num_patches) bool array from a list of MaskPattern."""
    return np.stack([p.mask for p in patterns])


class ReconHead(nn.Module):
    """Linear pixel-prediction head for masked patches.

    Also owns the learned token substituted at masked patch positions during
    masked encoding; both are trained jointly with the backbone and are
    discarded before any downstream stage.
    """

    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        self.proj = nn.Linear(config.dim, config.patch_dim)
        self.mask_token = nn.Parameter(torch.empty(config.dim))
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        _init_affine(self.proj, generator)
        self.mask_token.data.normal_(0.0, TOKEN_INIT_STD, generator=generator)

    def forward(self, features):
        return self.proj(features[..., 1:, :])


class ClsHead(nn.Module):
    """Affine classification head on the class-token row."""

    def __init__(self, config: ModelConfig, num_classes: int = NUM_CLASSES, generator=None):
        super().__init__()
        self.proj = nn.Linear(config.dim, num_classes)
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        _init_affine(self.proj, generator)

    def forward(self, features):
        return self.proj(features[..., 0, :])


class SegHead(nn.Module):
    """Affine per-patch head predicting patch_size x patch_size x 3 class logits."""

    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        self.patch_size = config.patch_size
        self.proj = nn.Linear(config.dim, config.patch_size**2 * NUM_TRIMAP_CLASSES)
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        _init_affine(self.proj, generator)

    def forward(self, features):
        return self.proj(features[..., 1:, :])


def mim_loss(pred, target, mask):
    """Mean absolute error over the pixels of masked patches only.

    ``pred`` and ``target`` are (..., num_patches, patch_dim); ``mask`` is a
    MaskPattern, a bool vector, or a (..., num_patches) batch of bool
    vectors. Unmasked patches contribute nothing, bit-exactly.
    """
    if isinstance(mask, MaskPattern):
        mask = mask.mask
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool, device=pred.device)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if mask.shape != pred.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match patches {tuple(pred.shape[:-1])}")
    if not bool(mask.any()):
        raise ValueError("mask selects no patches; masked mean is undefined")
    return (pred[mask] - target[mask]).abs().mean()


def classify_loss(features, head: ClsHead, labels):
    """Softmax cross-entropy of the class-token row against integer labels."""
    logits = head(features)
    squeeze = logits.dim() == 1
    if squeeze:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long, device=logits.device).reshape(-1)
    n = logits.shape[-1]
    if bool((labels < 0).any()) or bool((labels >= n).any()):
        raise ValueError(f"labels must lie in [0, {n}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def assemble_patch_grid(values, patch_size: int):
    """Reassemble per-patch value vectors into a full image grid.

    ``values`` is (..., num_patches, patch_size**2 * K) with each vector laid
    out as (py, px, K); the result is (..., H, W, K) with H = W =
    grid_size * patch_size. Patch p lands at grid cell (p // g, p % g), and
    pixel (py, px) of a patch keeps its row-major position, matching
    :func:`stagedvit.backbone.patchify`.
    """
    squeeze = values.dim() == 2
    if squeeze:
        values = values.unsqueeze(0)
    b, n, d = values.shape
    p = patch_size
    k = d // (p * p)
    if k * p * p != d:
        raise ValueError(f"vector length {d} is not a multiple of {p}x{p}")
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    out = (
        values.view(b, g, g, p, p, k)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, g * p, g * p, k)
    )
    return out.squeeze(0) if squeeze else out


def disassemble_patch_grid(grid, patch_size: int):
    """Inverse of :func:`assemble_patch_grid`."""
    squeeze = grid.dim() == 3
    if squeeze:
        grid = grid.unsqueeze(0)
    b, h, w, k = grid.shape
    p = patch_size
    if h != w or h % p != 0:
        raise ValueError(f"grid of shape {h}x{w} not square or not divisible by patch size {p}")
    g = h // p
    out = (
        grid.view(b, g, p, g, p, k)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, g * g, p * p * k)
    )
    return out.squeeze(0) if squeeze else out


def segment_logits(features, head: SegHead):
    """Per-pixel class logits, (..., H, W, 3), assembled from patch rows."""
    return assemble_patch_grid(head(features), head.patch_size)


def segment_loss(logits, truth):
    """Mean per-pixel softmax cross-entropy over all pixels and all 3 classes."""
    squeeze = logits.dim() == 3
    if squeeze:
        logits = logits.unsqueeze(0)
    truth = torch.as_tensor(np.asarray(truth), dtype=torch.long, device=logits.device)
    if squeeze and truth.dim() == 2:
        truth = truth.unsqueeze(0)
    if truth.shape != logits.shape[:-1]:
        raise ValueError(f"truth shape {tuple(truth.shape)} != logit grid {tuple(logits.shape[:-1])}")
    if bool((truth < 0).any()) or bool((truth >= NUM_TRIMAP_CLASSES).any()):
        raise ValueError("trimap labels must lie in {0, 1, 2}")
    return F.cross_entropy(logits.permute(0, 3, 1, 2), truth)


def predict_trimap(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return np.argmax(logits, axis=-1).astype(np.uint8)
