"""Small pre-norm vision transformer encoder with exact parameter accounting.

The encoder turns a batch of images into one feature row per patch plus a
class-token row. Task heads (reconstruction, classification, segmentation)
live in :mod:`stagedvit.objectives` and consume these rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteError

TOKEN_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The defaults are the 4.8M-parameter configuration used throughout:
    128px RGB inputs cut into 16px patches (64 patches, each flattened to
    16*16*3 = 768 values), embedding width 128, 12 pre-norm encoder blocks
    with 8 attention heads of width 64, and a 512-wide MLP.
    """

    image_size: int = 128
    patch_size: int = 16
    dim: int = 128
    depth: int = 12
    heads: int = 8
    head_dim: int = 64
    mlp_dim: int = 512
    channels: int = 3

    def __post_init__(self):
        for name in ("image_size", "patch_size", "dim", "heads", "head_dim", "mlp_dim", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1


def patchify(images, patch_size):
    """Cut images into row-major patch vectors.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)`` tensors with H == W divisible
    by ``patch_size`` and returns ``(num_patches, patch_dim)`` or
    ``(B, num_patches, patch_dim)``. Patches are ordered row-major over the
    patch grid; within a patch the flattening is channel-major, i.e. entry
    ``c*p*p + py*p + px`` holds channel ``c`` of pixel ``(py, px)``.
    """
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    if images.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    b, c, h, w = images.shape
    p = patch_size
    if h != w or h % p != 0:
        raise ValueError(f"image of shape {h}x{w} not square or not divisible by patch size {p}")
    g = h // p
    out = (
        images.view(b, c, g, p, g, p)
        .permute(0, 2, 4, 1, 3, 5)
        .reshape(b, g * g, c * p * p)
    )
    return out.squeeze(0) if squeeze else out


def unpatchify(patches, patch_size, channels=3):
    """Inverse of :func:`patchify`; bit-exact because both are pure reshuffles."""
    squeeze = patches.dim() == 2
    if squeeze:
        patches = patches.unsqueeze(0)
    b, n, d = patches.shape
    p = patch_size
    c = channels
    if d != c * p * p:
        raise ValueError(f"patch vectors of length {d} do not match {c}x{p}x{p}")
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    out = (
        patches.view(b, g, g, c, p, p)
        .permute(0, 3, 1, 4, 2, 5)
        .reshape(b, c, g * p, g * p)
    )
    return out.squeeze(0) if squeeze else out


def _init_affine(linear, generator):
    fan_in = linear.weight.shape[1]
    std = fan_in**-0.5
    nn.init.trunc_normal_(linear.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)


class EncoderBlock(nn.Module):
    """Pre-norm residual block: attention then MLP.

    The qkv projection carries no additive term; the output projection and
    both MLP maps do.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.attn_norm = nn.LayerNorm(config.dim)
        self.qkv_proj = nn.Linear(config.dim, 3 * config.inner_dim, bias=False)
        self.out_proj = nn.Linear(config.inner_dim, config.dim)
        self.mlp_norm = nn.LayerNorm(config.dim)
        self.mlp_in = nn.Linear(config.dim, config.mlp_dim)
        self.mlp_out = nn.Linear(config.mlp_dim, config.dim)

    def reset_parameters(self, generator=None):
        for layer in (self.qkv_proj, self.out_proj, self.mlp_in, self.mlp_out):
            _init_affine(layer, generator)
        for norm in (self.attn_norm, self.mlp_norm):
            nn.init.ones_(norm.weight)
            nn.init.zeros_(norm.bias)

    def forward(self, x):
        b, n, _ = x.shape
        h = self.attn_norm(x)
        q, k, v = self.qkv_proj(h).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        out = scores.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim)
        x = x + self.out_proj(out)
        h = self.mlp_norm(x)
        return x + self.mlp_out(F.gelu(self.mlp_in(h)))


class VisionEncoder(nn.Module):
    """Maps ``(B, C, H, W)`` images to ``(B, num_patches + 1, dim)`` features.

    Row 0 of the output is the class-token row; rows 1.. are patch rows in
    row-major patch order. When patch masks are given, the embedded vectors
    at masked positions are replaced by a learned mask token before the
    positional embedding is added, so masked pixel content never reaches the
    encoder blocks.
    """

    def __init__(self, config: ModelConfig | None = None, generator=None):
        super().__init__()
        config = config if config is not None else ModelConfig()
        self.config = config
        self.patch_norm_in = nn.LayerNorm(config.patch_dim)
        self.patch_proj = nn.Linear(config.patch_dim, config.dim)
        self.patch_norm_out = nn.LayerNorm(config.dim)
        self.pos_embed = nn.Parameter(torch.empty(config.num_tokens, config.dim))
        self.cls_token = nn.Parameter(torch.empty(config.dim))
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.depth))
        self.final_norm = nn.LayerNorm(config.dim)
        # data-dependent control flow; turn off when tracing/batching the forward
        self.check_finite = True
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        _init_affine(self.patch_proj, generator)
        for norm in (self.patch_norm_in, self.patch_norm_out, self.final_norm):
            nn.init.ones_(norm.weight)
            nn.init.zeros_(norm.bias)
        self.pos_embed.data.normal_(0.0, TOKEN_INIT_STD, generator=generator)
        self.cls_token.data.normal_(0.0, TOKEN_INIT_STD, generator=generator)
        for block in self.blocks:
            block.reset_parameters(generator)

    def forward(self, images, masks=None, mask_token=None):
        cfg = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected images of shape (B, {cfg.channels}, {cfg.image_size}, "
                f"{cfg.image_size}), got {tuple(images.shape)}"
            )
        x = patchify(images, cfg.patch_size)
        x = self.patch_norm_out(self.patch_proj(self.patch_norm_in(x)))
        if masks is not None:
            if mask_token is None:
                raise ValueError("masks given without a mask token")
            masks = torch.as_tensor(masks, dtype=torch.bool, device=x.device)
            if masks.shape != (images.shape[0], cfg.num_patches):
                raise ValueError(
                    f"expected masks of shape ({images.shape[0]}, {cfg.num_patches}), "
                    f"got {tuple(masks.shape)}"
                )
            x = torch.where(masks.unsqueeze(-1), mask_token.to(x.dtype), x)
        cls = self.cls_token.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        if self.check_finite and not torch.isfinite(x).all():
            raise NonFiniteError("encoder output", f"input batch of {images.shape[0]}")
        return x

    def encode(self, images):
        return self(images)

    def encode_masked(self, images, masks, mask_token):
        return self(images, masks=masks, mask_token=mask_token)


def count_parameters(module) -> int:
    """Exact number of learnable scalars in ``module``.

    For a :class:`VisionEncoder` this equals, component by component (with
    pd = patch_dim, d = dim, a = heads*head_dim, m = mlp_dim,
    n = num_patches)::

        patch embedding   2*pd + (pd*d + d) + 2*d
        positions         (n + 1) * d
        class token       d
        per block         2*d + d*3*a + (a*d + d) + 2*d + (d*m + m) + (m*d + d)
        final norm        2*d

    Defaults: 100224 + 8320 + 128 + 12*394496 + 256 = 4842880.
    """
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def gradients(loss, named_params):
    """Backpropagate ``loss`` and return gradients keyed by parameter path.

    ``named_params`` is an iterable of ``(path, parameter)`` pairs, e.g.
    ``model.named_parameters()``. Parameters the loss does not touch get
    zero gradients. Raises :class:`NonFiniteError` naming the first
    offending path if any gradient is non-finite.
    """
    named = list(named_params)
    tensors = [p for _, p in named]
    if loss.requires_grad:
        raw = torch.autograd.grad(loss, tensors, allow_unused=True)
    else:
        raw = [None] * len(tensors)
    out = {}
    for (name, p), g in zip(named, raw):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")
        out[name] = g
    return out
