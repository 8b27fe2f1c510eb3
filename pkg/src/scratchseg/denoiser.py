"""Conditional U-Net noise predictor for the recursive denoising chain.

The network sees four things: the noisy mask state, the step index, the raw
image, and the running clean-mask estimate (the "prior").  Image and prior
are fused into condition features once, at full resolution, with no step
dependence; the fused features join the noisy-state features ahead of the
encoder/decoder trunk.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "DenoiserConfig",
    "Denoiser",
    "build_denoiser",
    "predict_noise",
    "sinusoidal_time_basis",
]


def sinusoidal_time_basis(t, dim: int) -> torch.Tensor:
    """Interleaved sin/cos embedding of integer step indices.

    Frequencies fall geometrically from 1 to 1/10000; entry ``2i`` is
    ``sin(t * f_i)`` and entry ``2i + 1`` is ``cos(t * f_i)``, so ``t == 0``
    maps to ``[0, 1, 0, 1, ...]``.  Returns shape ``t.shape + (dim,)``.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    tt = torch.as_tensor(t, dtype=torch.float64)
    if bool((tt < 0).any()):
        raise ValueError("step indices must be non-negative")
    half = dim // 2
    exponents = torch.arange(half, dtype=torch.float64) / half
    freqs = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -exponents)
    angles = tt[..., None] * freqs
    out = torch.empty(tt.shape + (dim,), dtype=torch.float64)
    out[..., 0::2] = torch.sin(angles)
    out[..., 1::2] = torch.cos(angles)
    return out


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; every knob the tests and trainer touch."""

    base_channels: int = 32
    depth: int = 4
    channel_mults: Optional[tuple] = None
    res_blocks: int = 1
    attention_scales: Optional[tuple] = None
    time_embed_dim: Optional[int] = None
    image_channels: int = 1
    cond_blocks: int = 2
    prior_norm_affine: bool = False

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.res_blocks < 1:
            raise ValueError(f"res_blocks must be >= 1, got {self.res_blocks}")
        if self.cond_blocks < 1:
            raise ValueError(f"cond_blocks must be >= 1, got {self.cond_blocks}")
        if self.image_channels < 1:
            raise ValueError(f"image_channels must be >= 1, got {self.image_channels}")
        mults = self.channel_mults
        if mults is None:
            mults = tuple(2**i for i in range(self.depth))
        mults = tuple(int(m) for m in mults)
        if len(mults) != self.depth:
            raise ValueError(
                f"channel_mults must have one entry per scale ({self.depth}), got {mults}"
            )
        if any(m < 1 for m in mults):
            raise ValueError(f"channel multipliers must be >= 1, got {mults}")
        object.__setattr__(self, "channel_mults", mults)
        scales = self.attention_scales
        if scales is None:
            scales = (self.depth - 1,)
        scales = tuple(sorted(set(int(s) for s in scales)))
        if any(s < 0 or s >= self.depth for s in scales):
            raise ValueError(
                f"attention_scales must lie in [0, {self.depth - 1}], got {scales}"
            )
        object.__setattr__(self, "attention_scales", scales)
        dim = self.time_embed_dim
        if dim is None:
            dim = 4 * self.base_channels
            dim += dim % 2
        if dim < 2 or dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be a positive even integer, got {dim}")
        object.__setattr__(self, "time_embed_dim", int(dim))

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.depth - 1)


def _norm_groups(channels: int) -> int:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return groups
    return 1


class _ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv x2 with an optional additive step embedding."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        if self.time_proj is not None:
            if temb is None:
                raise ValueError("this block requires a time embedding")
            h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class _SelfAttention2d(nn.Module):
    """Single-head dot-product self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Noise predictor conditioned on the image and the running mask estimate.

    The prior is embedded, GroupNorm-standardized, and applied as a
    multiplicative modulation (``1 + g``) of the image features, so an
    all-zero prior passes the image features through unchanged.  The fused
    condition is refined by residual blocks that never see the step index,
    then added to the noisy-state features entering the U-Net trunk.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        tdim = config.time_embed_dim

        def stem(in_ch):
            return nn.Sequential(
                nn.Conv2d(in_ch, ch, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(ch, ch, 3, padding=1),
            )

        self.image_stem = stem(config.image_channels)
        self.prior_stem = stem(1)
        self.prior_norm = nn.GroupNorm(
            _norm_groups(ch), ch, affine=config.prior_norm_affine
        )
        self.cond_trunk = nn.ModuleList(
            _ResidualBlock(ch, ch) for _ in range(config.cond_blocks)
        )
        self.state_stem = stem(1)

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )

        mults = config.channel_mults
        attn_at = set(config.attention_scales)
        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        skip_channels = [ch]
        cur = ch
        for s in range(config.depth):
            out_ch = ch * mults[s]
            for _ in range(config.res_blocks):
                self.enc_blocks.append(_ResidualBlock(cur, out_ch, tdim))
                self.enc_attn.append(
                    _SelfAttention2d(out_ch) if s in attn_at else nn.Identity()
                )
                cur = out_ch
                skip_channels.append(cur)
            if s < config.depth - 1:
                self.downs.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                skip_channels.append(cur)

        self.mid_block1 = _ResidualBlock(cur, cur, tdim)
        self.mid_attn = _SelfAttention2d(cur)
        self.mid_block2 = _ResidualBlock(cur, cur, tdim)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for s in reversed(range(config.depth)):
            out_ch = ch * mults[s]
            for _ in range(config.res_blocks + 1):
                self.dec_blocks.append(
                    _ResidualBlock(cur + skip_channels.pop(), out_ch, tdim)
                )
                self.dec_attn.append(
                    _SelfAttention2d(out_ch) if s in attn_at else nn.Identity()
                )
                cur = out_ch
            if s > 0:
                self.ups.append(nn.Conv2d(cur, cur, 3, padding=1))

        self.out_norm = nn.GroupNorm(_norm_groups(cur), cur)
        self.out_conv = nn.Conv2d(cur, 1, 3, padding=1)

    def condition_features(self, image: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        """Fuse image and prior into step-independent condition features."""
        if image.shape[-2:] != prior.shape[-2:]:
            raise ValueError(
                f"prior spatial shape {tuple(prior.shape[-2:])} must match "
                f"image spatial shape {tuple(image.shape[-2:])}"
            )
        gate = self.prior_norm(self.prior_stem(prior))
        h = self.image_stem(image) * (1.0 + gate)
        for block in self.cond_trunk:
            h = block(h)
        return h

    def forward(self, noisy, t, image, prior):
        if noisy.ndim != 4 or noisy.shape[1] != 1:
            raise ValueError(f"noisy state must be (B, 1, H, W), got {tuple(noisy.shape)}")
        if prior.shape != noisy.shape:
            raise ValueError(
                f"prior shape {tuple(prior.shape)} must match noisy state "
                f"{tuple(noisy.shape)}"
            )
        if (
            image.ndim != 4
            or image.shape[0] != noisy.shape[0]
            or image.shape[1] != self.config.image_channels
            or image.shape[2:] != noisy.shape[2:]
        ):
            raise ValueError(
                f"image must be (B, {self.config.image_channels}, H, W) matching the "
                f"state, got {tuple(image.shape)}"
            )
        factor = self.config.downsample_factor
        if noisy.shape[2] % factor or noisy.shape[3] % factor:
            raise ValueError(
                f"spatial dims {tuple(noisy.shape[2:])} must be divisible by {factor}"
            )
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(noisy.shape[0])
        if t.shape != (noisy.shape[0],):
            raise ValueError(f"t must have shape ({noisy.shape[0]},), got {tuple(t.shape)}")
        if torch.any(t < 0):
            raise ValueError("step indices must be non-negative")

        dtype = self.out_conv.weight.dtype
        temb = self.time_mlp(sinusoidal_time_basis(t, self.config.time_embed_dim).to(dtype))
        cond = self.condition_features(image, prior)
        h = self.state_stem(noisy) + cond

        skips = [h]
        enc_iter = iter(zip(self.enc_blocks, self.enc_attn))
        down_iter = iter(self.downs)
        for s in range(self.config.depth):
            for _ in range(self.config.res_blocks):
                block, attn = next(enc_iter)
                h = attn(block(h, temb))
                skips.append(h)
            if s < self.config.depth - 1:
                h = next(down_iter)(h)
                skips.append(h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)

        dec_iter = iter(zip(self.dec_blocks, self.dec_attn))
        up_iter = iter(self.ups)
        for s in reversed(range(self.config.depth)):
            for _ in range(self.config.res_blocks + 1):
                block, attn = next(dec_iter)
                h = attn(block(torch.cat([h, skips.pop()], dim=1), temb))
            if s > 0:
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = next(up_iter)(h)

        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    """Construct a ``Denoiser`` with parameters initialized from ``seed`` alone."""
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        return Denoiser(config)


def _module_dtype(denoiser) -> Optional[torch.dtype]:
    if isinstance(denoiser, nn.Module):
        for p in denoiser.parameters():
            return p.dtype
    return None


def predict_noise(denoiser, x_t, t, image, prior) -> torch.Tensor:
    """Evaluate a denoiser on one state or a batch of states.

    Accepts ``x_t``/``prior`` as (H, W) or (N, H, W), ``image`` as (H, W),
    (C, H, W), or (N, C, H, W) (a single image is shared across the batch),
    and ``t`` as one step index or one per state.  Returns the predicted
    noise shaped like ``x_t``.  Differentiable; callers wanting a frozen
    evaluation wrap it in ``torch.no_grad()``.
    """
    x = x_t if isinstance(x_t, torch.Tensor) else torch.as_tensor(np.asarray(x_t))
    if x.ndim == 2:
        batched = False
        x = x[None]
    elif x.ndim == 3:
        batched = True
    else:
        raise ValueError(f"x_t must be (H, W) or (N, H, W), got shape {tuple(x.shape)}")
    n = x.shape[0]

    p = prior if isinstance(prior, torch.Tensor) else torch.as_tensor(np.asarray(prior))
    if p.ndim == 2:
        p = p[None]
    if p.shape != x.shape:
        raise ValueError(
            f"prior shape {tuple(p.shape)} must match x_t shape {tuple(x.shape)}"
        )

    img = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image))
    if img.ndim == 2:
        img = img[None]
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4:
        raise ValueError(f"image must have 2-4 dims, got shape {tuple(img.shape)}")
    if img.shape[0] == 1 and n > 1:
        img = img.expand(n, *img.shape[1:])
    if img.shape[0] != n or img.shape[2:] != x.shape[1:]:
        raise ValueError(
            f"image shape {tuple(img.shape)} is incompatible with states {tuple(x.shape)}"
        )

    tt = torch.as_tensor(t)
    if tt.ndim == 0:
        tt = tt.expand(n)
    if tt.shape != (n,):
        raise ValueError(f"t must be one step or one per state, got shape {tuple(tt.shape)}")
    if torch.any(tt < 0):
        raise ValueError("step indices must be non-negative")

    dtype = _module_dtype(denoiser)
    if dtype is not None:
        x, p, img = x.to(dtype), p.to(dtype), img.to(dtype)
    out = denoiser(x[:, None], tt.long(), img, p[:, None])
    if out.shape != (n, 1, *x.shape[1:]):
        raise ValueError(f"denoiser returned unexpected shape {tuple(out.shape)}")
    out = out[:, 0]
    return out if batched else out[0]
