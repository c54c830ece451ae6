"""Desk-scale backbone: conv autoencoder, attention denoiser, hash text embedder.

It mirrors the layer naming of latent-diffusion checkpoints where it matters
(``conv_in``/``conv_out`` on the autoencoder, ``to_q``/``to_k``/``to_v``/
``to_out`` on the denoiser attention) so surgery and adapter injection run
the same code path on both.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class TinyConfig:
    image_size: int = 32
    pixel_channels: int = 3
    latent_channels: int = 4
    downsample: int = 4
    enc_width: int = 32
    den_width: int = 64
    embed_width: int = 32
    max_tokens: int = 12
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.downsample not in (1, 2, 4, 8):
            raise ValueError("downsample must be one of 1, 2, 4, 8")
        if self.image_size % self.downsample:
            raise ValueError("image_size must be divisible by downsample")


class HashTextEmbedder:
    """Deterministic word-hash embedding; no external text model needed.

    Each lower-cased word maps to a fixed unit-variance vector seeded by its
    BLAKE2 digest, plus a sinusoidal position code. Unused slots hold a
    dedicated padding vector, so the empty caption is a well-defined null
    conditioning.
    """

    def __init__(self, width: int = 32, max_tokens: int = 12):
        self.width = width
        self.max_tokens = max_tokens
        self._cache: dict[str, np.ndarray] = {}
        pos = np.arange(max_tokens)[:, None]
        freq = np.exp(-np.log(100.0) * np.arange(0, width, 2) / width)
        pe = np.zeros((max_tokens, width))
        pe[:, 0::2] = np.sin(pos * freq)
        pe[:, 1::2] = np.cos(pos * freq[: width // 2])
        self._pos = 0.3 * pe

    def _word(self, w: str) -> np.ndarray:
        v = self._cache.get(w)
        if v is None:
            seed = int.from_bytes(hashlib.blake2b(w.encode(), digest_size=8).digest(), "little")
            v = np.random.default_rng(seed).standard_normal(self.width)
            self._cache[w] = v
        return v

    def tokens(self, caption: str) -> list[str]:
        words = [w.strip(".,;:'\"()") for w in caption.lower().split()]
        words = [w for w in words if w][: self.max_tokens]
        return words + ["<pad>"] * (self.max_tokens - len(words))

    def __call__(self, caption: str) -> torch.Tensor:
        vecs = np.stack([self._word(w) for w in self.tokens(caption)]) + self._pos
        return torch.as_tensor(vecs, dtype=torch.float32)

    def batch(self, captions) -> torch.Tensor:
        return torch.stack([self(c) for c in captions])


class TinyEncoder(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        w = cfg.enc_width
        self.conv_in = nn.Conv2d(cfg.pixel_channels, w, 3, padding=1)
        layers: list[nn.Module] = []
        ch = w
        for _ in range(int(math.log2(cfg.downsample))):
            layers += [nn.SiLU(), nn.Conv2d(ch, 2 * w, 3, stride=2, padding=1)]
            ch = 2 * w
        layers += [nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(), nn.Conv2d(ch, cfg.latent_channels, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(self.conv_in(x))


class TinyDecoder(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        w = cfg.enc_width
        layers: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, 2 * w, 3, padding=1), nn.SiLU()]
        ch = 2 * w
        for _ in range(int(math.log2(cfg.downsample))):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, w, 3, padding=1), nn.SiLU()]
            ch = w
        layers += [nn.Conv2d(ch, w, 3, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.conv_out = nn.Conv2d(w, cfg.pixel_channels, 3, padding=1)

    def forward(self, z):
        return self.conv_out(self.body(z))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        b, n, d = x.shape
        h = self.heads
        q = self.to_q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(ctx).reshape(b, ctx.shape[1], h, d // h).transpose(1, 2)
        v = self.to_v(ctx).reshape(b, ctx.shape[1], h, d // h).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.to_out((att @ v).transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.norm_in = nn.GroupNorm(8, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, ctx_dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, ctx):
        b, c, hh, ww = x.shape
        tok = self.norm_in(x).reshape(b, c, hh * ww).transpose(1, 2)
        tok = tok + self.attn1(self.norm1(tok))
        tok = tok + self.attn2(self.norm2(tok), ctx)
        tok = tok + self.ff(self.norm3(tok))
        return x + tok.transpose(1, 2).reshape(b, c, hh, ww)


class ResBlock(nn.Module):
    def __init__(self, dim: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, dim)
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.temb = nn.Linear(temb_dim, dim)
        self.norm2 = nn.GroupNorm(8, dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class TinyDenoiser(nn.Module):
    """Predicts the noise in a latent given timestep and text context."""

    def __init__(self, cfg: TinyConfig):
        super().__init__()
        d = cfg.den_width
        self.temb_dim = d
        self.time_mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, 2 * d))
        self.conv_in = nn.Conv2d(cfg.latent_channels, d, 3, padding=1)
        self.res1 = ResBlock(d, 2 * d)
        self.block1 = TransformerBlock(d, cfg.embed_width, cfg.heads)
        self.res2 = ResBlock(d, 2 * d)
        self.block2 = TransformerBlock(d, cfg.embed_width, cfg.heads)
        self.res3 = ResBlock(d, 2 * d)
        self.norm_out = nn.GroupNorm(8, d)
        self.conv_out = nn.Conv2d(d, cfg.latent_channels, 3, padding=1)

    def forward(self, z, t, ctx):
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim))
        h = self.conv_in(z)
        h = self.res1(h, temb)
        h = self.block1(h, ctx)
        h = self.res2(h, temb)
        h = self.block2(h, ctx)
        h = self.res3(h, temb)
        return self.conv_out(F.silu(self.norm_out(h)))
