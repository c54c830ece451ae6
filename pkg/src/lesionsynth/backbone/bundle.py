"""The encoder/decoder/denoiser/text-embedder quartet and its surgery."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

from ..diffusion import Conditioning
from .lora import LoraAdapterSet, inject_lora_module
from .surgery import InflatedConv2d, replace_conv
from .tiny import HashTextEmbedder, TinyConfig, TinyDecoder, TinyDenoiser, TinyEncoder


@dataclass
class BackboneBundle:
    encoder: nn.Module
    decoder: nn.Module
    denoiser: nn.Module
    text_embedder: Callable[[str], torch.Tensor]
    latent_channels: int = 4
    scale_factor: float = 1.0
    downsample: int = 8
    pixel_channels: int = 3
    kind: str = "tiny"
    config: dict = field(default_factory=dict)
    inflated: dict[str, InflatedConv2d] = field(default_factory=dict)
    adapters: Optional[LoraAdapterSet] = None
    # hooks for the pretrained path, whose modules return wrapper objects
    encode_fn: Optional[Callable] = None
    decode_fn: Optional[Callable] = None
    denoise_fn: Optional[Callable] = None

    def modules(self) -> nn.ModuleDict:
        return nn.ModuleDict({"encoder": self.encoder, "decoder": self.decoder, "denoiser": self.denoiser})

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Pixels in [-1, 1] -> scaled latents."""
        z = self.encode_fn(x) if self.encode_fn else self.encoder(x)
        return z * self.scale_factor

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        z = z / self.scale_factor
        return self.decode_fn(z) if self.decode_fn else self.decoder(z)

    def predict_noise(self, z: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        return self.denoise_fn(z, t, ctx) if self.denoise_fn else self.denoiser(z, t, ctx)

    def embed(self, captions) -> Conditioning:
        emb = torch.stack([self.text_embedder(c) for c in captions])
        return Conditioning(emb, null_flag=all(c == "" for c in captions))

    def null_conditioning(self) -> Conditioning:
        return Conditioning(self.text_embedder(""), null_flag=True)

    def latent_shape(self, resolution: int) -> tuple[int, int, int]:
        if resolution % self.downsample:
            raise ValueError(f"resolution {resolution} is not divisible by the downsample factor {self.downsample}")
        r = resolution // self.downsample
        return (self.latent_channels, r, r)

    def eval(self) -> "BackboneBundle":
        self.modules().eval()
        return self

    def train(self) -> "BackboneBundle":
        self.modules().train()
        return self


def build_tiny_backbone(cfg: Optional[TinyConfig] = None, surgery: bool = True, policy: str = "zeros") -> BackboneBundle:
    """Build the desk-scale backbone.

    With ``surgery=True`` (default) the autoencoder is returned already
    inflated to four pixel channels; pass ``surgery=False`` to get the
    three-channel base, e.g. to pretrain it before inflation.
    """
    cfg = cfg or TinyConfig()
    torch.manual_seed(cfg.seed)
    bundle = BackboneBundle(
        encoder=TinyEncoder(cfg),
        decoder=TinyDecoder(cfg),
        denoiser=TinyDenoiser(cfg),
        text_embedder=HashTextEmbedder(cfg.embed_width, cfg.max_tokens),
        latent_channels=cfg.latent_channels,
        scale_factor=1.0,
        downsample=cfg.downsample,
        pixel_channels=cfg.pixel_channels,
        kind="tiny",
        config=dict(cfg.__dict__),
    )
    if surgery:
        inflate_bundle(bundle, 4, policy)
    return bundle


def inflate_bundle(bundle: BackboneBundle, pixel_channels: int = 4, policy: str = "zeros") -> BackboneBundle:
    """Widen the encoder input conv and decoder output conv in place."""
    if pixel_channels <= bundle.pixel_channels:
        raise ValueError(f"bundle already has {bundle.pixel_channels} pixel channels")
    bundle.inflated["encoder.conv_in"] = replace_conv(bundle.encoder, "conv_in", pixel_channels, "in", policy)
    bundle.inflated["decoder.conv_out"] = replace_conv(bundle.decoder, "conv_out", pixel_channels, "out", policy)
    bundle.pixel_channels = pixel_channels
    bundle.config["inflate_policy"] = policy
    return bundle


def inject_lora(bundle: BackboneBundle, rank: int = 4, alpha: Optional[float] = None, seed: int = 0) -> LoraAdapterSet:
    """Attach adapters to every attention projection of the denoiser."""
    adapters = inject_lora_module(bundle.denoiser, rank, alpha, seed=seed)
    bundle.adapters = adapters
    return adapters


@dataclass
class TrainableSet:
    params: dict[str, nn.Parameter]
    total_params: int

    @property
    def n_trainable(self) -> int:
        return sum(p.numel() for p in self.params.values())

    @property
    def fraction(self) -> float:
        return self.n_trainable / self.total_params if self.total_params else 0.0

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.values())


def all_parameters(bundle: BackboneBundle) -> dict[str, nn.Parameter]:
    return dict(bundle.modules().named_parameters())


def trainable_parameters(bundle: BackboneBundle, adapters: Optional[LoraAdapterSet] = None) -> TrainableSet:
    """Freeze everything except adapter pairs and inflated channel slices."""
    params: dict[str, nn.Parameter] = {}
    keep = set()
    if adapters is not None:
        for name, p in adapters.named_parameters():
            params[f"denoiser.{name}"] = p
            keep.add(id(p))
    for name, conv in bundle.inflated.items():
        for p, suffix in ((conv.extra_weight, "extra_weight"), (conv.extra_bias, "extra_bias")):
            if p is not None:
                params[f"{name}.{suffix}"] = p
                keep.add(id(p))
    everything = all_parameters(bundle)
    for p in everything.values():
        p.requires_grad_(id(p) in keep)
    return TrainableSet(params, sum(p.numel() for p in everything.values()))
