"""Full-scale backbone from a pretrained latent diffusion checkpoint.

Needs the optional ``diffusers`` and ``transformers`` packages and network
or cache access to the weights; nothing here is imported by default.
"""

from __future__ import annotations

from typing import Optional

import torch

from .bundle import BackboneBundle

DEFAULT_MODEL_ID = "stabilityai/stable-diffusion-2-base"
SD_SCALE_FACTOR = 0.18215


class PretrainedUnavailableError(ImportError):
    pass


def _require():
    try:
        import diffusers  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:
        raise PretrainedUnavailableError(
            "the pretrained backbone needs `pip install lesionsynth[pretrained]` (diffusers, transformers)"
        ) from exc


def load_pretrained_bundle(
    model_id: Optional[str] = None, device: str = "cpu", dtype: torch.dtype = torch.float32
) -> BackboneBundle:
    """Load VAE, UNet and text encoder into a three-channel bundle.

    Surgery (``inflate_bundle``) and adapter injection (``inject_lora``) work
    unchanged: the VAE exposes ``encoder.conv_in`` / ``decoder.conv_out`` and
    the UNet's attention projections are named ``to_q/to_k/to_v/to_out.0``.
    """
    _require()
    from diffusers import AutoencoderKL, UNet2DConditionModel
    from transformers import CLIPTextModel, CLIPTokenizer

    model_id = model_id or DEFAULT_MODEL_ID
    vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae", torch_dtype=dtype).to(device)
    unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet", torch_dtype=dtype).to(device)
    tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
    text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder", torch_dtype=dtype).to(device)
    for m in (vae, unet, text_encoder):
        m.requires_grad_(False)

    @torch.no_grad()
    def embed(caption: str) -> torch.Tensor:
        ids = tokenizer(
            caption, padding="max_length", max_length=tokenizer.model_max_length, truncation=True, return_tensors="pt"
        ).input_ids.to(device)
        return text_encoder(ids)[0][0]

    def encode(x: torch.Tensor) -> torch.Tensor:
        moments = vae.quant_conv(vae.encoder(x))
        mean, _ = torch.chunk(moments, 2, dim=1)
        return mean

    def decode(z: torch.Tensor) -> torch.Tensor:
        return vae.decoder(vae.post_quant_conv(z))

    def denoise(z: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        return unet(z, t, encoder_hidden_states=ctx).sample

    scaling = getattr(vae.config, "scaling_factor", SD_SCALE_FACTOR)
    return BackboneBundle(
        encoder=vae.encoder,
        decoder=vae.decoder,
        denoiser=unet,
        text_embedder=embed,
        latent_channels=vae.config.latent_channels,
        scale_factor=float(scaling),
        downsample=2 ** (len(vae.config.block_out_channels) - 1),
        pixel_channels=3,
        kind="pretrained",
        config={"model_id": model_id},
        encode_fn=encode,
        decode_fn=decode,
        denoise_fn=denoise,
    )


def pretrained_schedule(model_id: Optional[str] = None):
    """The checkpoint's training schedule (scaled-linear betas over 1000 steps)."""
    from ..diffusion import make_schedule

    return make_schedule(1000, 0.00085, 0.012, "scaled_linear")
