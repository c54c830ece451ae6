"""Pretraining for the tiny backbone's base weights.

The full-scale pipeline starts from a pretrained three-channel checkpoint.
At desk scale that checkpoint does not exist, so this module produces one:
the autoencoder learns RGB reconstruction, the latent scale is fixed to
unit variance, and the denoiser learns caption-conditioned noise
prediction. All of it happens before surgery and adapter injection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..diffusion import NoiseSchedule, q_sample
from .bundle import BackboneBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    ae_steps: int = 600
    denoiser_steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    caption_dropout: float = 0.1
    seed: int = 0


def pretrain_tiny_base(
    bundle: BackboneBundle,
    rgb: np.ndarray,
    captions: Sequence[str],
    sched: NoiseSchedule,
    cfg: PretrainConfig = PretrainConfig(),
) -> dict[str, float]:
    """Train all base weights of an un-inflated tiny bundle in place.

    ``rgb`` is (N, H, W, 3) in [0, 1]. Returns final losses.
    """
    if bundle.inflated or bundle.adapters is not None:
        raise ValueError("pretrain the base before surgery and adapter injection")
    x_all = torch.as_tensor(np.asarray(rgb, dtype=np.float32).transpose(0, 3, 1, 2) * 2.0 - 1.0)
    n = x_all.shape[0]
    gen = torch.Generator().manual_seed(cfg.seed)
    bundle.train()
    for p in bundle.modules().parameters():
        p.requires_grad_(True)

    ae_params = list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())
    opt = torch.optim.Adam(ae_params, lr=cfg.lr)
    ae_loss = float("nan")
    for step in range(cfg.ae_steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        x = x_all[idx]
        loss = torch.mean((bundle.decoder(bundle.encoder(x)) - x) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ae_loss = loss.item()
    with torch.no_grad():
        z = torch.cat([bundle.encoder(x_all[i : i + 256]) for i in range(0, n, 256)])
        bundle.scale_factor = float(1.0 / z.std().clamp_min(1e-6))
        z_all = z * bundle.scale_factor
    log.info("pretrain: ae mse %.5f, scale factor %.4f", ae_loss, bundle.scale_factor)

    ctx_all = torch.stack([bundle.text_embedder(c) for c in captions])
    null = bundle.text_embedder("")
    opt = torch.optim.Adam(bundle.denoiser.parameters(), lr=cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.denoiser_steps, 1))
    den_loss = float("nan")
    for step in range(cfg.denoiser_steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        z0 = z_all[idx]
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        ctx = ctx_all[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.caption_dropout
        ctx[drop] = null
        loss = torch.mean((bundle.denoiser(q_sample(z0, t, eps, sched), t, ctx) - eps) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        den_loss = loss.item()
    log.info("pretrain: denoiser mse %.5f", den_loss)
    bundle.eval()
    return {"ae_mse": ae_loss, "denoiser_mse": den_loss, "scale_factor": bundle.scale_factor}
