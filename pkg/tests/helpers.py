"""Shared builders for the test modules."""

import numpy as np

from lesionsynth.backbone import build_tiny_backbone, inflate_bundle, inject_lora
from lesionsynth.backbone.pretrain import PretrainConfig, pretrain_tiny_base
from lesionsynth.backbone.tiny import TinyConfig
from lesionsynth.data import make_toy_dataset
from lesionsynth.diffusion import make_schedule


def tiny_schedule():
    return make_schedule(200, 1e-4, 0.05, "linear")


def quick_bundle(seed: int = 0, pretrain: bool = True, rank: int = 4):
    """Inflated tiny backbone with a few pretraining steps, plus adapters."""
    b = build_tiny_backbone(TinyConfig(seed=seed), surgery=False)
    if pretrain:
        data = make_toy_dataset(16, 32, seed=seed + 100)
        pretrain_tiny_base(
            b,
            np.stack([s.rgb for s in data]),
            [s.caption for s in data],
            tiny_schedule(),
            PretrainConfig(ae_steps=5, denoiser_steps=5, batch_size=8, seed=seed),
        )
    inflate_bundle(b, 4)
    adapters = inject_lora(b, rank, seed=seed)
    return b, adapters


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []
