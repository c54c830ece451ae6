"""Pretrained feature extractors for full-scale FID/LPIPS (optional torchvision).

Weights are fetched by torchvision on first use; these are not needed for
the desk-scale extractors in :mod:`lesionsynth.metrics.generation`.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .generation import PerceptualExtractor

_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406])[:, None, None]
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225])[:, None, None]


def _tv():
    try:
        import torchvision.models as tvm
    except ImportError as exc:
        raise ImportError("pretrained extractors need torchvision") from exc
    return tvm


def _prep(img: np.ndarray, size: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(img, dtype=np.float32))[None]
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return (x - _IMAGENET_MEAN) / _IMAGENET_STD


class InceptionPool:
    """2048-d pool features of Inception-v3 at 299px."""

    def __init__(self):
        tvm = _tv()
        net = tvm.inception_v3(weights=tvm.Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        net.fc = torch.nn.Identity()
        self.net = net.eval()

    @torch.no_grad()
    def __call__(self, img: np.ndarray) -> np.ndarray:
        return self.net(_prep(img, 299))[0].numpy().astype(np.float64)


def vgg_perceptual() -> PerceptualExtractor:
    """VGG16 relu1_2..relu5_3 activations with unit channel weights."""
    tvm = _tv()
    feats = tvm.vgg16(weights=tvm.VGG16_Weights.IMAGENET1K_V1).features.eval()
    taps = {3, 8, 15, 22, 29}

    @torch.no_grad()
    def fn(img):
        x = _prep(img, max(64, int(np.asarray(img).shape[-1])))
        out = []
        for i, layer in enumerate(feats):
            x = layer(x)
            if i in taps:
                out.append(x[0].numpy().astype(np.float64))
        return out

    return PerceptualExtractor(fn, None, normalize=True)
