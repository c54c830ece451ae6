"""One-prompt dual generation: text to an aligned RGB image and lesion mask."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from PIL import Image

from .backbone.bundle import BackboneBundle
from .backbone.lora import LoraAdapterSet
from .captions import build_generation_prompt
from .data import DatasetManifest, Record, save_manifest, save_mask_png
from .diffusion import NoiseSchedule, sample_latent

log = logging.getLogger(__name__)


class GenerationConfigError(ValueError):
    pass


class ResolutionMismatchWarning(UserWarning):
    pass


class GenerationIOError(OSError):
    """Writing outputs failed; ``recovery_path`` lists what was written."""

    def __init__(self, message: str, recovery_path: Optional[Path]):
        super().__init__(message)
        self.recovery_path = recovery_path


@dataclass
class GenerationConfig:
    steps: int = 45
    guidance: float = 1.22
    resolution: int = 512
    eta: float = 0.0
    # per-sample seed is seed + running index
    seed: int = 0
    out: Optional[Path] = None
    train_resolution: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise GenerationConfigError(f"steps must be >= 1, got {self.steps}")
        if self.resolution < 1:
            raise GenerationConfigError(f"resolution must be positive, got {self.resolution}")
        if self.eta < 0:
            raise GenerationConfigError("eta must be non-negative")

    def check(self, bundle: BackboneBundle) -> tuple[int, int, int]:
        try:
            shape = bundle.latent_shape(self.resolution)
        except ValueError as exc:
            raise GenerationConfigError(str(exc)) from None
        if self.train_resolution and self.train_resolution != self.resolution:
            warnings.warn(
                f"generating at {self.resolution}px with adapters trained at {self.train_resolution}px",
                ResolutionMismatchWarning,
                stacklevel=3,
            )
        return shape

    def to_dict(self) -> dict:
        d = asdict(self)
        d["out"] = str(self.out) if self.out is not None else None
        return d


def split_channels(x):
    """(4, H, W) -> ((3, H, W) rgb, (1, H, W) mask logits); views, not copies."""
    if x.ndim != 3 or x.shape[0] != 4:
        raise ValueError(f"expected a (4, H, W) array, got shape {tuple(x.shape)}")
    return x[:3], x[3:4]


def binarize_mask(logits) -> np.ndarray:
    """``sigmoid(logit) >= 0.5``, i.e. ``logit >= 0``; ties go to lesion."""
    return (np.asarray(logits) >= 0).astype(np.uint8)


def denormalize_rgb(rgb) -> np.ndarray:
    """[-1, 1] floats (3, H, W) -> uint8 (H, W, 3), clamped before rounding."""
    x = np.clip((np.asarray(rgb, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


@torch.no_grad()
def generate_pair(
    prompt: str,
    seed: int,
    cfg: GenerationConfig,
    bundle: BackboneBundle,
    sched: NoiseSchedule,
    adapters: Optional[LoraAdapterSet] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one four-channel output and split it.

    Returns ``(rgb uint8 (H, W, 3), mask uint8 (H, W) in {0, 1})``. The
    adapters must already be injected into ``bundle``; passing them only
    guards against a stale bundle.
    """
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    if adapters is not None and bundle.adapters is not adapters:
        raise GenerationConfigError("adapters are not the ones injected into this bundle")
    if bundle.pixel_channels != 4:
        raise GenerationConfigError("bundle has not been inflated to four pixel channels")
    shape = cfg.check(bundle)
    bundle.eval()
    cond = bundle.embed([prompt])
    uncond = bundle.null_conditioning()
    z = sample_latent(bundle.predict_noise, cond, uncond, (1, *shape), sched, cfg.steps, cfg.guidance, seed, eta=cfg.eta)
    x = bundle.decode(z)[0].double().numpy()
    rgb, logits = split_channels(x)
    return denormalize_rgb(rgb), binarize_mask(logits[0])


def _write_recovery(out: Path, records: list[Record], label_set) -> Optional[Path]:
    path = out / "manifest.partial.json"
    try:
        payload = {"root": ".", "label_set": list(label_set), "records": [asdict(r) for r in records]}
        path.write_text(json.dumps(payload, indent=2))
        return path
    except OSError:
        return None


def batch_generate(
    classes: Mapping[str, int],
    cfg: GenerationConfig,
    bundle: BackboneBundle,
    sched: NoiseSchedule,
    adapters: Optional[LoraAdapterSet] = None,
    label_set=None,
) -> DatasetManifest:
    """Generate ``classes[c]`` pairs per category and write them with a manifest.

    Files go to ``cfg.out/images/{category}_{seed}_{index}.png`` and
    ``cfg.out/masks/{category}_{seed}_{index}_mask.png``; ``index`` counts
    within the category and ``seed`` is the per-sample seed.
    """
    if cfg.out is None:
        raise GenerationConfigError("an output directory is required")
    for c, n in classes.items():
        if int(n) < 0:
            raise ValueError(f"count for {c!r} is negative")
    out = Path(cfg.out)
    label_set = tuple(label_set) if label_set is not None else tuple(classes)
    records: list[Record] = []
    running = 0
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for category, n in classes.items():
            prompt = build_generation_prompt(category)
            for index in range(int(n)):
                seed = cfg.seed + running
                running += 1
                rgb, mask = generate_pair(prompt, seed, cfg, bundle, sched, adapters)
                stem = f"{category}_{seed}_{index}"
                img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}_mask.png"
                Image.fromarray(rgb, mode="RGB").save(out / img_rel, format="PNG")
                save_mask_png(mask, out / mask_rel)
                records.append(Record(img_rel, mask_rel, prompt, category, "synthetic"))
        manifest = DatasetManifest(tuple(records), label_set, out)
        save_manifest(manifest, out / "manifest.json")
    except OSError as exc:
        rec = _write_recovery(out, records, label_set)
        raise GenerationIOError(f"generation output failed after {len(records)} samples: {exc}", rec) from exc
    log.info("generated %d samples into %s", len(records), out)
    return manifest
