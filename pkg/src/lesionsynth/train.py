"""Multi-objective fine-tuning of the inflated, adapted backbone.

Each step encodes RGB+mask into latents, corrupts them at a random
timestep, predicts the noise, and supervises the mask through the decoded
x0 estimate: its fourth channel is read as mask logits.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone.bundle import BackboneBundle, TrainableSet, trainable_parameters
from .backbone.checkpoint import load_trainer_state, save_checkpoint
from .backbone.lora import LoraAdapterSet
from .data import AugmentationConfig, DatasetManifest, FourChannelSample, augment_pair, augment_seed, resize_sample
from .diffusion import NoisePrediction, NoiseSchedule, predict_x0, q_sample

log = logging.getLogger(__name__)


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_diffusion: float = 1.0
    lambda_mask: float = 1.0
    lambda_dice: float = 1.0

    def __post_init__(self):
        ws = (self.lambda_diffusion, self.lambda_mask, self.lambda_dice)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if all(w == 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")

    @property
    def needs_decoder(self) -> bool:
        return self.lambda_mask > 0 or self.lambda_dice > 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    caption_dropout: float = 0.1
    grad_clip: float = 1.0
    dice_smoothing: float = 1.0
    resolution: int = 256
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    num_workers: int = 1
    deterministic: bool = True
    augment: Optional[AugmentationConfig] = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise ValueError("caption_dropout must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class MaskPrediction:
    """Mask logits against a binary target over the trailing (H, W) axes."""

    logits: torch.Tensor
    target: torch.Tensor
    smoothing: float = 1.0

    def __post_init__(self):
        self.logits = torch.as_tensor(self.logits)
        self.target = torch.as_tensor(self.target, dtype=self.logits.dtype)
        if self.logits.shape != self.target.shape:
            raise ValueError(f"logits {tuple(self.logits.shape)} vs target {tuple(self.target.shape)}")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be > 0")

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def N(self) -> int:
        return int(self.logits.shape[-1] * self.logits.shape[-2])


# -------------------------------------------------------------------- losses


def diffusion_loss(pred: NoisePrediction) -> torch.Tensor:
    if pred.eps_true is None:
        raise ValueError("diffusion_loss needs eps_true")
    return torch.mean((pred.eps_true - pred.eps_hat) ** 2)


def bce_mask_loss(mp: MaskPrediction) -> torch.Tensor:
    """Mean binary cross-entropy, evaluated from logits for stability."""
    t = mp.target
    if not torch.all((t == 0) | (t == 1)):
        raise ValueError("mask target must be binary")
    # -[y log s(l) + (1-y) log(1-s(l))] = max(l,0) - l*y + log(1+exp(-|l|))
    l = mp.logits
    per_px = torch.clamp(l, min=0) - l * t + torch.log1p(torch.exp(-torch.abs(l)))
    return per_px.mean()


def dice_loss(mp: MaskPrediction, probs: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Soft Dice loss per mask, averaged over any leading batch axes.

    ``probs`` overrides ``sigmoid(logits)``; used to evaluate the loss at
    exact probabilities (e.g. p = 0).
    """
    p = mp.probs if probs is None else torch.as_tensor(probs, dtype=mp.target.dtype)
    y = mp.target
    eps = mp.smoothing
    inter = (y * p).sum(dim=(-2, -1))
    denom = y.sum(dim=(-2, -1)) + p.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def total_loss(d, m, dc, w: LossWeights):
    return w.lambda_diffusion * d + w.lambda_mask * m + w.lambda_dice * dc


# ---------------------------------------------------------------- training


def step_generator(seed: int, epoch: int, step: int) -> torch.Generator:
    s = int(np.random.SeedSequence([seed, epoch, step]).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(s)


def collate(samples: Sequence[FourChannelSample]):
    x = torch.as_tensor(np.stack([s.to_pixels() for s in samples]), dtype=torch.float32)
    masks = torch.as_tensor(np.stack([s.mask for s in samples]), dtype=torch.float32)
    return x, masks, [s.caption for s in samples]


def training_step(
    batch: Sequence[FourChannelSample],
    bundle: BackboneBundle,
    trainable: TrainableSet,
    optimizer: torch.optim.Optimizer,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    gen: torch.Generator,
) -> dict[str, float]:
    """One optimizer step over the trainable set; returns the loss terms."""
    w = cfg.weights
    x, masks, captions = collate(batch)
    b = x.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    drop = torch.rand(b, generator=gen) < cfg.caption_dropout
    captions = ["" if d else c for d, c in zip(drop.tolist(), captions)]

    z0 = bundle.encode(x)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, sched)
    ctx = bundle.embed(captions).embedding
    eps_hat = bundle.predict_noise(z_t, t, ctx)
    l_diff = diffusion_loss(NoisePrediction(eps_hat, eps))

    zero = torch.zeros((), dtype=l_diff.dtype)
    l_mask, l_dice = zero, zero
    if w.needs_decoder:
        x0_hat = predict_x0(z_t, eps_hat, t, sched)
        logits = bundle.decode(x0_hat)[:, 3]
        mp = MaskPrediction(logits, masks, cfg.dice_smoothing)
        l_mask = bce_mask_loss(mp)
        l_dice = dice_loss(mp)
    loss = total_loss(l_diff, l_mask, l_dice, w)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(
            f"non-finite loss {loss.item()} (diffusion={l_diff.item()}, mask={l_mask.item()}, dice={l_dice.item()})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = list(trainable)
    if cfg.grad_clip and cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    optimizer.step()
    return {
        "L_diffusion": float(l_diff.item()),
        "L_mask": float(l_mask.item()),
        "L_dice": float(l_dice.item()),
        "L_total": float(loss.item()),
    }


def make_optimizer(trainable: TrainableSet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(trainable), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


class SampleSource:
    """Indexed access to resized (and optionally augmented) samples."""

    def __init__(self, manifest: DatasetManifest, resolution: int, cache: bool = True, workers: int = 1):
        self.manifest = manifest
        self.resolution = resolution
        self.workers = max(1, workers)
        self._cache: Optional[dict[int, FourChannelSample]] = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifest)

    def get(self, i: int) -> FourChannelSample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = resize_sample(self.manifest.load_sample(i), (self.resolution, self.resolution))
        if self._cache is not None:
            self._cache[i] = s
        return s

    def batch(self, indices: Sequence[int]) -> list[FourChannelSample]:
        # sorted so content never depends on worker delivery order
        indices = sorted(indices)
        if self.workers == 1:
            return [self.get(i) for i in indices]
        with ThreadPoolExecutor(self.workers) as ex:
            return list(ex.map(self.get, indices))


@dataclass
class FitResult:
    checkpoint: Optional[Path]
    curve: list[dict]
    step_losses: list[dict]


CURVE_COLUMNS = ("epoch", "step", "L_diffusion", "L_mask", "L_dice", "L_total")


def write_curve(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, extrasaction="ignore")
        wr.writeheader()
        wr.writerows(rows)
    return path


def fit(
    manifest: DatasetManifest,
    bundle: BackboneBundle,
    adapters: Optional[LoraAdapterSet],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    source: Optional[SampleSource] = None,
) -> FitResult:
    """Run ``cfg.epochs`` epochs; checkpoints and the CSV curve go to ``out_dir``.

    ``resume_from`` is a checkpoint directory whose adapter/slice arrays have
    already been loaded into ``bundle``; only optimizer state and the epoch
    counter are restored here.
    """
    if len(manifest) == 0:
        raise ValueError("cannot fit on an empty manifest")
    out_dir = Path(out_dir) if out_dir is not None else None
    trainable = trainable_parameters(bundle, adapters)
    optimizer = make_optimizer(trainable, cfg)
    start_epoch, global_step = 1, 0
    if resume_from is not None:
        state = load_trainer_state(resume_from)
        optimizer.load_state_dict(state["optimizer"])
        start_epoch = int(state["epoch"]) + 1
        global_step = int(state["global_step"])
    source = source or SampleSource(manifest, cfg.resolution, workers=cfg.num_workers)
    n = len(source)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    log.info(
        "fit: %d samples, %d steps/epoch, %d trainable of %d params (%.2f%%)",
        n, steps_per_epoch, trainable.n_trainable, trainable.total_params, 100 * trainable.fraction,
    )
    bundle.train()
    curve: list[dict] = []
    step_rows: list[dict] = []
    ckpt = None
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = dict.fromkeys(CURVE_COLUMNS[2:], 0.0)
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
            batch = source.batch(idx.tolist())
            if cfg.augment is not None:
                batch = [augment_pair(s, cfg.augment, augment_seed(cfg.seed, epoch, int(i))) for s, i in zip(batch, sorted(idx))]
            try:
                losses = training_step(batch, bundle, trainable, optimizer, sched, cfg, step_generator(cfg.seed, epoch, k))
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"epoch {epoch} step {k}: {exc}") from exc
            global_step += 1
            step_rows.append({"epoch": epoch, "step": global_step, **losses})
            for key in sums:
                sums[key] += losses[key]
        row = {"epoch": epoch, "step": global_step, **{k: v / steps_per_epoch for k, v in sums.items()}}
        curve.append(row)
        log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k.startswith("L_")))
        last = epoch == cfg.epochs
        if out_dir is not None and (last or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0)):
            ckpt = save_checkpoint(
                out_dir / f"checkpoint-epoch{epoch:04d}",
                bundle,
                adapters,
                sched,
                trainer_state={"optimizer": optimizer.state_dict(), "epoch": epoch, "global_step": global_step},
                extra={"train_config": cfg.to_dict()},
            )
    if out_dir is not None:
        prior = []
        curve_path = out_dir / "training_curve.csv"
        if resume_from is not None and curve_path.exists():
            with curve_path.open() as fh:
                prior = [r for r in csv.DictReader(fh) if int(r["epoch"]) < start_epoch]
        write_curve(prior + curve, curve_path)
    return FitResult(ckpt, curve, step_rows)
