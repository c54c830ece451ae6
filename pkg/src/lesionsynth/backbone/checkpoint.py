"""Checkpoint directories.

Layout::

    metadata.json     rank, alpha, policy, schedule, normalisation, base reference
    adapters.npz      lora_A / lora_B per adapted projection
    inflated.npz      new channel slices of the inflated convolutions
    trainer_state.pt  optimizer state and epoch counter (training checkpoints)
    base.npz          frozen base weights, written once and then referenced

Adapters and slices never overwrite the base weights; later checkpoints of
the same run reference the first ``base.npz`` by relative path.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..diffusion import NoiseSchedule
from .bundle import BackboneBundle, build_tiny_backbone, inflate_bundle, inject_lora
from .lora import LoraAdapterSet
from .tiny import TinyConfig

FORMAT = "lesionsynth-checkpoint/1"
_TRAINABLE_SUFFIXES = ("lora_A", "lora_B", "extra_weight", "extra_bias")


class CheckpointError(IOError):
    pass


def _canonical(key: str) -> str:
    """Map wrapped parameter names back to the un-adapted module's names."""
    for old, new in ((".base.weight", ".weight"), (".base.bias", ".bias"), (".base_weight", ".weight"), (".base_bias", ".bias")):
        if key.endswith(old):
            return key[: -len(old)] + new
    return key


def frozen_state(bundle: BackboneBundle) -> dict[str, np.ndarray]:
    """Base weights under pre-surgery, pre-adapter parameter names."""
    return {
        _canonical(k): v.detach().cpu().numpy()
        for k, v in bundle.modules().state_dict().items()
        if not k.endswith(_TRAINABLE_SUFFIXES)
    }


def inflated_arrays(bundle: BackboneBundle) -> dict[str, np.ndarray]:
    out = {}
    for name, conv in bundle.inflated.items():
        out[f"{name}.extra_weight"] = conv.extra_weight.detach().cpu().numpy()
        if conv.extra_bias is not None:
            out[f"{name}.extra_bias"] = conv.extra_bias.detach().cpu().numpy()
    return out


def save_checkpoint(
    path,
    bundle: BackboneBundle,
    adapters: Optional[LoraAdapterSet],
    sched: Optional[NoiseSchedule],
    trainer_state: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        base_ref = bundle.config.get("base_ref")
        if bundle.kind == "tiny":
            if not base_ref or not Path(base_ref).is_file():
                np.savez(path / "base.npz", **frozen_state(bundle))
                base_ref = str((path / "base.npz").resolve())
                bundle.config["base_ref"] = base_ref
            ref = os.path.relpath(base_ref, path.resolve())
        else:
            ref = bundle.config.get("model_id")
        if adapters is not None and adapters.layers:
            np.savez(path / "adapters.npz", **adapters.state_arrays())
        if bundle.inflated:
            np.savez(path / "inflated.npz", **inflated_arrays(bundle))
        tiny_cfg = {k: v for k, v in bundle.config.items() if k in TinyConfig.__dataclass_fields__}
        meta = {
            "format": FORMAT,
            "kind": bundle.kind,
            "base_ref": ref,
            "tiny_config": tiny_cfg if bundle.kind == "tiny" else None,
            "model_id": bundle.config.get("model_id"),
            "pixel_channels": bundle.pixel_channels,
            "latent_channels": bundle.latent_channels,
            "downsample": bundle.downsample,
            "scale_factor": bundle.scale_factor,
            "inflate_policy": bundle.config.get("inflate_policy"),
            "inflated": sorted(bundle.inflated),
            "lora": None
            if adapters is None
            else {"rank": adapters.rank, "alpha": adapters.alpha, "targets": adapters.targets},
            "schedule": sched.to_dict() if sched is not None else None,
            "extra": extra or {},
        }
        (path / "metadata.json").write_text(json.dumps(meta, indent=2, default=str))
        if trainer_state is not None:
            torch.save(trainer_state, path / "trainer_state.pt")
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def read_metadata(path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / "metadata.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata in {path}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta


def load_base_weights(bundle: BackboneBundle, base_path) -> None:
    """Load canonical base weights into an un-inflated, un-adapted bundle."""
    base_path = Path(base_path)
    if not base_path.is_file():
        raise CheckpointError(f"base weights not found: {base_path}")
    with np.load(base_path) as z:
        state = {k: torch.as_tensor(z[k]) for k in z.files}
    try:
        bundle.modules().load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"base weights in {base_path} do not match the backbone: {exc}") from exc
    bundle.config["base_ref"] = str(base_path.resolve())


def load_checkpoint(path, load_base: bool = True):
    """Rebuild ``(bundle, adapters, schedule, metadata)`` from a checkpoint."""
    path = Path(path)
    meta = read_metadata(path)
    if meta["kind"] == "tiny":
        bundle = build_tiny_backbone(TinyConfig(**meta["tiny_config"]), surgery=False)
        if load_base:
            load_base_weights(bundle, (path / meta["base_ref"]).resolve())
    else:
        from .pretrained import load_pretrained_bundle

        bundle = load_pretrained_bundle(meta["model_id"])
    if meta["inflated"]:
        inflate_bundle(bundle, meta["pixel_channels"], meta.get("inflate_policy") or "zeros")
    adapters = None
    if meta["lora"]:
        adapters = inject_lora(bundle, meta["lora"]["rank"], meta["lora"]["alpha"])
        with np.load(path / "adapters.npz") as z:
            adapters.load_arrays({k: z[k] for k in z.files})
    bundle.scale_factor = float(meta["scale_factor"])
    if bundle.inflated:
        with np.load(path / "inflated.npz") as z:
            with torch.no_grad():
                for name, conv in bundle.inflated.items():
                    conv.extra_weight.copy_(torch.as_tensor(z[f"{name}.extra_weight"]))
                    if conv.extra_bias is not None:
                        conv.extra_bias.copy_(torch.as_tensor(z[f"{name}.extra_bias"]))
    sched = NoiseSchedule.from_dict(meta["schedule"]) if meta.get("schedule") else None
    return bundle, adapters, sched, meta


def load_trainer_state(path) -> dict:
    p = Path(path) / "trainer_state.pt"
    if not p.is_file():
        raise CheckpointError(f"{path} has no trainer state; cannot resume")
    return torch.load(p, weights_only=False)
