"""Low-rank adapters for attention projections.

For a frozen projection ``y = x W + b`` with ``W`` of shape ``(d, k)``
(``d`` inputs, ``k`` outputs) the adapted layer computes
``y = x (W + s A B) + b`` with ``A`` of shape ``(d, r)``, ``B`` of shape
``(r, k)`` and ``s = alpha / r``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

# matches to_q / to_k / to_v / to_out and the diffusers "to_out.0" form
TARGET_PATTERN = re.compile(r"(^|\.)(to_q|to_k|to_v|to_out(\.0)?)$")


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, init_std: float = 0.01, generator=None):
        super().__init__()
        d, k = base.in_features, base.out_features
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        if rank > min(d, k):
            raise ValueError(f"rank {rank} exceeds min(d, k) = {min(d, k)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        dtype = base.weight.dtype
        a = torch.randn(d, rank, generator=generator, dtype=dtype) * init_std
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(rank, k, dtype=dtype))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def delta_w(self) -> torch.Tensor:
        """Effective ``(d, k)`` update ``s A B``."""
        return self.scaling * (self.lora_A @ self.lora_B)

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.lora_A) @ self.lora_B)

    def n_params(self) -> int:
        return self.lora_A.numel() + self.lora_B.numel()


@dataclass
class LoraAdapterSet:
    layers: dict[str, LoraLinear] = field(default_factory=dict)
    rank: int = 4
    alpha: float = 4.0

    @property
    def targets(self) -> list[str]:
        return list(self.layers)

    def parameters(self):
        for layer in self.layers.values():
            yield layer.lora_A
            yield layer.lora_B

    def named_parameters(self):
        for name, layer in self.layers.items():
            yield f"{name}.lora_A", layer.lora_A
            yield f"{name}.lora_B", layer.lora_B

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy() for n, p in self.named_parameters()}

    def load_arrays(self, arrays) -> None:
        with torch.no_grad():
            for n, p in self.named_parameters():
                if n not in arrays:
                    raise KeyError(f"adapter array {n} missing from checkpoint")
                src = torch.as_tensor(np.asarray(arrays[n]), dtype=p.dtype)
                if src.shape != p.shape:
                    raise ValueError(f"adapter {n}: shape {tuple(src.shape)} != {tuple(p.shape)}")
                p.copy_(src)


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, attr = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    if isinstance(parent, (nn.Sequential, nn.ModuleList)) and attr.isdigit():
        parent[int(attr)] = module
    else:
        setattr(parent, attr, module)


def inject_lora_module(model: nn.Module, rank: int, alpha: float | None = None, seed: int = 0) -> LoraAdapterSet:
    """Wrap every attention projection Linear in ``model`` with an adapter.

    ``alpha`` defaults to ``rank`` (unit scaling). The forward pass is
    unchanged after injection because ``B`` starts at zero.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    alpha = float(rank if alpha is None else alpha)
    targets = [
        (n, m)
        for n, m in model.named_modules()
        if isinstance(m, nn.Linear) and not isinstance(m, LoraLinear) and TARGET_PATTERN.search(n)
    ]
    if not targets:
        raise ValueError("no attention projections (to_q/to_k/to_v/to_out) found")
    for n, m in targets:
        if rank > min(m.in_features, m.out_features):
            raise ValueError(f"rank {rank} exceeds min dimension of {n} ({m.in_features}x{m.out_features})")
    gen = torch.Generator().manual_seed(seed)
    adapters = LoraAdapterSet(rank=rank, alpha=alpha)
    for n, m in targets:
        wrapped = LoraLinear(m, rank, alpha, generator=gen)
        _set_submodule(model, n, wrapped)
        adapters.layers[n] = wrapped
    return adapters


def merge_lora(weight, lora_A, lora_B, scaling: float = 1.0):
    """Return ``W + scaling * A B`` for a ``(d, k)`` weight.

    Accepts numpy arrays or tensors. A torch ``nn.Linear`` stores the
    transpose, so pass ``linear.weight.T``.
    """
    if weight.shape[0] != lora_A.shape[0] or weight.shape[1] != lora_B.shape[1] or lora_A.shape[1] != lora_B.shape[0]:
        raise ValueError(
            f"incompatible shapes W{tuple(weight.shape)} A{tuple(lora_A.shape)} B{tuple(lora_B.shape)}"
        )
    return weight + scaling * (lora_A @ lora_B)


def merged_linear(layer: LoraLinear) -> nn.Linear:
    """A plain Linear whose weight has the adapter folded in."""
    base = layer.base
    out = nn.Linear(base.in_features, base.out_features, bias=base.bias is not None)
    with torch.no_grad():
        w = merge_lora(base.weight.T, layer.lora_A, layer.lora_B, layer.scaling)
        out.weight.copy_(w.T)
        if base.bias is not None:
            out.bias.copy_(base.bias)
    return out.to(base.weight.dtype)


def merge_all(model: nn.Module, adapters: LoraAdapterSet) -> None:
    """Fold every adapter into its base projection in place."""
    for name, layer in list(adapters.layers.items()):
        _set_submodule(model, name, merged_linear(layer))
    adapters.layers.clear()
