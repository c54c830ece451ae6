"""Channel inflation of pixel-space convolutions.

The array-level functions operate on :class:`ConvWeights`; the module-level
:class:`InflatedConv2d` keeps the copied base weights frozen and exposes
only the new channel slice as a trainable parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

POLICIES = ("zeros", "mean_of_rgb")


@dataclass
class ConvWeights:
    kernel: np.ndarray  # (out_ch, in_ch, kH, kW)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[0],):
            raise ValueError(f"bad conv shapes kernel={self.kernel.shape} bias={self.bias.shape}")
        if not (np.isfinite(self.kernel).all() and np.isfinite(self.bias).all()):
            raise ValueError("conv weights must be finite")

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_params(self) -> int:
        return self.kernel.size + self.bias.size

    @classmethod
    def from_module(cls, conv: nn.Conv2d) -> "ConvWeights":
        bias = conv.bias.detach().cpu().numpy() if conv.bias is not None else np.zeros(conv.out_channels)
        return cls(conv.weight.detach().cpu().numpy(), bias)


def _check_policy(policy: str):
    if policy not in POLICIES:
        raise ValueError(f"unknown init policy {policy!r}; expected one of {POLICIES}")


def inflate_input_conv(w: ConvWeights, new_in: int, policy: str = "zeros") -> ConvWeights:
    """Widen the input side; every new input slice gets the same init."""
    _check_policy(policy)
    if new_in <= w.in_ch:
        raise ValueError(f"new_in ({new_in}) must exceed current in_ch ({w.in_ch})")
    extra = new_in - w.in_ch
    if policy == "zeros":
        slab = np.zeros((w.out_ch, extra) + w.kernel.shape[2:])
    else:
        slab = np.repeat(w.kernel[:, :3].mean(axis=1, keepdims=True), extra, axis=1)
    return ConvWeights(np.concatenate([w.kernel, slab], axis=1), w.bias.copy())


def inflate_output_conv(w: ConvWeights, new_out: int, policy: str = "zeros") -> ConvWeights:
    """Widen the output side; new rows and biases get the same init."""
    _check_policy(policy)
    if new_out <= w.out_ch:
        raise ValueError(f"new_out ({new_out}) must exceed current out_ch ({w.out_ch})")
    extra = new_out - w.out_ch
    if policy == "zeros":
        rows = np.zeros((extra,) + w.kernel.shape[1:])
        bias = np.zeros(extra)
    else:
        rows = np.repeat(w.kernel[:3].mean(axis=0, keepdims=True), extra, axis=0)
        bias = np.full(extra, w.bias[:3].mean())
    return ConvWeights(np.concatenate([w.kernel, rows], axis=0), np.concatenate([w.bias, bias]))


class InflatedConv2d(nn.Module):
    """A conv whose original weights are frozen and whose new slice trains.

    ``axis`` is ``"in"`` for input inflation or ``"out"`` for output
    inflation. The full kernel is the concatenation of ``base_weight`` and
    ``extra_weight`` along that axis.
    """

    def __init__(self, conv: nn.Conv2d, new_channels: int, axis: str, policy: str = "zeros"):
        super().__init__()
        if conv.groups != 1:
            raise ValueError("grouped convolutions are not supported")
        if axis not in ("in", "out"):
            raise ValueError("axis must be 'in' or 'out'")
        src = ConvWeights.from_module(conv)
        if axis == "in":
            full = inflate_input_conv(src, new_channels, policy)
            extra_w = full.kernel[:, src.in_ch :]
            extra_b = None
        else:
            full = inflate_output_conv(src, new_channels, policy)
            extra_w = full.kernel[src.out_ch :]
            extra_b = full.bias[src.out_ch :]
        dtype = conv.weight.dtype
        self.axis = axis
        self.policy = policy
        self.stride, self.padding, self.dilation = conv.stride, conv.padding, conv.dilation
        self.base_weight = nn.Parameter(conv.weight.detach().clone(), requires_grad=False)
        self.base_bias = (
            nn.Parameter(conv.bias.detach().clone(), requires_grad=False) if conv.bias is not None else None
        )
        self.extra_weight = nn.Parameter(torch.as_tensor(extra_w, dtype=dtype))
        self.extra_bias = nn.Parameter(torch.as_tensor(extra_b, dtype=dtype)) if extra_b is not None else None
        self.in_channels = full.in_ch
        self.out_channels = full.out_ch

    def weight(self) -> torch.Tensor:
        dim = 1 if self.axis == "in" else 0
        return torch.cat([self.base_weight, self.extra_weight], dim=dim)

    def bias(self):
        if self.axis == "in":
            return self.base_bias
        base = self.base_bias if self.base_bias is not None else torch.zeros_like(self.extra_bias[:0])
        return torch.cat([base, self.extra_bias])

    def forward(self, x):
        return F.conv2d(x, self.weight(), self.bias(), self.stride, self.padding, self.dilation)

    def trainable(self) -> list[nn.Parameter]:
        return [p for p in (self.extra_weight, self.extra_bias) if p is not None]

    def n_new_params(self) -> int:
        return sum(p.numel() for p in self.trainable())


def replace_conv(parent: nn.Module, attr: str, new_channels: int, axis: str, policy: str = "zeros") -> InflatedConv2d:
    """Swap ``parent.<attr>`` for an :class:`InflatedConv2d` in place."""
    conv = getattr(parent, attr)
    if isinstance(conv, InflatedConv2d):
        raise ValueError(f"{attr} is already inflated")
    new = InflatedConv2d(conv, new_channels, axis, policy)
    setattr(parent, attr, new)
    return new
