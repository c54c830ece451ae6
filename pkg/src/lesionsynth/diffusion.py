"""Backbone-agnostic diffusion math.

Noise schedules, closed-form forward corruption, the DDPM reverse kernel,
deterministic DDIM stepping and classifier-free guidance. Every function
accepts numpy arrays or torch tensors; timestep coefficients are always
computed in float64 and cast to the input's dtype at the last moment.

Timestep convention: ``t`` runs over ``1..T``; ``t = 0`` denotes clean data
with ``alpha_bar[0] == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "ReverseKernel",
    "Conditioning",
    "NoisePrediction",
    "make_schedule",
    "q_sample",
    "iterated_forward_equivalence",
    "predict_x0",
    "ddpm_reverse_kernel",
    "ddim_step",
    "ddim_timesteps",
    "cfg_combine",
    "sample_latent",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule ``beta_1..beta_T`` and its derived products.

    ``alpha_bar`` has length ``T + 1`` with ``alpha_bar[0] = 1`` so that it
    can be indexed directly by timestep.
    """

    beta: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-d sequence")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta_t must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.alpha)])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["T"], d["beta_start"], d["beta_end"], d["kind"])


@dataclass
class ReverseKernel:
    """Gaussian reverse transition ``N(mu, sigma^2 I)``."""

    mu: object
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class Conditioning:
    """Text conditioning: an (L, width) or (B, L, width) embedding."""

    embedding: torch.Tensor
    null_flag: bool = False

    @property
    def width(self) -> int:
        return int(self.embedding.shape[-1])


@dataclass
class NoisePrediction:
    eps_hat: object
    eps_true: Optional[object] = None

    def __post_init__(self):
        if self.eps_true is not None and tuple(self.eps_true.shape) != tuple(self.eps_hat.shape):
            raise ValueError(
                f"eps_true shape {tuple(self.eps_true.shape)} != eps_hat shape {tuple(self.eps_hat.shape)}"
            )


def make_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    """Build a monotone beta schedule.

    ``linear`` interpolates beta directly; ``scaled_linear`` interpolates
    ``sqrt(beta)`` and squares, as latent-diffusion checkpoints do.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        beta = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(beta=beta, kind=kind, beta_start=float(beta_start), beta_end=float(beta_end))


def _check_t(t, sched: NoiseSchedule, lo: int = 0):
    arr = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
    if np.any(arr < lo) or np.any(arr > sched.T):
        raise ValueError(f"timestep out of range [{lo}, {sched.T}]: {t}")
    return arr.astype(np.int64)


def _coef(values: np.ndarray, like):
    """Broadcast per-timestep coefficients against ``like``.

    Scalars stay Python floats; a batch of coefficients is reshaped to
    ``(B, 1, 1, ...)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device).reshape(shape)
    return values.astype(like.dtype, copy=False).reshape(shape)


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Closed-form forward corruption ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int or a length-B array of ints for a batch along axis 0.
    """
    _same_shape(x0, eps, "q_sample")
    ts = _check_t(t, sched)
    ab = sched.alpha_bar[ts]
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def iterated_forward_equivalence(x0: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator):
    """Run ``t`` single Markov forward steps from ``x0``.

    Each step draws ``x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) n_s``.
    This is the test oracle for :func:`q_sample`; ``x0`` may carry a leading
    trial axis to vectorise Monte-Carlo runs.
    """
    _check_t(t, sched)
    x = np.array(x0, dtype=np.float64, copy=True)
    for s in range(1, int(t) + 1):
        b = sched.beta[s - 1]
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    return x


def predict_x0(z_t, eps_hat, t, sched: NoiseSchedule):
    """Invert the closed-form corruption given a noise estimate."""
    _same_shape(z_t, eps_hat, "predict_x0")
    ts = _check_t(t, sched)
    ab = sched.alpha_bar[ts]
    if np.any(ab <= 0):
        raise ZeroDivisionError("alpha_bar_t is zero; x0 is not recoverable")
    return (z_t - _coef(np.sqrt(1.0 - ab), z_t) * eps_hat) / _coef(np.sqrt(ab), z_t)


def ddpm_reverse_kernel(z_t, eps_hat, t: int, sched: NoiseSchedule) -> ReverseKernel:
    """DDPM ancestral kernel with the posterior variance.

    Only used by tests; the sampler in this package is DDIM.
    """
    ts = int(_check_t(t, sched, lo=1))
    beta = sched.beta[ts - 1]
    ab = sched.alpha_bar[ts]
    ab_prev = sched.alpha_bar[ts - 1]
    mu = (z_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return ReverseKernel(mu=mu, sigma=float(np.sqrt(var)))


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0, noise=None):
    """One DDIM update from ``t`` to ``t_prev``.

    With ``eta = 0`` the update is deterministic and ``noise`` is ignored.
    For ``eta > 0`` a standard-normal ``noise`` array must be supplied so the
    caller owns the random source.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    _check_t(t, sched, lo=1)
    _check_t(t_prev, sched)
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t_prev])
    x0_hat = predict_x0(z_t, eps_hat, t, sched)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    dir_coef = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 requires an explicit noise array")
        out = out + sigma * noise
    return out


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending, uniformly strided timesteps over ``[1, T]`` including ``T``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed T ({T})")
    if steps == 1:
        return [T]
    ts = np.rint(np.linspace(1, T, steps)).astype(np.int64)
    return [int(x) for x in ts[::-1]]


def cfg_combine(eps_uncond, eps_cond, scale: float):
    """Classifier-free guidance: ``eps_u + scale * (eps_c - eps_u)``."""
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + scale * (eps_cond - eps_uncond)


Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def sample_latent(
    denoiser: Denoiser,
    cond: Conditioning,
    uncond: Optional[Conditioning],
    shape: Sequence[int],
    sched: NoiseSchedule,
    steps: int,
    guidance: float,
    seed: int,
    eta: float = 0.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Draw ``z_T ~ N(0, I)`` from ``seed`` and run the DDIM chain to ``z_0``.

    ``denoiser(z, t, context)`` receives a batch of latents, a batch of
    integer timesteps and the context embeddings. Guidance is skipped (one
    denoiser call per step) when ``guidance == 1`` or ``uncond`` is None.
    """
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    batch = z.shape[0]

    def _ctx(c: Conditioning):
        e = c.embedding.to(dtype)
        return e.expand(batch, *e.shape[-2:]) if e.ndim == 2 else e

    ctx_c = _ctx(cond)
    ctx_u = _ctx(uncond) if uncond is not None else None
    use_cfg = ctx_u is not None and guidance != 1.0

    ts = ddim_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((batch,), t, dtype=torch.long)
        eps_c = denoiser(z, tt, ctx_c)
        eps = cfg_combine(denoiser(z, tt, ctx_u), eps_c, guidance) if use_cfg else eps_c
        noise = torch.randn(z.shape, generator=gen, dtype=dtype) if eta > 0 else None
        z = ddim_step(z, eps, t, t_prev, sched, eta=eta, noise=noise)
    return z
