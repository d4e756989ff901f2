"""DDPM machinery: noise schedules, forward marginals, posteriors, the
noise-prediction objective and ancestral sampling.

Step indices are 1-based everywhere in the public API (``t`` in ``[1, T]``);
the per-step arrays on :class:`DiffusionSchedule` are stored 0-based, so the
value for step ``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

Denoiser = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]
StepLike = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Linear-beta schedule with every derived coefficient precomputed in float64."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    alpha_bars_prev: np.ndarray = field(repr=False)
    posterior_mean_coef_x0: np.ndarray = field(repr=False)
    posterior_mean_coef_xt: np.ndarray = field(repr=False)
    posterior_variance: np.ndarray = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end})

    @classmethod
    def from_json(cls, text: str) -> "DiffusionSchedule":
        rec = json.loads(text)
        return make_schedule(int(rec["T"]), float(rec["beta_start"]), float(rec["beta_end"]))

    def check_step(self, t: StepLike) -> None:
        lo, hi = _step_bounds(t)
        if lo < 1 or hi > self.T:
            raise ValueError(f"diffusion step out of range [1, {self.T}]: {lo}..{hi}")


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.06) -> DiffusionSchedule:
    """Build the linear schedule ``beta_t = beta_start + (t-1)/(T-1) * (beta_end - beta_start)``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("betas must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    one_minus = 1.0 - alpha_bars
    coef_x0 = np.sqrt(alpha_bars_prev) * betas / one_minus
    coef_xt = np.sqrt(alphas) * (1.0 - alpha_bars_prev) / one_minus
    post_var = (1.0 - alpha_bars_prev) / one_minus * betas
    return DiffusionSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
        posterior_mean_coef_x0=coef_x0,
        posterior_mean_coef_xt=coef_xt,
        posterior_variance=post_var,
    )


def _step_bounds(t: StepLike) -> tuple[int, int]:
    if isinstance(t, torch.Tensor):
        return int(t.min()), int(t.max())
    return int(t), int(t)


def _extract(arr: np.ndarray, t: StepLike, like: torch.Tensor) -> torch.Tensor:
    """Gather per-step coefficients for ``t`` and shape them to broadcast over ``like``."""
    table = torch.as_tensor(arr, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        out = table[t.long() - 1]
        return out.reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t) - 1]


def q_sample(x0: torch.Tensor, t: StepLike, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Draw ``x_t ~ q(x_t | x_0)`` in closed form for the supplied noise."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    sched.check_step(t)
    a = _extract(np.sqrt(sched.alpha_bars), t, x0)
    s = _extract(np.sqrt(1.0 - sched.alpha_bars), t, x0)
    return a * x0 + s * noise


def q_step(x_prev: torch.Tensor, t: int, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """One transition of the forward chain, ``x_t ~ N(sqrt(1-beta_t) x_{t-1}, beta_t I)``."""
    sched.check_step(t)
    beta = float(sched.betas[t - 1])
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def posterior_params(x0: torch.Tensor, x_t: torch.Tensor, t: StepLike, sched: DiffusionSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``.

    At ``t = 1`` the variance is exactly zero, matching the deterministic last
    step of the sampler.
    """
    if x0.shape != x_t.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != x_t shape {tuple(x_t.shape)}")
    sched.check_step(t)
    c0 = _extract(sched.posterior_mean_coef_x0, t, x0)
    c1 = _extract(sched.posterior_mean_coef_xt, t, x0)
    var = _extract(sched.posterior_variance, t, x0)
    return c0 * x0 + c1 * x_t, var


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error; ``mask`` (broadcastable, 1 = valid) restricts the average."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if mask is None:
        return F.mse_loss(pred, target)
    mask = mask.to(pred.dtype).expand_as(pred)
    return ((pred - target) ** 2 * mask).sum() / mask.sum().clamp_min(1.0)


def training_step_loss(
    denoiser: Denoiser,
    x0: torch.Tensor,
    cond: Optional[torch.Tensor],
    t: StepLike,
    noise: torch.Tensor,
    sched: DiffusionSchedule,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Noise-prediction loss: MSE between ``noise`` and the denoiser's estimate at ``x_t``."""
    x_t = q_sample(x0, t, noise, sched)
    if not isinstance(t, torch.Tensor):
        t = torch.full((x0.shape[0] if x0.ndim == 3 else 1,), int(t), dtype=torch.long)
    pred = denoiser(x_t, t, cond)
    if pred.shape != noise.shape:
        raise ValueError(f"denoiser returned shape {tuple(pred.shape)}, expected {tuple(noise.shape)}")
    return masked_mse(pred, noise, mask)


def sample_steps(batch: int, sched: DiffusionSchedule, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform random steps in ``[1, T]``."""
    return torch.randint(1, sched.T + 1, (batch,), generator=generator)


@torch.no_grad()
def ancestral_sample(
    denoiser: Denoiser,
    cond: Optional[torch.Tensor],
    sched: DiffusionSchedule,
    shape: tuple[int, ...],
    rng_seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the reverse chain from ``x_T ~ N(0, I)`` down to ``x_0``.

    The injected noise uses the posterior variance and is switched off at
    ``t = 1``. Either ``rng_seed`` or an explicit ``generator`` fixes the draw.
    """
    if any(int(s) <= 0 for s in shape):
        raise ValueError(f"shape must be positive, got {shape}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if rng_seed is None else int(rng_seed))
    x = torch.randn(shape, generator=generator, dtype=dtype)
    batch = shape[0] if len(shape) == 3 else 1
    for t in range(sched.T, 0, -1):
        tt = torch.full((batch,), t, dtype=torch.long)
        eps = denoiser(x, tt, cond)
        beta = float(sched.betas[t - 1])
        coef = beta / np.sqrt(1.0 - float(sched.alpha_bars[t - 1]))
        mean = (x - coef * eps) / np.sqrt(1.0 - beta)
        if t > 1:
            z = torch.randn(shape, generator=generator, dtype=dtype)
            x = mean + np.sqrt(float(sched.posterior_variance[t - 1])) * z
        else:
            x = mean
    return x
