"""Spectrogram denoiser: a diffusion transformer with adaLN-Zero blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

N_MELS = 80
STEP_FREQ_DIM = 256  # width of the raw sinusoidal step encoding


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int
    hidden: int
    heads: int
    name: str = "custom"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")


CONFIGS = {
    "S": DenoiserConfig(4, 256, 8, "S"),
    "B": DenoiserConfig(5, 384, 12, "B"),
    "L": DenoiserConfig(6, 512, 16, "L"),
    "XL": DenoiserConfig(8, 768, 16, "XL"),
}


def make_config(name: str) -> DenoiserConfig:
    try:
        return CONFIGS[name]
    except KeyError:
        raise ValueError(f"unknown denoiser config {name!r}; expected one of {sorted(CONFIGS)}") from None


def sinusoidal_encoding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sin/cos encoding of (possibly fractional) positions; sin channels first."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class StepEmbedding(nn.Module):
    """Sinusoidal step encoding followed by a two-layer MLP."""

    def __init__(self, width: int, freq_dim: int = STEP_FREQ_DIM):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width * 4), nn.SiLU(), nn.Linear(width * 4, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_encoding(t, self.freq_dim).to(w.dtype))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


def attention(q, k, v, key_mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """Scaled dot-product attention over ``(B, heads, len, d)`` tensors.

    ``key_mask`` is ``(B, len_k)`` with True for valid keys; invalid keys get -inf.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = scores.softmax(dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = attention(qkv[0], qkv[1], qkv[2], key_mask)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class AdaLNBlock(nn.Module):
    """Transformer block whose norms and residual gates are regressed per frame from ``c``.

    The regressor is zero-initialised, so a fresh block is exactly the identity.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def modulation(self, c: torch.Tensor):
        """Return (shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp)."""
        return self.ada(c).chunk(6, dim=-1)

    def forward(self, h: torch.Tensor, c: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if c.shape[-1] != h.shape[-1]:
            raise ValueError(f"condition width {c.shape[-1]} != hidden width {h.shape[-1]}")
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(c)
        h = h + g1 * self.attn(modulate(self.norm1(h), sh1, sc1), key_mask)
        h = h + g2 * self.mlp(modulate(self.norm2(h), sh2, sc2))
        return h


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.linear = nn.Linear(width, out_dim)
        for layer in (self.ada[1], self.linear):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, h, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(h), shift, scale))


class DiffusionTransformer(nn.Module):
    """Noise predictor ``eps(x_t, t, cond)`` over ``(B, frames, 80)`` mels.

    ``cond`` is the frame-aligned variance-adaptor output ``(B, frames, cond_dim)``;
    ``None`` selects the learned null condition (unconditional mode).
    """

    def __init__(self, config: DenoiserConfig, cond_dim: int = 256, n_mels: int = N_MELS):
        super().__init__()
        self.config = config
        self.n_mels = n_mels
        H = config.hidden
        self.in_proj = nn.Linear(n_mels, H)
        self.step_embed = StepEmbedding(H)
        self.cond_proj = nn.Linear(cond_dim, H)
        self.null_cond = nn.Parameter(torch.zeros(H))
        self.blocks = nn.ModuleList(AdaLNBlock(H, config.heads) for _ in range(config.layers))
        self.final = FinalLayer(H, n_mels)

    def embed_input(self, x_t: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(x_t.shape[1])
        pe = sinusoidal_encoding(pos, self.config.hidden).to(x_t.dtype)
        return self.in_proj(x_t) + pe

    def condition(self, t: torch.Tensor, cond: Optional[torch.Tensor], frames: int) -> torch.Tensor:
        """Per-frame conditioning vector: step embedding broadcast plus projected condition."""
        if t.ndim == 0:
            t = t[None]
        step = self.step_embed(t)[:, None, :]
        if cond is None:
            return step + self.null_cond
        if cond.shape[1] != frames:
            raise ValueError(f"condition has {cond.shape[1]} frames but x_t has {frames}")
        return step + self.cond_proj(cond)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        cond: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
        injections: Optional[list] = None,
    ) -> torch.Tensor:
        """``mask`` is ``(B, frames)`` with True on valid frames. ``injections`` holds one
        tensor (or None) per block, added to that block's input."""
        if x_t.shape[-1] != self.n_mels:
            raise ValueError(f"expected {self.n_mels} mel bins, got {x_t.shape[-1]}")
        c = self.condition(t, cond, x_t.shape[1])
        h = self.embed_input(x_t)
        for i, block in enumerate(self.blocks):
            if injections is not None and injections[i] is not None:
                h = h + injections[i]
            h = block(h, c, mask)
        return self.final(h, c)

    def block_outputs(self, x_t, t, cond=None, mask=None) -> list[torch.Tensor]:
        """Hidden stream after every block (used by the control branch)."""
        c = self.condition(t, cond, x_t.shape[1])
        h = self.embed_input(x_t)
        outs = []
        for block in self.blocks:
            h = block(h, c, mask)
            outs.append(h)
        return outs


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
