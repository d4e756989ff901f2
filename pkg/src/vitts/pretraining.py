"""Self-supervised objectives: BERT-style masked phoneme LM for the encoder and
span-masked unconditional diffusion for the denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import DiffusionSchedule, masked_mse, q_sample, sample_steps
from .encoder import MASK_ID, PAD_ID, VOCAB_SIZE, VisualTextEncoder

MASK, KEEP, RANDOM = 0, 1, 2
ACTION_PROBS = (0.8, 0.1, 0.1)
MASK_FRACTION = 0.15
SPAN_LENGTH = 10
SPAN_START_PROB = 0.065


@dataclass
class MaskPlan:
    positions: np.ndarray  # selected indices, sorted
    actions: np.ndarray  # MASK / KEEP / RANDOM per selected position


def num_masked(length: int, fraction: float = MASK_FRACTION) -> int:
    # round-half-up, at least one position
    return max(1, int(math.floor(fraction * length + 0.5)))


def mask_phonemes(seq, rng: np.random.Generator, vocab_size: int = VOCAB_SIZE, fraction: float = MASK_FRACTION):
    """Corrupt a phoneme sequence for masked-LM training.

    Returns ``(corrupted, targets, plan)``; ``targets`` holds the original id at
    selected positions and -100 elsewhere (the ``ignore_index`` convention).
    """
    seq = np.asarray(seq, dtype=np.int64)
    L = seq.shape[0]
    if L < 1:
        raise ValueError("empty phoneme sequence")
    positions = np.sort(rng.choice(L, size=num_masked(L, fraction), replace=False))
    actions = rng.choice(3, size=positions.shape[0], p=ACTION_PROBS)
    corrupted = seq.copy()
    corrupted[positions[actions == MASK]] = MASK_ID
    n_random = int((actions == RANDOM).sum())
    # random replacements never produce PAD or MASK
    corrupted[positions[actions == RANDOM]] = rng.integers(MASK_ID + 1, vocab_size, size=n_random)
    targets = np.full(L, -100, dtype=np.int64)
    targets[positions] = seq[positions]
    return corrupted, targets, MaskPlan(positions, actions)


def masked_lm_loss(logits: torch.Tensor, targets: torch.Tensor, plan: Optional[MaskPlan] = None) -> torch.Tensor:
    """Cross-entropy averaged over selected positions only.

    ``targets`` uses -100 for unselected positions; ``plan`` is optional and, when
    given, overrides that with its explicit position set (single sequence).
    """
    if plan is not None:
        idx = torch.as_tensor(plan.positions, dtype=torch.long)
        if idx.numel() == 0:
            raise ValueError("mask plan selects no positions")
        return F.cross_entropy(logits[idx], torch.as_tensor(targets)[idx])
    targets = torch.as_tensor(targets)
    if not (targets != -100).any():
        raise ValueError("no selected positions in targets")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


@dataclass
class SpanMask:
    starts: np.ndarray
    span: int
    frames: np.ndarray  # boolean, True = masked


def span_starts_count(n_frames: int, prob: float = SPAN_START_PROB, literal_percent: bool = False) -> int:
    p = prob / 100.0 if literal_percent else prob
    return int(math.ceil(p * n_frames))


def make_span_mask(
    n_frames: int,
    rng: np.random.Generator,
    prob: float = SPAN_START_PROB,
    span: int = SPAN_LENGTH,
    literal_percent: bool = False,
) -> SpanMask:
    if n_frames < span:
        raise ValueError(f"need at least {span} frames, got {n_frames}")
    n_starts = min(span_starts_count(n_frames, prob, literal_percent), n_frames)
    starts = np.sort(rng.choice(n_frames, size=n_starts, replace=False))
    masked = np.zeros(n_frames, dtype=bool)
    for s in starts:
        masked[s : s + span] = True
    return SpanMask(starts, span, masked)


def span_mask_mel(mel, rng: np.random.Generator, fill: float = 0.0, **kwargs):
    """Zero out spans of frames in a ``(frames, bins)`` mel; returns ``(masked, SpanMask)``."""
    sm = make_span_mask(mel.shape[0], rng, **kwargs)
    masked = mel.clone() if isinstance(mel, torch.Tensor) else np.array(mel, copy=True)
    masked[torch.as_tensor(sm.frames) if isinstance(mel, torch.Tensor) else sm.frames] = fill
    return masked, sm


class MaskedLMHead(nn.Module):
    """Encoder plus a vocabulary projection for masked-phoneme prediction."""

    def __init__(self, encoder: VisualTextEncoder):
        super().__init__()
        self.encoder = encoder
        self.proj = nn.Linear(encoder.width, encoder.vocab_size)

    def forward(self, phonemes: torch.Tensor) -> torch.Tensor:
        return self.proj(self.encoder(phonemes, text_only=True))


def mask_batch(phonemes: torch.Tensor, rng: np.random.Generator, vocab_size: int = VOCAB_SIZE):
    """Apply :func:`mask_phonemes` to every row of a padded ``(B, L)`` batch."""
    corrupted = phonemes.clone()
    targets = torch.full_like(phonemes, -100)
    for b in range(phonemes.shape[0]):
        valid = int((phonemes[b] != PAD_ID).sum())
        c, tg, _ = mask_phonemes(phonemes[b, :valid].numpy(), rng, vocab_size)
        corrupted[b, :valid] = torch.from_numpy(c)
        targets[b, :valid] = torch.from_numpy(tg)
    return corrupted, targets


def pretrain_denoiser_step(
    denoiser,
    mel: torch.Tensor,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    generator: Optional[torch.Generator] = None,
    mask: Optional[torch.Tensor] = None,
    masked_only: bool = False,
    literal_percent: bool = False,
) -> torch.Tensor:
    """Span-mask a ``(B, frames, bins)`` batch, noise it, and score the unconditional noise prediction.

    ``mask`` marks valid frames of padded items. Loss covers every valid frame
    unless ``masked_only`` is set.
    """
    B, T_frames, _ = mel.shape
    lengths = mask.sum(1).tolist() if mask is not None else [T_frames] * B
    x0 = mel.clone()
    span = torch.zeros(B, T_frames, dtype=torch.bool)
    for b, n in enumerate(lengths):
        n = int(n)
        if n < SPAN_LENGTH:
            continue
        masked, sm = span_mask_mel(x0[b, :n], rng, literal_percent=literal_percent)
        x0[b, :n] = masked
        span[b, :n] = torch.as_tensor(sm.frames)
    t = sample_steps(B, sched, generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, noise, sched)
    pred = denoiser(x_t, t, None, mask) if mask is not None else denoiser(x_t, t, None)
    loss_mask = mask if mask is not None else torch.ones(B, T_frames, dtype=torch.bool)
    if masked_only:
        loss_mask = loss_mask & span
    return masked_mse(pred, noise, loss_mask[..., None])
