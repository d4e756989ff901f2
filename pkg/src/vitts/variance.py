"""Variance adaptor: duration and pitch prediction plus length regulation."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PITCH_BINS = 300
UNVOICED_BIN = 0
F0_MIN = 40.0
F0_MAX = 800.0
UNVOICED_LOG_F0 = float(np.log(20.0))  # regression target for unvoiced frames
# voiced bins 1..299 share 299 log-uniform intervals on [F0_MIN, F0_MAX]
PITCH_EDGES = np.geomspace(F0_MIN, F0_MAX, PITCH_BINS)


def quantize_f0(f0) -> np.ndarray:
    """Map F0 in Hz to bin ids; anything below ``F0_MIN`` (including 0) is unvoiced."""
    f0 = np.asarray(f0, dtype=np.float64)
    bins = np.searchsorted(PITCH_EDGES, f0, side="right")
    bins = np.clip(bins, 1, PITCH_BINS - 1)
    return np.where(f0 < F0_MIN, UNVOICED_BIN, bins).astype(np.int64)


def f0_to_feature(f0) -> np.ndarray:
    f0 = np.asarray(f0, dtype=np.float64)
    return np.where(f0 < F0_MIN, UNVOICED_LOG_F0, np.log(np.maximum(f0, F0_MIN)))


def feature_to_f0(feat) -> np.ndarray:
    """Inverse of :func:`f0_to_feature`; predictions closer to the unvoiced code become 0 Hz."""
    feat = np.asarray(feat, dtype=np.float64)
    threshold = 0.5 * (UNVOICED_LOG_F0 + np.log(F0_MIN))
    return np.where(feat < threshold, 0.0, np.exp(feat))


def quantize_feature(feat: torch.Tensor) -> torch.Tensor:
    """Torch version of ``quantize_f0(feature_to_f0(feat))``, no gradient."""
    f0 = feature_to_f0(feat.detach().cpu().numpy())
    return torch.from_numpy(quantize_f0(f0)).to(feat.device)


class VariancePredictor(nn.Module):
    """Two conv1d+ReLU+LayerNorm+dropout stages and a scalar projection per position."""

    def __init__(self, width: int = 256, filter_size: int = 256, kernel: int = 3, dropout: float = 0.5):
        super().__init__()
        self.conv1 = nn.Conv1d(width, filter_size, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(filter_size)
        self.conv2 = nn.Conv1d(filter_size, filter_size, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(filter_size)
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(filter_size, 1)

    def forward(self, h: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = h.transpose(1, 2)
        x = self.dropout(self.norm1(F.relu(self.conv1(x)).transpose(1, 2)))
        x = self.dropout(self.norm2(F.relu(self.conv2(x.transpose(1, 2))).transpose(1, 2)))
        out = self.linear(x).squeeze(-1)
        if mask is not None:
            out = out * mask
        return out


def length_regulate(h: torch.Tensor, durations, max_len: Optional[int] = None):
    """Repeat row ``i`` of each sequence ``durations[i]`` times.

    ``h`` is ``(L, D)`` or ``(B, L, D)``; returns the expanded sequence (padded to
    the longest item for batches) and a frame mask.
    """
    durations = torch.as_tensor(durations, dtype=torch.long)
    if (durations < 0).any():
        raise ValueError("durations must be nonnegative")
    if h.ndim == 2:
        if durations.shape != (h.shape[0],):
            raise ValueError(f"{durations.shape[0]} durations for {h.shape[0]} rows")
        out = torch.repeat_interleave(h, durations, dim=0)
        return out, torch.ones(out.shape[0], dtype=torch.bool)
    if durations.shape != h.shape[:2]:
        raise ValueError(f"durations shape {tuple(durations.shape)} != {tuple(h.shape[:2])}")
    expanded = [torch.repeat_interleave(h[b], durations[b], dim=0) for b in range(h.shape[0])]
    lengths = [e.shape[0] for e in expanded]
    T = max(lengths) if max_len is None else max_len
    out = h.new_zeros(h.shape[0], T, h.shape[2])
    mask = torch.zeros(h.shape[0], T, dtype=torch.bool)
    for b, e in enumerate(expanded):
        n = min(e.shape[0], T)
        out[b, :n] = e[:n]
        mask[b, :n] = True
    return out, mask


def durations_from_log(log_dur: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Inference rounding: ``round(exp(pred) - 1)`` clamped to at least one frame."""
    d = torch.round(torch.exp(log_dur) - 1).clamp_min(1).long()
    if mask is not None:
        d = d * mask.long()
    return d


class VarianceAdaptor(nn.Module):
    def __init__(self, width: int = 256, filter_size: int = 256, kernel: int = 3, dropout: float = 0.5):
        super().__init__()
        self.duration = VariancePredictor(width, filter_size, kernel, dropout)
        self.pitch = VariancePredictor(width, filter_size, kernel, dropout)
        self.pitch_embed = nn.Embedding(PITCH_BINS, width)

    def forward(
        self,
        h: torch.Tensor,
        mask: torch.Tensor,
        durations: Optional[torch.Tensor] = None,
        pitch_bins: Optional[torch.Tensor] = None,
    ) -> dict:
        """Teacher-forced when ``durations``/``pitch_bins`` are given, predicted otherwise."""
        log_dur = self.duration(h, mask)
        if durations is None:
            durations = durations_from_log(log_dur, mask)
        elif (durations.sum(-1) == 0).any():
            raise ValueError("an item has zero total duration; it would expand to no frames")
        frames, frame_mask = length_regulate(h, durations)
        pitch = self.pitch(frames, frame_mask)
        if pitch_bins is None:
            pitch_bins = quantize_feature(pitch)
        pitch_bins = pitch_bins[:, : frames.shape[1]]
        out = (frames + self.pitch_embed(pitch_bins)) * frame_mask[..., None]
        return {
            "hidden": out,
            "mask": frame_mask,
            "log_duration": log_dur,
            "durations": durations,
            "pitch": pitch,
            "pitch_bins": pitch_bins,
        }


def duration_loss(log_dur_pred, durations, mask) -> torch.Tensor:
    target = torch.log(durations.to(log_dur_pred.dtype) + 1.0)
    m = mask.to(log_dur_pred.dtype)
    return ((log_dur_pred - target) ** 2 * m).sum() / m.sum().clamp_min(1.0)


def pitch_loss(pitch_pred, pitch_target, mask) -> torch.Tensor:
    m = mask.to(pitch_pred.dtype)
    return ((pitch_pred - pitch_target) ** 2 * m).sum() / m.sum().clamp_min(1.0)
