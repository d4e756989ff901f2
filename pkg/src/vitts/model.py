"""Full visual TTS model and its batched data pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import audio
from .control import ControlModel
from .denoiser import DenoiserConfig, DiffusionTransformer
from .diffusion import DiffusionSchedule, ancestral_sample, q_sample, sample_steps, masked_mse
from .encoder import PAD_ID, VisualTextEncoder
from .variance import VarianceAdaptor, duration_loss, f0_to_feature, pitch_loss, quantize_f0

MEL_MIN = math.log(audio.LOG_FLOOR)
MEL_MAX = 0.0


def normalize_mel(mel):
    return (mel - MEL_MIN) / (MEL_MAX - MEL_MIN) * 2.0 - 1.0


def denormalize_mel(x):
    return (x + 1.0) / 2.0 * (MEL_MAX - MEL_MIN) + MEL_MIN


@dataclass
class Batch:
    """Padded batch. Masks are True on valid positions."""

    sample_ids: list
    phonemes: torch.Tensor  # (B, L)
    phoneme_mask: torch.Tensor
    durations: torch.Tensor  # (B, L)
    image: torch.Tensor  # (B, 4, 64, 64)
    mel: Optional[torch.Tensor] = None  # (B, F, 80), normalised
    frame_mask: Optional[torch.Tensor] = None
    pitch: Optional[torch.Tensor] = None  # (B, F) log-F0 feature
    pitch_bins: Optional[torch.Tensor] = None  # (B, F)

    def to(self, dtype: torch.dtype) -> "Batch":
        conv = lambda x: None if x is None else x.to(dtype)
        return Batch(
            self.sample_ids, self.phonemes, self.phoneme_mask, self.durations, conv(self.image),
            conv(self.mel), self.frame_mask, conv(self.pitch), self.pitch_bins,
        )


@dataclass
class Item:
    sample_id: str
    phonemes: np.ndarray
    durations: np.ndarray
    f0: np.ndarray
    mel: Optional[np.ndarray]  # raw log-mel (frames, 80)
    image: np.ndarray  # (64, 64, 4)
    room_id: int = -1
    rt60: float = float("nan")

    @property
    def tail_onset(self) -> int:
        return int(self.durations[:-1].sum()) * audio.HOP


def collate(items: Sequence[Item]) -> Batch:
    B = len(items)
    L = max(len(it.phonemes) for it in items)
    ph = torch.full((B, L), PAD_ID, dtype=torch.long)
    dur = torch.zeros(B, L, dtype=torch.long)
    for b, it in enumerate(items):
        ph[b, : len(it.phonemes)] = torch.as_tensor(it.phonemes)
        dur[b, : len(it.durations)] = torch.as_tensor(it.durations)
    image = torch.stack([torch.as_tensor(it.image, dtype=torch.float32).permute(2, 0, 1) for it in items])
    batch = Batch([it.sample_id for it in items], ph, ph != PAD_ID, dur, image)
    if all(it.mel is not None for it in items):
        F_ = max(it.mel.shape[0] for it in items)
        mel = torch.zeros(B, F_, audio.N_MELS)
        fmask = torch.zeros(B, F_, dtype=torch.bool)
        pitch = torch.zeros(B, F_)
        bins = torch.zeros(B, F_, dtype=torch.long)
        for b, it in enumerate(items):
            n = it.mel.shape[0]
            mel[b, :n] = torch.as_tensor(normalize_mel(it.mel), dtype=torch.float32)
            fmask[b, :n] = True
            pitch[b, :n] = torch.as_tensor(f0_to_feature(it.f0[:n]), dtype=torch.float32)
            bins[b, :n] = torch.as_tensor(quantize_f0(it.f0[:n]))
        batch.mel, batch.frame_mask, batch.pitch, batch.pitch_bins = mel, fmask, pitch, bins
    return batch


class VisualTTS(nn.Module):
    """Visual-text encoder, variance adaptor and diffusion decoder.

    ``decoder`` is either a plain :class:`DiffusionTransformer` (trained from
    scratch) or a :class:`ControlModel` wrapping a pretrained one.
    """

    def __init__(
        self,
        config: DenoiserConfig,
        text_only: bool = False,
        encoder: Optional[VisualTextEncoder] = None,
        decoder: Optional[nn.Module] = None,
        encoder_kwargs: Optional[dict] = None,
    ):
        super().__init__()
        self.encoder = encoder if encoder is not None else VisualTextEncoder(**(encoder_kwargs or {}))
        self.encoder.text_only = text_only
        width = self.encoder.width
        self.adaptor = VarianceAdaptor(width)
        self.decoder = decoder if decoder is not None else DiffusionTransformer(config, cond_dim=width)
        self.config = config

    @property
    def text_only(self) -> bool:
        return self.encoder.text_only

    @property
    def is_control(self) -> bool:
        return isinstance(self.decoder, ControlModel)

    def variance(self, batch: Batch, teacher_forcing: bool = True) -> dict:
        h = self.encoder(batch.phonemes, None if self.text_only else batch.image, batch.phoneme_mask)
        tf = teacher_forcing
        return self.adaptor(
            h,
            batch.phoneme_mask,
            durations=batch.durations if tf else None,
            pitch_bins=batch.pitch_bins if tf and batch.pitch_bins is not None else None,
        )

    def losses(
        self,
        batch: Batch,
        sched: DiffusionSchedule,
        generator: Optional[torch.Generator] = None,
        t: Optional[torch.Tensor] = None,
        noise: Optional[torch.Tensor] = None,
    ) -> dict:
        """Diffusion, duration and pitch losses plus their unit-weight sum."""
        if batch.mel is None or batch.pitch is None:
            raise ValueError("batch lacks mel/pitch targets")
        v = self.variance(batch, teacher_forcing=True)
        x0 = batch.mel
        if t is None:
            t = sample_steps(x0.shape[0], sched, generator)
        if noise is None:
            noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x_t = q_sample(x0, t, noise, sched)
        pred = self.decoder(x_t, t, v["hidden"], batch.frame_mask)
        diff = masked_mse(pred, noise, batch.frame_mask[..., None])
        dur = duration_loss(v["log_duration"], batch.durations, batch.phoneme_mask)
        pit = pitch_loss(v["pitch"], batch.pitch, batch.frame_mask)
        return {"total": diff + dur + pit, "diffusion": diff, "duration": dur, "pitch": pit}

    @torch.no_grad()
    def synthesize(
        self,
        batch: Batch,
        sched: DiffusionSchedule,
        seed: int = 0,
        teacher_forcing: bool = True,
    ) -> list[np.ndarray]:
        """Sample log-mels (raw scale, one ``(frames, 80)`` array per item)."""
        v = self.variance(batch, teacher_forcing=teacher_forcing)
        cond, mask = v["hidden"], v["mask"]
        dtype = cond.dtype

        def eps(x, t, c):
            return self.decoder(x, t, c, mask)

        x = ancestral_sample(eps, cond, sched, (cond.shape[0], cond.shape[1], audio.N_MELS), rng_seed=seed, dtype=dtype)
        lengths = mask.sum(1).tolist()
        return [denormalize_mel(x[b, : int(n)].double().numpy()) for b, n in enumerate(lengths)]


def finetune_loss(model: VisualTTS, batch: Batch, sched: DiffusionSchedule, t=None, noise=None, generator=None):
    """Total fine-tuning objective (diffusion + duration + pitch)."""
    return model.losses(batch, sched, generator, t=t, noise=noise)["total"]
