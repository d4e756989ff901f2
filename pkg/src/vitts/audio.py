"""Acoustic front end and objective metrics.

Mel extraction and Griffin-Lim inversion share one STFT convention
(22.05 kHz, FFT 1024, hop 256, Hann window 1024, centered with reflection
padding). RT60 is estimated from Schroeder backward integration with a T20
line fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.fft
import scipy.io.wavfile
import torch

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
WIN = 1024
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5
MCD_COEFFS = 13
MCD_CONST = 10.0 / np.log(10.0)


class RT60FitError(ValueError):
    """The decay curve does not cover the fit range."""


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=4)
def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX):
    """Triangular, area-normalised filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_band_edges(sr: int = SAMPLE_RATE, n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """``(n_mels, 2)`` lower/upper edge in Hz of every triangular filter."""
    hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return np.stack([hz[:-2], hz[2:]], axis=1)


def _window():
    return torch.hann_window(WIN, periodic=True, dtype=torch.float64)


def stft(wave: np.ndarray) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(wave, dtype=np.float64))
    return torch.stft(x, N_FFT, HOP, WIN, window=_window(), center=True, pad_mode="reflect", return_complex=True)


def istft(spec: torch.Tensor, length: Optional[int] = None) -> np.ndarray:
    return torch.istft(spec, N_FFT, HOP, WIN, window=_window(), center=True, length=length).numpy()


def mel_spectrogram(wave: np.ndarray) -> np.ndarray:
    """``(frames, 80)`` natural-log mel magnitudes; ``frames = len(wave) // 256 + 1``."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.shape[0] < WIN:
        raise ValueError(f"need a mono waveform of at least {WIN} samples, got shape {wave.shape}")
    mag = stft(wave).abs().numpy()
    mel = mel_filterbank() @ mag
    return np.log(np.maximum(mel, LOG_FLOOR)).T


def griffin_lim(mel: np.ndarray, iterations: int = 60, momentum: float = 0.99, seed: int = 0) -> np.ndarray:
    """Invert a log-mel spectrogram to a waveform.

    Magnitudes come from the pseudo-inverse filterbank (clipped at zero); phase
    is recovered with momentum-accelerated Griffin-Lim from a seeded random start.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise ValueError(f"expected (frames, {N_MELS}) mel, got {mel.shape}")
    fb = mel_filterbank()
    mag = np.maximum(np.linalg.pinv(fb) @ np.exp(mel.T), 0.0)
    mag = torch.as_tensor(mag)
    length = (mel.shape[0] - 1) * HOP
    rng = np.random.default_rng(seed)
    angles = torch.as_tensor(np.exp(2j * np.pi * rng.random(mag.shape)))
    prev = torch.zeros_like(angles)
    for _ in range(iterations):
        rebuilt = stft(istft(mag * angles, length))
        est = rebuilt - (momentum / (1 + momentum)) * prev
        angles = est / est.abs().clamp_min(1e-16)
        prev = rebuilt
    return istft(mag * angles, length)


@dataclass
class RT60Estimate:
    seconds: float
    fit_range: tuple[float, float]
    slope_db_per_s: float


def schroeder_decay(signal: np.ndarray) -> np.ndarray:
    """Energy decay curve in dB: remaining energy from each sample on, relative to the total."""
    s = np.asarray(signal, dtype=np.float64)
    energy = np.cumsum((s**2)[::-1])[::-1]
    if energy.size == 0 or energy[0] <= 0:
        raise ValueError("signal has no energy")
    with np.errstate(divide="ignore"):
        edc = 10.0 * np.log10(energy / energy[0])
    # running minimum guards against round-off upticks in the cumulative sum
    return np.minimum.accumulate(edc)


def rt60_from_edc(edc: np.ndarray, sample_rate: float = SAMPLE_RATE, fit_db=(-5.0, -25.0)) -> RT60Estimate:
    """Least-squares line over the ``fit_db`` segment, extrapolated to a 60 dB decay."""
    hi, lo = fit_db
    edc = np.asarray(edc, dtype=np.float64)
    below_hi = np.nonzero(edc <= hi)[0]
    below_lo = np.nonzero(edc <= lo)[0]
    if below_lo.size == 0 or below_hi.size == 0:
        raise RT60FitError(f"decay curve never reaches {lo} dB (minimum {np.min(edc):.1f} dB)")
    i0, i1 = below_hi[0], below_lo[0]
    if i1 - i0 < 2:
        raise RT60FitError("fit segment has fewer than two samples")
    t = np.arange(i0, i1 + 1) / sample_rate
    slope, _ = np.polyfit(t, edc[i0 : i1 + 1], 1)
    if not slope < 0:
        raise RT60FitError(f"nonnegative decay slope {slope}")
    return RT60Estimate(seconds=float(-60.0 / slope), fit_range=(hi, lo), slope_db_per_s=float(slope))


def waveform_rt60(wave: np.ndarray, sample_rate: float = SAMPLE_RATE, onset: Optional[int] = None) -> float:
    """RT60 of a waveform; ``onset`` (samples) restricts the analysis to the free decay after it."""
    wave = np.asarray(wave, dtype=np.float64)
    if onset is not None:
        wave = wave[int(onset) :]
    return rt60_from_edc(schroeder_decay(wave), sample_rate).seconds


def rte(generated: np.ndarray, reference: np.ndarray, sample_rate: float = SAMPLE_RATE, onset: Optional[int] = None) -> float:
    """Absolute RT60 difference in seconds."""
    return abs(waveform_rt60(generated, sample_rate, onset) - waveform_rt60(reference, sample_rate, onset))


def mel_cepstrum(mel: np.ndarray, n_coeffs: int = MCD_COEFFS) -> np.ndarray:
    return scipy.fft.dct(np.asarray(mel, dtype=np.float64), type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def mcd(mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    """Frame-aligned mel cepstral distortion in dB (c0 excluded)."""
    mel_a, mel_b = np.asarray(mel_a), np.asarray(mel_b)
    if mel_a.shape != mel_b.shape:
        raise ValueError(f"frame mismatch: {mel_a.shape} vs {mel_b.shape}")
    diff = mel_cepstrum(mel_a)[:, 1:] - mel_cepstrum(mel_b)[:, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff**2, axis=-1))))


def write_wav(path, wave: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-bit PCM; samples outside [-1, 1] are clipped."""
    pcm = np.round(np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0) * 32767.0).astype("<i2")
    scipy.io.wavfile.write(str(path), sample_rate, pcm)


def read_wav(path) -> tuple[np.ndarray, int]:
    sr, pcm = scipy.io.wavfile.read(str(path))
    if pcm.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got {pcm.dtype}")
    return pcm.astype(np.float64) / 32767.0, sr


def metric_record(sample_id: str, generated: np.ndarray, reference: np.ndarray, mel_gen, mel_ref, onset=None) -> dict:
    """One evaluation record ``{sample_id, rt60_gen, rt60_ref, rte, mcd}``; failed fits become null."""
    def _safe(w):
        try:
            return waveform_rt60(w, SAMPLE_RATE, onset)
        except (RT60FitError, ValueError):
            return None

    g, r = _safe(generated), _safe(reference)
    return {
        "sample_id": sample_id,
        "rt60_gen": g,
        "rt60_ref": r,
        "rte": None if g is None or r is None else abs(g - r),
        "mcd": mcd(mel_gen, mel_ref),
    }


def write_mel(path, mel: np.ndarray) -> None:
    """Raw little-endian float32 matrix plus a ``.json`` sidecar ``{frames, bins, dtype}``."""
    path = Path(path)
    mel = np.ascontiguousarray(mel, dtype="<f4")
    path.write_bytes(mel.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"frames": mel.shape[0], "bins": mel.shape[1], "dtype": "float32"}))


def read_mel(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("dtype") != "float32":
        raise ValueError(f"{path}: unsupported dtype {meta.get('dtype')}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(meta["frames"], meta["bins"]).astype(np.float32)
