"""Synthetic visual-acoustic corpus.

Rooms are exponential-decay reverberators with a known RT60. Each room is
depicted by a 4-channel image whose mean intensity encodes its absorption,
and every utterance is a parametric harmonic "speech" signal rendered dry and
through the room. Ground-truth durations and pitch are known by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.signal
from PIL import Image

from . import audio
from .encoder import SIL_ID, VOCAB_SIZE, DEFAULT_SYMBOLS, write_vocab

RT60_RANGE = (0.2, 1.0)
IMAGE_SIZE = 64
TEXTURE_SIGMA = 0.05
TAIL_FRAMES = 48  # trailing silence that holds the free reverberant decay
LEXICON_SEED = 20230517
SPLITS = ("train", "valid", "test-seen", "test-unseen")
DEFAULT_RATIOS = {"train": 0.75, "valid": 0.125, "test-seen": 0.0625, "test-unseen": 0.0625}
UNVOICED = {"P", "T", "K", "F", "S", "SH", "TH", "HH", "CH"}


class ManifestError(ValueError):
    pass


class MissingAssetError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    room_id: int
    rt60: float

    @property
    def tau(self) -> float:
        return rt60_to_tau(self.rt60)

    @property
    def cue(self) -> float:
        return rt60_to_cue(self.rt60)


def rt60_to_tau(rt60: float) -> float:
    """Amplitude decay constant of ``exp(-t / tau)`` giving a 60 dB energy drop in ``rt60``."""
    return rt60 / (3.0 * math.log(10.0))


def rt60_to_cue(rt60: float) -> float:
    return (RT60_RANGE[1] - rt60) / (RT60_RANGE[1] - RT60_RANGE[0])


def make_room(rng: np.random.Generator, room_id: int = 0) -> RoomSpec:
    return RoomSpec(room_id, float(rng.uniform(*RT60_RANGE)))


def render_room_image(spec: RoomSpec, rng: np.random.Generator, mode: str = "mean") -> np.ndarray:
    """``(64, 64, 4)`` float image in [0, 1]; channel 3 is depth.

    ``mode="mean"`` carries the absorption cue in mean RGB intensity;
    ``mode="textured"`` keeps the mean at 0.5 and carries it in stripe frequency.
    """
    cue = spec.cue
    shape = (IMAGE_SIZE, IMAGE_SIZE)
    if mode == "mean":
        rgb = cue + TEXTURE_SIGMA * rng.standard_normal(shape + (3,))
    elif mode == "textured":
        y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] / IMAGE_SIZE
        freq = 2.0 + 6.0 * cue
        phase = rng.uniform(0, 2 * np.pi)
        pattern = 0.5 + 0.25 * np.sin(2 * np.pi * freq * x + phase) * np.sin(2 * np.pi * freq * y)
        rgb = pattern[..., None] + TEXTURE_SIGMA * rng.standard_normal(shape + (3,))
    else:
        raise ValueError(f"unknown image mode {mode!r}")
    depth = 1.0 - cue + TEXTURE_SIGMA * rng.standard_normal(shape + (1,))
    return np.clip(np.concatenate([rgb, depth], axis=-1), 0.0, 1.0)


@dataclass(frozen=True)
class PhonemeInventory:
    """Fixed acoustic realisation of every phoneme id."""

    base_duration: np.ndarray  # frames
    base_f0: np.ndarray  # Hz, 0 for unvoiced / silence
    formants: np.ndarray  # (V, 2) Hz
    words: tuple  # tuple of phoneme-id tuples


@lru_cache(maxsize=1)
def phoneme_inventory() -> PhonemeInventory:
    rng = np.random.default_rng(LEXICON_SEED)
    V = VOCAB_SIZE
    dur = rng.integers(3, 8, size=V)
    f0 = rng.uniform(100.0, 220.0, size=V)
    formants = np.stack([rng.uniform(300, 900, V), rng.uniform(1000, 2800, V)], axis=1)
    phones = np.arange(4, V)
    for i, sym in enumerate(DEFAULT_SYMBOLS):
        if i < 4 or sym in UNVOICED:
            f0[i] = 0.0
    words = tuple(tuple(int(p) for p in rng.choice(phones, size=rng.integers(2, 5))) for _ in range(40))
    return PhonemeInventory(dur, f0, formants, words)


def _harmonic_segment(n: int, f0: float, formants, rng) -> np.ndarray:
    t = np.arange(n) / audio.SAMPLE_RATE
    k = np.arange(1, int(audio.FMAX // f0) + 1)
    freqs = k * f0
    # broad formants on a flat floor: a rich tail keeps RT60 estimates stable
    env = sum(np.exp(-0.5 * ((freqs - f) / 300.0) ** 2) for f in formants) + 1.0
    env = env / np.sqrt(np.sum(env**2))
    phase = rng.uniform(0, 2 * np.pi, size=k.shape)
    return (env[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phase[:, None])).sum(0)


def _noise_segment(n: int, center: float, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / audio.SAMPLE_RATE)
    spec *= np.exp(-0.5 * ((f - center) / 1200.0) ** 2)
    seg = np.fft.irfft(spec, n)
    return seg / (np.std(seg) + 1e-12) * 0.5


def synthesize_dry(phonemes: Sequence[int], durations: Sequence[int], f0s: Sequence[float], rng) -> np.ndarray:
    """Concatenate per-phoneme segments with 5 ms raised-cosine edges."""
    inv = phoneme_inventory()
    hop = audio.HOP
    total = int(sum(durations))
    n_samples = total * hop - hop // 2  # gives exactly ``total`` centred frames
    out = np.zeros(total * hop)
    ramp = int(0.005 * audio.SAMPLE_RATE)
    pos = 0
    for p, d, f0 in zip(phonemes, durations, f0s):
        n = int(d) * hop
        if p != SIL_ID and n > 0:
            if f0 > 0:
                seg = _harmonic_segment(n, f0, inv.formants[p], rng)
            else:
                seg = _noise_segment(n, inv.formants[p, 1] + 2000.0, rng)
            win = np.ones(n)
            r = min(ramp, n // 2)
            win[:r] = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            win[n - r :] = win[:r][::-1]
            out[pos : pos + n] = 0.1 * seg * win
        pos += n
    return out[:n_samples]


def room_impulse_response(spec: RoomSpec, n: int, rng) -> np.ndarray:
    """Unit direct impulse followed by exponentially decaying white noise of unit total energy."""
    t = np.arange(1, n) / audio.SAMPLE_RATE
    tail = np.exp(-t / spec.tau) * rng.standard_normal(n - 1)
    tail /= np.sqrt(np.sum(tail**2))
    return np.concatenate([[1.0], tail])


def sample_text(rng) -> list[int]:
    words = phoneme_inventory().words
    n_words = int(rng.integers(2, 4))
    phones: list[int] = []
    for w in rng.choice(len(words), size=n_words):
        phones.extend(words[w])
    return phones


@dataclass
class SceneSample:
    sample_id: str
    phonemes: list
    durations: list
    f0: np.ndarray  # per frame, Hz
    dry: np.ndarray
    wet: np.ndarray
    dry_mel: np.ndarray
    mel: np.ndarray
    image: np.ndarray
    room: RoomSpec

    @property
    def tail_onset(self) -> int:
        """Sample index where the trailing silence (free decay) starts."""
        return int(sum(self.durations[:-1])) * audio.HOP


def render_sample(text_seed, spec: RoomSpec, rng: np.random.Generator, sample_id: str = "", image_mode: str = "mean") -> SceneSample:
    """Render one utterance in ``spec``'s room.

    ``text_seed`` seeds the phoneme content; ``rng`` drives prosody jitter,
    waveform phases, the RIR and the image texture.
    """
    inv = phoneme_inventory()
    phones = sample_text(np.random.default_rng(text_seed))
    durations = [max(2, int(inv.base_duration[p] + rng.integers(-1, 2))) for p in phones]
    f0_ph = [float(inv.base_f0[p] * (1 + rng.uniform(-0.02, 0.02))) for p in phones]
    phones = phones + [SIL_ID]
    durations = durations + [TAIL_FRAMES]
    f0_ph = f0_ph + [0.0]
    dry = synthesize_dry(phones, durations, f0_ph, rng)
    rir = room_impulse_response(spec, dry.shape[0], rng)
    wet = scipy.signal.fftconvolve(dry, rir)[: dry.shape[0]]
    f0 = np.repeat(np.asarray(f0_ph), durations)
    return SceneSample(
        sample_id=sample_id,
        phonemes=phones,
        durations=durations,
        f0=f0,
        dry=dry,
        wet=wet,
        dry_mel=audio.mel_spectrogram(dry).astype(np.float32),
        mel=audio.mel_spectrogram(wet).astype(np.float32),
        image=render_room_image(spec, rng, image_mode),
        room=spec,
    )


# ---------------------------------------------------------------------------
# splits and manifests


def split_counts(n: int, ratios: Optional[dict] = None) -> dict:
    ratios = dict(DEFAULT_RATIOS if ratios is None else ratios)
    if set(ratios) != set(SPLITS) or any(r < 0 for r in ratios.values()) or not math.isclose(sum(ratios.values()), 1.0):
        raise ManifestError(f"split ratios must cover {SPLITS} and sum to 1, got {ratios}")
    counts = {s: int(round(n * ratios[s])) for s in SPLITS if s != "train"}
    counts["train"] = n - sum(counts.values())
    if counts["train"] < 0:
        raise ManifestError("split ratios leave no training samples")
    return {s: counts[s] for s in SPLITS}


def assign_rooms(n: int, n_rooms: int, n_holdout: int, ratios: Optional[dict] = None) -> list[tuple[str, int]]:
    """Deterministic (split, room) for each sample index.

    The last ``n_holdout`` rooms host only test-unseen samples; seen rooms are
    filled round-robin, training first, so every test-seen room also appears in train.
    """
    if n_holdout >= n_rooms:
        raise ManifestError(f"holdout ({n_holdout}) must be smaller than rooms ({n_rooms})")
    counts = split_counts(n, ratios)
    if counts["test-unseen"] and n_holdout < 1:
        raise ManifestError("test-unseen split needs at least one held-out room")
    seen = n_rooms - n_holdout
    if counts["train"] < seen and counts["test-seen"]:
        raise ManifestError("too few training samples to cover every seen room")
    out = []
    for split in ("train", "valid", "test-seen"):
        out += [(split, i % seen) for i in range(counts[split])]
    out += [("test-unseen", seen + i % n_holdout) for i in range(counts["test-unseen"])]
    return out


@dataclass
class SampleRecord:
    sample_id: str
    split: str
    room_id: int
    rt60: float
    phonemes: list
    durations: list
    f0: list
    wav: str
    dry_wav: str
    mel: str
    dry_mel: str
    image: str

    @property
    def tail_onset(self) -> int:
        return int(sum(self.durations[:-1])) * audio.HOP


@dataclass
class DatasetManifest:
    root: Path
    records: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def rooms(self, split: str) -> set:
        return {r.room_id for r in self.split(split)}

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records


def check_disjoint(manifest: DatasetManifest) -> None:
    shared = manifest.rooms("train") & manifest.rooms("test-unseen")
    if shared:
        raise ManifestError(f"test-unseen rooms {sorted(shared)} also appear in train")


def write_manifest(manifest: DatasetManifest, path) -> None:
    check_disjoint(manifest)
    lines = [json.dumps(asdict(r), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, check_assets: bool = True) -> DatasetManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(SampleRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if records[-1].split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {records[-1].split!r}")
    manifest = DatasetManifest(path.parent, records)
    check_disjoint(manifest)
    if check_assets:
        missing = [
            str(path.parent / getattr(r, key))
            for r in records
            for key in ("wav", "dry_wav", "mel", "dry_mel", "image")
            if not (path.parent / getattr(r, key)).exists()
        ]
        if missing:
            raise MissingAssetError("missing assets:\n  " + "\n  ".join(missing))
    return manifest


def save_image(path, image: np.ndarray) -> None:
    """RGBA PNG; depth lives in the alpha channel."""
    Image.fromarray(np.round(image * 255).astype(np.uint8), mode="RGBA").save(path)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGBA"), dtype=np.float32) / 255.0


def sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), 1, int(index)])


def generate_dataset(
    out_dir,
    n: int = 128,
    n_rooms: int = 12,
    n_holdout: int = 2,
    seed: int = 0,
    ratios: Optional[dict] = None,
    image_mode: str = "mean",
) -> DatasetManifest:
    """Render ``n`` samples and their assets under ``out_dir``; writes ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    plan = assign_rooms(n, n_rooms, n_holdout, ratios)
    room_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    rooms = [make_room(room_rng, i) for i in range(n_rooms)]
    for sub in ("wav", "mel", "img"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    write_vocab(out_dir / "vocab.txt")
    records = []
    for i, (split, room_id) in enumerate(plan):
        sid = f"S{i:05d}"
        ss = sample_seed(seed, i)
        text_seed, render_seed = ss.spawn(2)
        s = render_sample(text_seed, rooms[room_id], np.random.default_rng(render_seed), sid, image_mode)
        rec = SampleRecord(
            sample_id=sid,
            split=split,
            room_id=room_id,
            rt60=s.room.rt60,
            phonemes=[int(p) for p in s.phonemes],
            durations=[int(d) for d in s.durations],
            f0=[round(float(f), 3) for f in s.f0],
            wav=f"wav/{sid}.wav",
            dry_wav=f"wav/{sid}_dry.wav",
            mel=f"mel/{sid}.mel",
            dry_mel=f"mel/{sid}_dry.mel",
            image=f"img/{sid}.png",
        )
        audio.write_wav(out_dir / rec.wav, s.wet)
        audio.write_wav(out_dir / rec.dry_wav, s.dry)
        audio.write_mel(out_dir / rec.mel, s.mel)
        audio.write_mel(out_dir / rec.dry_mel, s.dry_mel)
        save_image(out_dir / rec.image, s.image)
        records.append(rec)
    manifest = DatasetManifest(out_dir, records)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
