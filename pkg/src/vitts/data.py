"""In-memory datasets built from a scene manifest."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import audio
from .model import Item
from .scenes import DatasetManifest, load_image


def load_items(manifest: DatasetManifest, splits: Sequence[str] | str) -> list[Item]:
    if isinstance(splits, str):
        splits = [splits]
    items = []
    for split in splits:
        for r in manifest.split(split):
            items.append(
                Item(
                    sample_id=r.sample_id,
                    phonemes=np.asarray(r.phonemes, dtype=np.int64),
                    durations=np.asarray(r.durations, dtype=np.int64),
                    f0=np.asarray(r.f0, dtype=np.float64),
                    mel=audio.read_mel(manifest.root / r.mel),
                    image=load_image(manifest.root / r.image),
                    room_id=r.room_id,
                    rt60=r.rt60,
                )
            )
    return items


def subsample(items: list[Item], fraction: float, seed: int) -> list[Item]:
    """Keep a deterministic ``fraction`` of items (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"train fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return list(items)
    k = max(1, int(round(fraction * len(items))))
    idx = np.sort(np.random.default_rng([seed, 7]).choice(len(items), size=k, replace=False))
    return [items[i] for i in idx]


def permute_images(items: list[Item], seed: int, pool: Optional[list[Item]] = None) -> list[Item]:
    """Reassign images by a seeded random permutation.

    With ``pool`` given, each item takes the image of a random draw from the
    permuted pool instead of from ``items`` itself.
    """
    source = items if pool is None else pool
    perm = np.random.default_rng([seed, 11]).permutation(len(source))
    out = []
    for i, it in enumerate(items):
        donor = source[perm[i % len(source)]]
        out.append(Item(it.sample_id, it.phonemes, it.durations, it.f0, it.mel, donor.image, it.room_id, it.rt60))
    return out
