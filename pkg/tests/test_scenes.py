import math

import numpy as np
import pytest

from vitts import audio
from vitts.audio import RT60FitError, waveform_rt60
from vitts.scenes import (
    IMAGE_SIZE,
    ManifestError,
    MissingAssetError,
    RoomSpec,
    assign_rooms,
    check_disjoint,
    generate_dataset,
    load_image,
    load_manifest,
    make_room,
    render_room_image,
    render_sample,
    rt60_to_tau,
    split_counts,
    write_manifest,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    return generate_dataset(root, n=32, n_rooms=6, n_holdout=2, seed=3)


def test_cue_endpoints_and_tau():
    assert RoomSpec(0, 1.0).cue == 0.0
    assert RoomSpec(0, 0.2).cue == pytest.approx(1.0)
    assert rt60_to_tau(0.691) == pytest.approx(0.1, abs=1e-4)
    spec = RoomSpec(0, 0.5)
    assert 3 * math.log(10) * spec.tau == pytest.approx(spec.rt60)


def test_make_room_range():
    rng = np.random.default_rng(0)
    rts = [make_room(rng).rt60 for _ in range(1000)]
    assert 0.2 <= min(rts) and max(rts) <= 1.0
    assert abs(np.mean(rts) - 0.6) < 0.02


def test_image_mean_tracks_cue():
    rng = np.random.default_rng(0)
    spec = RoomSpec(0, 0.6)  # cue 0.5
    means = [render_room_image(spec, rng)[..., :3].mean() for _ in range(100)]
    assert all(abs(m - 0.5) < 0.02 for m in means)
    a, b = render_room_image(spec, rng), render_room_image(spec, rng)
    assert not np.array_equal(a, b)
    assert a.shape == (IMAGE_SIZE, IMAGE_SIZE, 4)
    depth = a[..., 3].mean()
    assert abs(depth - 0.5) < 0.02


@pytest.mark.parametrize("rt60", [0.2, 1.0])
@pytest.mark.parametrize("mode", ["mean", "textured"])
def test_image_clipped(rt60, mode):
    img = render_room_image(RoomSpec(0, rt60), np.random.default_rng(1), mode)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_textured_mode_hides_cue_in_mean():
    rng = np.random.default_rng(2)
    lo = render_room_image(RoomSpec(0, 0.3), rng, "textured")[..., :3].mean()
    hi = render_room_image(RoomSpec(0, 0.9), rng, "textured")[..., :3].mean()
    assert abs(lo - hi) < 0.03
    with pytest.raises(ValueError):
        render_room_image(RoomSpec(0, 0.3), rng, "bogus")


@pytest.mark.parametrize("rt60", [0.25, 0.5, 0.8, 1.0])
def test_reverberant_rt60_closes_the_loop(rt60):
    s = render_sample(11, RoomSpec(0, rt60), np.random.default_rng(4))
    est = waveform_rt60(s.wet, onset=s.tail_onset)
    assert est == pytest.approx(rt60, rel=0.10)


def test_dry_signal_has_no_reverb():
    s = render_sample(11, RoomSpec(0, 0.8), np.random.default_rng(4))
    with pytest.raises((RT60FitError, ValueError)):  # the dry tail is exact silence
        waveform_rt60(s.dry, onset=s.tail_onset)
    assert waveform_rt60(s.wet, onset=s.tail_onset) > 0.5


def test_durations_match_frames():
    rng = np.random.default_rng(5)
    for seed in range(10):
        s = render_sample(seed, make_room(rng), rng)
        assert sum(s.durations) == s.mel.shape[0] == s.dry_mel.shape[0] == len(s.f0)
        assert len(s.phonemes) == len(s.durations)


def test_split_counts():
    assert split_counts(128) == {"train": 96, "valid": 16, "test-seen": 8, "test-unseen": 8}
    with pytest.raises(ManifestError):
        split_counts(10, {"train": 0.5, "valid": 0.5})


def test_holdout_partition():
    plan = assign_rooms(100, 10, 2)
    unseen = {room for split, room in plan if split == "test-unseen"}
    train = {room for split, room in plan if split == "train"}
    seen = {room for split, room in plan if split == "test-seen"}
    assert unseen <= {8, 9} and not unseen & train
    assert seen <= train
    with pytest.raises(ManifestError):
        assign_rooms(100, 4, 4)


def test_manifest_round_trip(small_dataset, tmp_path):
    loaded = load_manifest(small_dataset.root / "manifest.jsonl")
    assert loaded == small_dataset
    write_manifest(loaded, tmp_path / "m.jsonl")
    assert load_manifest(tmp_path / "m.jsonl", check_assets=False) == small_dataset


def test_assets_match_records(small_dataset):
    rec = small_dataset.records[0]
    mel = audio.read_mel(small_dataset.root / rec.mel)
    assert mel.shape == (sum(rec.durations), 80)
    img = load_image(small_dataset.root / rec.image)
    assert img.shape == (64, 64, 4)
    wave, sr = audio.read_wav(small_dataset.root / rec.wav)
    assert sr == audio.SAMPLE_RATE
    assert np.abs(audio.mel_spectrogram(wave) - mel).mean() < 0.1


def test_missing_asset_is_named(small_dataset, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(small_dataset.root, root)
    victim = root / small_dataset.records[3].image
    victim.unlink()
    with pytest.raises(MissingAssetError, match=str(victim)):
        load_manifest(root / "manifest.jsonl")


def test_malformed_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("{not json\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.jsonl")


def test_shared_room_detected(small_dataset):
    bad = load_manifest(small_dataset.root / "manifest.jsonl")
    leak = next(r for r in bad.records if r.split == "test-unseen")
    next(r for r in bad.records if r.split == "train").room_id = leak.room_id
    with pytest.raises(ManifestError):
        check_disjoint(bad)


def test_unseen_rooms_disjoint(small_dataset):
    assert not small_dataset.rooms("train") & small_dataset.rooms("test-unseen")
    assert small_dataset.rooms("test-seen") <= small_dataset.rooms("train")


def test_image_intensity_predicts_rt60(small_dataset):
    x = np.array([load_image(small_dataset.root / r.image)[..., :3].mean() for r in small_dataset.records])
    y = np.array([r.rt60 for r in small_dataset.records])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1 - resid.var() / y.var()
    assert r2 > 0.95


def test_generation_reproducible(small_dataset, tmp_path):
    again = generate_dataset(tmp_path, n=32, n_rooms=6, n_holdout=2, seed=3)
    assert (tmp_path / "manifest.jsonl").read_bytes() == (small_dataset.root / "manifest.jsonl").read_bytes()
    for rec in again.records[:5]:
        for key in ("wav", "mel", "image"):
            assert (tmp_path / getattr(rec, key)).read_bytes() == (small_dataset.root / getattr(rec, key)).read_bytes()
