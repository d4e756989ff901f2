import math

import numpy as np
import pytest
import torch

from vitts.diffusion import make_schedule
from vitts.encoder import MASK_ID, PAD_ID, VOCAB_SIZE, VisualTextEncoder
from vitts.pretraining import (
    KEEP,
    MASK,
    RANDOM,
    MaskedLMHead,
    make_span_mask,
    mask_batch,
    mask_phonemes,
    masked_lm_loss,
    num_masked,
    pretrain_denoiser_step,
    span_mask_mel,
    span_starts_count,
)

from helpers import masking_statistics


def test_mask_count_rule():
    assert num_masked(20) == 3
    assert num_masked(1) == 1
    assert num_masked(10) == 2  # 1.5 rounds half up
    assert num_masked(3) == 1


def test_mask_statistics():
    stats = masking_statistics(n_draws=100_000, length=20, seed=0)
    assert stats["counts_exact"]
    for action, p in ((MASK, 0.8), (KEEP, 0.1), (RANDOM, 0.1)):
        assert abs(stats["action_freq"][action] - p) < 0.01
    assert np.all(np.abs(stats["position_freq"] - 0.15) < 0.01)


def test_corruption_only_at_selected_positions():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        seq = rng.integers(2, VOCAB_SIZE, size=int(rng.integers(1, 30)))
        corrupted, targets, plan = mask_phonemes(seq, rng)
        changed = np.nonzero(corrupted != seq)[0]
        active = plan.positions[plan.actions != KEEP]
        assert set(changed) <= set(active)
        assert np.all(corrupted[plan.positions[plan.actions == MASK]] == MASK_ID)
        rand = corrupted[plan.positions[plan.actions == RANDOM]]
        assert np.all((rand != PAD_ID) & (rand != MASK_ID) & (rand < VOCAB_SIZE))
        assert np.all(targets[plan.positions] == seq[plan.positions])
        assert np.sum(targets != -100) == len(plan.positions)


def test_mask_batch_leaves_padding():
    rng = np.random.default_rng(0)
    ph = torch.tensor([[5, 6, 7, 8, 0, 0], [5, 6, 7, 8, 9, 10]])
    corrupted, targets = mask_batch(ph, rng)
    assert torch.all(corrupted[0, 4:] == PAD_ID)
    assert torch.all(targets[0, 4:] == -100)


def test_masked_lm_loss_oracles():
    L = 12
    seq = np.arange(2, 2 + L)
    _, targets, plan = mask_phonemes(seq, np.random.default_rng(0))
    uniform = torch.zeros(L, VOCAB_SIZE)
    assert float(masked_lm_loss(uniform, targets)) == pytest.approx(math.log(73), abs=1e-6)
    assert math.log(73) == pytest.approx(4.290, abs=1e-3)
    onehot = torch.nn.functional.one_hot(torch.as_tensor(seq), VOCAB_SIZE).float() * 100
    assert float(masked_lm_loss(onehot, targets)) < 1e-6
    logits = torch.randn(L, VOCAB_SIZE)
    base = masked_lm_loss(logits, targets)
    other = logits.clone()
    unselected = np.setdiff1d(np.arange(L), plan.positions)
    other[unselected] = torch.randn(len(unselected), VOCAB_SIZE) * 10
    assert float(masked_lm_loss(other, targets)) == pytest.approx(float(base), abs=1e-6)
    assert float(masked_lm_loss(logits, targets, plan)) == pytest.approx(float(base), abs=1e-6)


def test_masked_lm_loss_permutation_equivariant():
    torch.manual_seed(0)
    logits = torch.randn(10, VOCAB_SIZE)
    targets = torch.randint(2, VOCAB_SIZE, (10,))
    perm = torch.randperm(10)
    torch.testing.assert_close(masked_lm_loss(logits, targets), masked_lm_loss(logits[perm], targets[perm]))


def test_masked_lm_loss_requires_targets():
    with pytest.raises(ValueError):
        masked_lm_loss(torch.zeros(3, VOCAB_SIZE), torch.full((3,), -100))


def test_span_counts():
    assert span_starts_count(1000) == 65
    assert span_starts_count(1000, literal_percent=True) == 1
    sm = make_span_mask(1000, np.random.default_rng(0))
    assert len(sm.starts) == 65 and sm.frames.sum() <= 650
    lit = make_span_mask(1000, np.random.default_rng(0), literal_percent=True)
    assert len(lit.starts) == 1 and lit.frames.sum() == 10


def test_span_mask_is_union_of_spans():
    rng = np.random.default_rng(2)
    for _ in range(500):
        n = int(rng.integers(10, 400))
        sm = make_span_mask(n, rng)
        expected = set()
        for s in sm.starts:
            expected |= set(range(s, min(s + sm.span, n)))
        assert set(np.nonzero(sm.frames)[0]) == expected
        assert sm.frames.shape == (n,)


def test_span_mask_mel_zeroes_frames():
    mel = torch.randn(100, 80)
    masked, sm = span_mask_mel(mel, np.random.default_rng(0))
    assert torch.all(masked[torch.as_tensor(sm.frames)] == 0)
    assert torch.equal(masked[~torch.as_tensor(sm.frames)], mel[~torch.as_tensor(sm.frames)])
    with pytest.raises(ValueError):
        make_span_mask(5, np.random.default_rng(0))


def test_denoiser_step_oracle_zero_loss():
    """An oracle that recovers the injected noise exactly scores zero."""
    sched = make_schedule()
    mel = torch.randn(3, 40, 80, dtype=torch.float64)
    mask = torch.ones(3, 40, dtype=torch.bool)
    mask[2, 30:] = False
    rng_ref = np.random.default_rng(5)
    x0 = mel.clone()
    for b, n in enumerate(mask.sum(1).tolist()):
        x0[b, :n], _ = span_mask_mel(x0[b, :n], rng_ref)
    ab = torch.as_tensor(sched.alpha_bars)

    def oracle(x_t, t, cond, mask=None):
        a = ab[t - 1].reshape(-1, 1, 1)
        return (x_t - a.sqrt() * x0) / (1 - a).sqrt()

    loss = pretrain_denoiser_step(oracle, mel, sched, np.random.default_rng(5), torch.Generator().manual_seed(0), mask)
    assert float(loss) < 1e-20


def test_masked_lm_head_shapes():
    head = MaskedLMHead(VisualTextEncoder(text_only=True))
    assert head(torch.randint(2, VOCAB_SIZE, (2, 9))).shape == (2, 9, VOCAB_SIZE)
