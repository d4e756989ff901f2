"""Shared test utilities."""

import numpy as np
import torch


def gradient_check(module, loss_fn, n_params=10, seed=0, h=1e-4, min_grad=1e-6):
    """Relative errors of analytic vs central-difference gradients on sampled parameter entries.

    Entries are drawn uniformly from those with a non-negligible analytic gradient,
    so the relative error is well defined. Run in float64. With losses of order one,
    h = 1e-4 keeps roundoff in the difference well below the truncation error.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    candidates = []
    for i, p in enumerate(params):
        if p.grad is None:  # not on the loss path (e.g. the null condition when a condition is given)
            continue
        idx = (p.grad.abs() > min_grad).nonzero()
        candidates += [(i, tuple(j.tolist())) for j in idx]
    if len(candidates) < n_params:
        raise AssertionError(f"only {len(candidates)} parameters carry gradient")
    rng = np.random.default_rng(seed)
    picks = [candidates[k] for k in rng.choice(len(candidates), size=n_params, replace=False)]
    errors = []
    with torch.no_grad():
        for i, idx in picks:
            p = params[i]
            analytic = float(p.grad[idx])
            old = float(p[idx])
            p[idx] = old + h
            up = float(loss_fn())
            p[idx] = old - h
            down = float(loss_fn())
            p[idx] = old
            numeric = (up - down) / (2 * h)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return errors


def perturb(module, scale=0.02, seed=0):
    """Move every parameter off its (possibly zero) initialisation."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def masking_statistics(n_draws=100_000, length=20, seed=0):
    """Empirical action and position frequencies of the phoneme masker."""
    from vitts.pretraining import mask_phonemes, num_masked

    rng = np.random.default_rng(seed)
    seq = np.arange(2, 2 + length)
    actions = np.zeros(3, dtype=np.int64)
    positions = np.zeros(length, dtype=np.int64)
    counts_exact = True
    for _ in range(n_draws):
        _, _, plan = mask_phonemes(seq, rng)
        counts_exact &= len(plan.positions) == num_masked(length)
        actions += np.bincount(plan.actions, minlength=3)
        positions[plan.positions] += 1
    return {
        "counts_exact": bool(counts_exact),
        "action_freq": actions / actions.sum(),
        "position_freq": positions / n_draws,
    }


def exponential_decay(tau, rng, sample_rate=22050, length=None):
    """White noise under an ``exp(-t / tau)`` amplitude envelope; RT60 = 3 ln(10) tau."""
    n = int(sample_rate * (length if length is not None else max(1.0, 12 * tau)))
    t = np.arange(n) / sample_rate
    return np.exp(-t / tau) * rng.standard_normal(n)
