import math

import numpy as np
import pytest
import torch
from scipy.integrate import trapezoid

from vitts.diffusion import (
    ancestral_sample,
    make_schedule,
    masked_mse,
    posterior_params,
    q_sample,
    q_step,
    training_step_loss,
)
from vitts.denoiser import DiffusionTransformer, make_config

from helpers import gradient_check


@pytest.fixture(scope="module")
def sched():
    return make_schedule(100, 1e-4, 0.06)


def test_schedule_endpoints(sched):
    assert sched.betas[0] == pytest.approx(1e-4, abs=1e-15)
    assert sched.betas[99] == pytest.approx(0.06, abs=1e-15)
    assert sched.alpha_bars[0] == pytest.approx(0.9999, abs=1e-15)
    assert sched.betas[49] == pytest.approx(1e-4 + 49 / 99 * 0.0599, abs=1e-12)
    assert sched.betas[49] == pytest.approx(0.0297485, abs=1e-5)  # quoted figure is rounded


def test_schedule_monotone(sched):
    assert np.all(np.diff(sched.betas) > 0)
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[0] == 1 - sched.betas[0]
    assert np.all(sched.posterior_variance >= 0)
    assert sched.posterior_variance[0] == 0.0


def test_schedule_json_round_trip(sched):
    other = type(sched).from_json(sched.to_json())
    np.testing.assert_array_equal(other.alpha_bars, sched.alpha_bars)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.06), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_params(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_degenerate_cases(sched):
    x0 = torch.randn(3, 7, 80, dtype=torch.float64)
    eps = torch.randn_like(x0)
    for t in (1, 37, 100):
        ab = sched.alpha_bars[t - 1]
        torch.testing.assert_close(q_sample(x0, t, torch.zeros_like(x0), sched), math.sqrt(ab) * x0)
        torch.testing.assert_close(q_sample(torch.zeros_like(x0), t, eps, sched), math.sqrt(1 - ab) * eps)


def test_q_sample_per_item_steps(sched):
    x0 = torch.randn(4, 5, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 10, 50, 100])
    out = q_sample(x0, t, eps, sched)
    for b in range(4):
        torch.testing.assert_close(out[b], q_sample(x0[b : b + 1], int(t[b]), eps[b : b + 1], sched)[0])


def test_q_sample_rejects_bad_step(sched):
    x0 = torch.zeros(1, 2, 2)
    with pytest.raises(ValueError):
        q_sample(x0, 0, x0, sched)
    with pytest.raises(ValueError):
        q_sample(x0, 101, x0, sched)
    with pytest.raises(ValueError):
        q_sample(x0, 5, torch.zeros(1, 3, 2), sched)


def test_posterior_zero_inputs(sched):
    z = torch.zeros(2, 3, dtype=torch.float64)
    for t in (1, 2, 50, 100):
        mean, _ = posterior_params(z, z, t, sched)
        assert torch.all(mean == 0)


def test_posterior_zero_noise_trajectory(sched):
    # x_t on the noiseless trajectory maps back to sqrt(abar_{t-1}) x0 at every step
    x0 = torch.randn(16, dtype=torch.float64)
    for t in range(1, 101):
        x_t = math.sqrt(sched.alpha_bars[t - 1]) * x0
        mean, _ = posterior_params(x0, x_t, t, sched)
        torch.testing.assert_close(mean, math.sqrt(sched.alpha_bars_prev[t - 1]) * x0, atol=1e-12, rtol=0)


def _quadrature_posterior(x0, xt, t, sched):
    """Bayes posterior of x_{t-1} on a dense grid: q(x_t|x_{t-1}) q(x_{t-1}|x0)."""
    beta = sched.betas[t - 1]
    ab_prev = sched.alpha_bars_prev[t - 1]
    m_prior, v_prior = math.sqrt(ab_prev) * x0, 1 - ab_prev
    # the grid must hold both the prior and the likelihood mass, wherever x_t lands
    m_lik, v_lik = xt / math.sqrt(1 - beta), beta / (1 - beta)
    sd = math.sqrt(max(v_prior, v_lik))
    grid = np.linspace(min(m_prior, m_lik) - 12 * sd, max(m_prior, m_lik) + 12 * sd, 200_001)
    log_w = -((xt - math.sqrt(1 - beta) * grid) ** 2) / (2 * beta) - (grid - m_prior) ** 2 / (2 * v_prior)
    w = np.exp(log_w - log_w.max())
    w /= trapezoid(w, grid)
    mean = trapezoid(w * grid, grid)
    var = trapezoid(w * (grid - mean) ** 2, grid)
    return mean, var


def test_posterior_matches_quadrature_sample(sched):
    rng = np.random.default_rng(0)
    for t in (2, 3, 10, 50, 99, 100):
        x0, xt = rng.normal(size=2) * 2
        mean, var = posterior_params(torch.tensor([x0]), torch.tensor([xt]), t, sched)
        qm, qv = _quadrature_posterior(x0, xt, t, sched)
        assert abs(float(mean) - qm) < 1e-4
        assert abs(float(var) - qv) < 1e-4


def test_q_step_matches_forward_transition(sched):
    x = torch.randn(5, dtype=torch.float64)
    eps = torch.randn(5, dtype=torch.float64)
    b = sched.betas[9]
    torch.testing.assert_close(q_step(x, 10, eps, sched), math.sqrt(1 - b) * x + math.sqrt(b) * eps)


def test_training_loss_oracles(sched):
    torch.manual_seed(0)
    x0 = torch.randn(64, 50, 80, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.randint(1, 101, (64,))

    assert float(training_step_loss(lambda x, t, c: eps, x0, None, t, eps, sched)) == 0.0
    zero = training_step_loss(lambda x, t, c: torch.zeros_like(x), x0, None, t, eps, sched)
    assert float(zero) == pytest.approx(1.0, abs=0.01)


def test_training_loss_permutation_invariant(sched):
    torch.manual_seed(1)
    x0 = torch.randn(1, 12, 80, dtype=torch.float64)
    eps = torch.randn_like(x0)
    net = lambda x, t, c: 0.3 * x
    perm = torch.randperm(12 * 80)
    flat = lambda a: a.reshape(1, -1)[:, perm].reshape(1, 12, 80)
    a = training_step_loss(net, x0, None, 40, eps, sched)
    b = training_step_loss(net, flat(x0), None, 40, flat(eps), sched)
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_masked_mse_ignores_padding():
    pred = torch.zeros(1, 4, 2)
    target = torch.ones(1, 4, 2)
    target[0, 2:] = 100.0
    mask = torch.tensor([[True, True, False, False]])[..., None]
    assert float(masked_mse(pred, target, mask)) == 1.0


def test_training_loss_gradient_check(sched):
    torch.manual_seed(3)
    net = DiffusionTransformer(make_config("S"), cond_dim=16).double().eval()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.02 * torch.randn_like(p))
    x0 = torch.randn(2, 9, 80, dtype=torch.float64)
    cond = torch.randn(2, 9, 16, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([7, 63])
    loss_fn = lambda: training_step_loss(net, x0, cond, t, eps, sched)
    errors = gradient_check(net, loss_fn, n_params=10, seed=0)
    assert max(errors) < 1e-4, errors


def test_ancestral_sample_deterministic(sched):
    torch.manual_seed(0)
    net = DiffusionTransformer(make_config("S")).eval()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.01 * torch.randn_like(p))
    a = ancestral_sample(net, None, sched, (2, 6, 80), rng_seed=5)
    b = ancestral_sample(net, None, sched, (2, 6, 80), rng_seed=5)
    assert torch.equal(a, b)


def test_ancestral_sample_finite_random_denoiser(sched):
    torch.manual_seed(0)
    net = DiffusionTransformer(make_config("S")).eval()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.05 * torch.randn_like(p))
    for seed in range(100):
        out = ancestral_sample(net, None, sched, (1, 4, 80), rng_seed=seed)
        assert torch.isfinite(out).all()


def test_ancestral_sample_point_mass_oracle(sched):
    # optimal predictor for data concentrated at mu recovers mu
    mu = 0.7

    def eps_star(x, t, c):
        ab = torch.as_tensor(sched.alpha_bars, dtype=x.dtype)[t - 1].reshape(-1, *([1] * (x.ndim - 1)))
        return (x - ab.sqrt() * mu) / (1 - ab).sqrt()

    out = ancestral_sample(eps_star, None, sched, (1000, 1, 1), rng_seed=0, dtype=torch.float64).flatten()
    se = max(float(out.std()) / math.sqrt(1000), 1e-12)
    assert abs(float(out.mean()) - mu) < 3 * se or abs(float(out.mean()) - mu) < 1e-9


def test_ancestral_single_step_is_deterministic_given_xT():
    s1 = make_schedule(1, 1e-4, 1e-4)
    calls = []

    def net(x, t, c):
        calls.append(int(t[0]))
        return torch.zeros_like(x)

    g = torch.Generator().manual_seed(4)
    x_T = torch.randn((1, 3, 2), generator=g)
    out = ancestral_sample(net, None, s1, (1, 3, 2), rng_seed=4)
    assert calls == [1]
    torch.testing.assert_close(out, x_T / math.sqrt(1 - 1e-4))
