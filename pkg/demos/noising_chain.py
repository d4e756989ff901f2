"""Walk a toy signal through the forward chain and show how much of it survives.

The last column is the reason a tail of 48 frames stays readable at t = T:
sqrt(alpha_bar) times the frame count is well above the noise level.
"""

import torch

from vitts.diffusion import make_schedule, q_sample

sched = make_schedule()
x0 = torch.ones(1, 48, 80)
torch.manual_seed(0)
print(f"{'t':>4} {'alpha_bar':>10} {'signal':>8} {'mean of x_t':>12}")
for t in (1, 10, 25, 50, 75, 100):
    xt = q_sample(x0, torch.tensor([t]), torch.randn_like(x0), sched)
    ab = float(sched.alpha_bars[t - 1])
    print(f"{t:>4} {ab:>10.4f} {ab ** 0.5:>8.3f} {float(xt.mean()):>12.3f}")
