# %% [markdown]
# How much noise does epsilon = 1 cost?
#
# Each client runs DP-SGD with Poisson batches (rate q = B/n) for
# rounds * epochs * ceil(n/B) steps. The accountant composes the RDP of the
# subsampled Gaussian over those steps and calibrates sigma to the budget.

# %%
import math

import numpy as np

from fedcvae.privacy import DEFAULT_ORDERS, calibrate_noise, compute_rdp, epsilon_for, rdp_to_dp

# %% one step at q = 0.01, sigma = 1: tiny RDP at every order
rdp = compute_rdp(0.01, 1.0, 1)
print("order 2 rdp per step:", rdp[0], "(closed form", math.log1p(1e-4 * (math.e - 1)), ")")

# %% composition is additive, conversion picks the best order
for steps in (1, 100, 1000, 10_000):
    eps, order = rdp_to_dp(DEFAULT_ORDERS, compute_rdp(0.01, 1.0, steps), 1e-4)
    print(f"steps={steps:6d}  eps={eps:8.4f}  best order={order}")

# %% sigma needed for (1.0, 1e-4) on typical client sizes, B=16, 50 rounds x 5 epochs
print("\n  n     q      steps   sigma")
for n in (60, 120, 240, 480, 960):
    q = min(1.0, 16 / n)
    steps = 50 * 5 * math.ceil(n / 16)
    sigma = calibrate_noise(1.0, 1e-4, q, steps)
    print(f"{n:4d}  {q:.3f}  {steps:6d}  {sigma:7.3f}  (eps check {epsilon_for(sigma, q, steps, 1e-4):.6f})")

# %% bigger clients get away with less noise per step: the effective noise on
# the mean gradient scales like sigma * C / (q n) = sigma * C / B, but sigma
# itself grows slowly with the step count
sig = np.array([calibrate_noise(1.0, 1e-4, 16 / n, 250 * math.ceil(n / 16)) for n in (60, 960)])
print("\nsigma ratio n=960 vs n=60:", sig[1] / sig[0])
