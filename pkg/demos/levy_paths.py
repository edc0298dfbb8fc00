"""Uncontrolled paths with and without jumps, and the energy budget they obey.

    python3 demos/levy_paths.py
"""

from dataclasses import replace

import numpy as np

from levyhjb.config import default_config
from levyhjb.integrator import run_paths
from levyhjb.rng import Streams
from levyhjb.spectral import trace_fractional
from levyhjb.validation import energy_balance

cfg = default_config()
model = cfg.model()
x0 = cfg.x0

for label, mdl in [("gaussian only", replace(model, jumps=None)), ("with jumps", model)]:
    b = run_paths(mdl, cfg.integrator, x0[None], np.arange(2000), Streams(1))
    term = np.sum(b.state[0] ** 2, -1)
    print(f"{label:>14}: E|Y_T|^2 = {term.mean():.4f}, E sup|Y|^2 = {b.sup_sq[0].mean():.4f}, "
          f"jumps per path = {b.n_jumps.mean():.2f}")

# Ito energy budget: E|Y_T|^2 + 2 E int |Y|_{1/2}^2 - |x|^2 = T (Tr A^-eps + rate E|G|^2)
est, rhs = energy_balance(model, cfg.integrator, x0, 10_000, Streams(2))
print(f"energy budget: monte carlo {est.value:.4f} +- {est.stderr:.4f}, closed form {rhs:.4f}")
print(f"  of which Gaussian trace {trace_fractional(model.basis, model.eps) * cfg.integrator.T:.4f}")
