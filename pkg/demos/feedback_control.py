"""Solve for a value function on a small training set and compare policies.

    python3 demos/feedback_control.py

The feedback policy derived from the fitted value should beat both the zero
control and a random admissible control on common random numbers.
"""

from dataclasses import replace

from levyhjb import hjb
from levyhjb.config import default_config
from levyhjb.feynman_kac import Sampler
from levyhjb.integrator import ControlSignal
from levyhjb.rng import Streams
from levyhjb.validation import paired_cost_difference

cfg = default_config()
model = cfg.model()
hcfg = replace(cfg.hjb, n_mc=1000, n_cloud=30)
T, R, x = cfg.integrator.T, cfg.hjb.R, cfg.x0

mach = hjb.PicardMachinery.build(model, hcfg, Sampler(model, cfg.integrator.dt, Streams(3)))
v, report = hjb.solve_value_function(hcfg, mach)
print(f"Picard: {report.iterations} iterations, residuals "
      + " ".join(f"{r:.1e}" for r in report.residuals))
print(f"v(T, x0) = {float(v.value(T, x)):.4f}")

ev = Sampler(model, cfg.integrator.dt, Streams(4))
for name in ("zero", "random", "feedback"):
    ic = hjb.verify_identity(hjb.policy_by_name(name, v, R), v, x, T, 5000, ev, R)
    print(f"{name:>8}: cost {ic.lhs.value:.4f} +- {ic.lhs.stderr:.4f}, identity residual {ic.residual:+.4f}")

d = paired_cost_difference(ev, x, T, 5000, hjb.feedback_policy(v, R), ControlSignal.zero())
print(f"feedback - zero on common paths: {d.value:+.4f} +- {d.stderr:.4f}")
