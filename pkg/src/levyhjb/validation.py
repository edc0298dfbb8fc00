"""Invariant and oracle battery behind ``levyhjb validate``.

Every check returns a :class:`CheckRecord`; a check passes when
``measured <= tolerance``.  ``fast`` runs the cheap subset, ``full`` runs all.
"""

from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import feynman_kac as fk
from . import hjb
from .config import ExperimentConfig
from .integrator import ControlSignal, GalerkinModel, IntegratorConfig, build_model, run_paths
from .noise import ito_isometry_diagnostic
from .rng import Role, Streams
from .spectral import (
    TrilinearTensor,
    build_basis,
    build_trilinear_tensor,
    fractional_norm,
    nonlinear_term,
    pseudo_spectral_nonlinear,
    trace_fractional,
)

REPORT_SCHEMA = "levyhjb.report"
REPORT_VERSION = 1


@dataclass(frozen=True)
class CheckRecord:
    name: str
    status: str
    measured: float
    tolerance: float
    stderr: float
    runtime: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "PASS"


def _record(name, measured, tolerance, stderr=0.0, detail="", t0=None) -> CheckRecord:
    ok = bool(np.isfinite(measured) and measured <= tolerance)
    return CheckRecord(name, "PASS" if ok else "FAIL", float(measured), float(tolerance),
                       float(stderr), 0.0 if t0 is None else time.perf_counter() - t0, detail)


class Context:
    """Lazily built objects shared by the checks."""

    def __init__(self, cfg: ExperimentConfig, level: str, tensor: TrilinearTensor | None = None):
        self.cfg = cfg
        self.level = level
        self.full = level == "full"
        self.streams = Streams(cfg.seed)
        self._model = None
        self._tensor = tensor
        self._value = None

    @property
    def model(self) -> GalerkinModel:
        if self._model is None:
            m = self.cfg.model()
            if self._tensor is not None:
                if self._tensor.m != m.m:
                    raise ValueError("injected tensor does not match the configured m")
                m = replace(m, tensor=self._tensor)
            self._model = m
        return self._model

    def sampler(self, salt: int, model=None, **kw) -> fk.Sampler:
        return fk.Sampler(model or self.model, self.cfg.integrator.dt, self.streams.child(salt),
                          self.cfg.integrator.scheme, workers=self.cfg.output.workers, **kw)

    def gen(self, salt: int) -> np.random.Generator:
        return self.streams.child(salt).generator(0, Role.MISC)

    @property
    def value(self):
        if self._value is None:
            cfg = self.cfg
            mach = hjb.PicardMachinery.build(self.model, cfg.hjb, self.sampler(100), cfg.fingerprint)
            self._value, self.solve_report = hjb.solve_value_function(cfg.hjb, mach)
            self.machinery = mach
        return self._value


def check_antisymmetry(ctx):
    t0 = time.perf_counter()
    tensor = ctx.model.tensor
    return _record("tensor_antisymmetry", tensor.antisymmetry_defect(), 0.0,
                   detail=f"m={tensor.m}, checksum {tensor.checksum[:12]}", t0=t0)


def check_energy_neutrality(ctx):
    t0 = time.perf_counter()
    tensor = ctx.model.tensor
    lam_m = float(tensor.basis.eigenvalues[-1])
    U = ctx.gen(1).standard_normal((1000, tensor.m)) * ctx.gen(2).uniform(0.1, 10, (1000, 1))
    lhs = np.abs(np.sum(nonlinear_term(U, tensor) * U, axis=1))
    bound = 1e-10 * np.maximum(1.0, np.linalg.norm(U, axis=1) ** 3 * lam_m)
    return _record("energy_neutrality", float(np.max(lhs / bound)), 1.0,
                   detail="max |<B(u),u>| / (1e-10 max(1, |u|^3 lambda_m))", t0=t0)


def check_pseudo_spectral(ctx):
    t0 = time.perf_counter()
    m = 8
    basis = build_basis(m)
    tensor = build_trilinear_tensor(basis)
    worst = 0.0
    for u in ctx.gen(3).standard_normal((100 if ctx.full else 20, m)):
        a = nonlinear_term(u, tensor)
        b = pseudo_spectral_nonlinear(u, basis)
        worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
    return _record("pseudo_spectral_oracle", worst, 1e-8, detail=f"m={m}", t0=t0)


def check_interpolation(ctx):
    t0 = time.perf_counter()
    basis = ctx.model.basis
    g = ctx.gen(4)
    worst = -math.inf
    for _ in range(200):
        u = g.standard_normal(basis.m)
        s1, s2 = np.sort(g.uniform(-1, 1, 2))
        th = g.uniform()
        s = th * s1 + (1 - th) * s2
        lhs = fractional_norm(u, basis, s)
        rhs = fractional_norm(u, basis, s1) ** th * fractional_norm(u, basis, s2) ** (1 - th)
        worst = max(worst, lhs / rhs - 1.0)
    return _record("interpolation_inequality", worst, 1e-12, detail="max(lhs/rhs - 1)", t0=t0)


def check_ito(ctx):
    t0 = time.perf_counter()
    n = 10000 if ctx.full else 2000
    lhs, rhs, se = ito_isometry_diagnostic(ctx.cfg.jump_model(), None, ctx.cfg.integrator.T, n,
                                           ctx.streams.child(5))
    return _record("ito_isometry", abs(lhs - rhs), 3 * se, se, f"lhs={lhs:.6g} rhs={rhs:.6g}", t0)


def check_hamiltonian(ctx):
    t0 = time.perf_counter()
    R = ctx.cfg.hjb.R or 0.5
    m = ctx.model.m
    g = ctx.gen(6)
    worst = 0.0
    for scale in (0.3, 1.0, 3.0):
        p = g.standard_normal(m)
        p *= scale * R / np.linalg.norm(p)
        worst = max(worst, abs(hjb.hamiltonian_bruteforce(p, R, 10000, g) - float(hjb.hamiltonian_F(p, R))))
    return _record("hamiltonian_oracle", worst, 1e-12, t0=t0)


def check_feedback(ctx):
    t0 = time.perf_counter()
    R = ctx.cfg.hjb.R or 0.5
    P = ctx.gen(7).standard_normal((1000, ctx.model.m)) * 2 * R
    U = hjb.feedback_G(P, R)
    attained = np.max(np.abs(np.sum(U * P, 1) + 0.5 * np.sum(U * U, 1) - hjb.hamiltonian_F(P, R)))
    over = np.max(np.linalg.norm(U, axis=1)) - R
    return _record("feedback_argmin", max(attained, over), 1e-12, t0=t0)


def check_decay(ctx):
    t0 = time.perf_counter()
    model = build_model(8, None)
    cfg = ctx.cfg.integrator
    x0s = ctx.gen(8).standard_normal((50 if ctx.full else 10, 8))
    b = run_paths(model, cfg, x0s, [0], 0, store_path=True)
    norms = np.linalg.norm(b.path[:, :, 0], axis=-1)
    env = np.linalg.norm(x0s, axis=1)[None] * np.exp(-cfg.times)[:, None] * (1 + 5 * cfg.dt)
    return _record("deterministic_decay", float(np.max(norms / env)), 1.0, detail="max |Y|/envelope",
                   t0=t0)


def check_ou_moment(ctx):
    t0 = time.perf_counter()
    model = replace(ctx.model, jumps=None)
    t = ctx.cfg.integrator.T
    x = ctx.cfg.x0
    n = 10000 if ctx.full else 3000
    est = fk.estimate_S(fk.SemigroupQuery(fk.energy(), t, x, 0.0, n), ctx.sampler(9, model, linear=True))
    lam = model.basis.eigenvalues
    exact = float(np.sum(np.exp(-2 * lam * t) * x * x)
                  + np.sum(lam ** -model.eps * -np.expm1(-2 * lam * t) / (2 * lam)))
    return _record("ou_second_moment", abs(est.value - exact), 3 * est.stderr,
                   est.stderr, f"mc={est.value:.6g} exact={exact:.6g}", t0)


def energy_balance(model, cfg_int, x, n, sampler_rng, workers=1):
    b = run_paths(model, cfg_int, x[None], np.arange(n), sampler_rng, workers=workers)
    lhs = np.sum(b.state[0] ** 2, -1) + 2 * b.enstrophy[0] - x @ x
    jm = model.jumps
    rhs = trace_fractional(model.basis, model.eps) * cfg_int.T + \
        (cfg_int.T * jm.second_moment() if jm is not None else 0.0)
    return fk.McEstimate.from_samples(lhs[b.ok[0]]), rhs


def check_energy_balance(ctx):
    t0 = time.perf_counter()
    n = 10000 if ctx.full else 3000
    est, rhs = energy_balance(ctx.model, ctx.cfg.integrator, ctx.cfg.x0, n, ctx.streams.child(10))
    return _record("energy_balance", abs(est.value - rhs), 3 * est.stderr, est.stderr,
                   f"mc={est.value:.6g} exact={rhs:.6g}", t0)


def check_tangent_fd(ctx):
    t0 = time.perf_counter()
    m = 8
    model = replace(ctx.cfg, m=m).model()
    cfg = ctx.cfg.integrator
    g = ctx.gen(11)
    worst = 0.0
    for trial in range(5 if ctx.full else 2):
        x, H = g.standard_normal(m), g.standard_normal(m)
        d = 1e-4
        b = run_paths(model, cfg, np.stack([x + d * H, x - d * H, x]), [trial], ctx.streams.child(11),
                      directions=H[None])
        fd = (b.state[0, 0] - b.state[1, 0]) / (2 * d)
        eta = b.tangent[2, 0, 0]
        worst = max(worst, np.linalg.norm(fd - eta) / np.linalg.norm(eta))
    return _record("tangent_fd", worst, 1e-3, detail=f"m={m}", t0=t0)


def check_bel(ctx):
    t0 = time.perf_counter()
    model = ctx.model
    n = 100000 if ctx.full else 10000
    x = ctx.cfg.x0
    H = x / np.linalg.norm(x)
    q = fk.SemigroupQuery(fk.energy(), ctx.cfg.integrator.T, x, ctx.cfg.hjb.gamma, n)
    s = ctx.sampler(12)
    g = fk.bel_gradient(q, s, H)
    d = fk.fd_gradient(q, s, H)
    se = math.hypot(g.stderr, d.stderr)
    return _record("bel_gradient_fd", abs(g.value - d.value), max(0.05 * abs(d.value), 3 * se), se,
                   f"bel={g.value:.6g} fd={d.value:.6g}", t0)


def check_zero_control(ctx):
    t0 = time.perf_counter()
    cfg = ctx.cfg
    mach = hjb.PicardMachinery.build(ctx.model, replace(cfg.hjb, R=0.0), ctx.sampler(100))
    v0 = hjb.zero_control_value(cfg.hjb, mach)
    worst = 0.0
    pts = mach.cloud[:20 if ctx.full else 5]
    for i, x in enumerate(pts):
        est = hjb.evaluate_cost(ControlSignal.zero(), x, cfg.integrator.T, 4000, ctx.sampler(200 + i))
        se = math.hypot(est.stderr, mach.base_se[-1, i])
        worst = max(worst, abs(v0.value(cfg.integrator.T, x) - est.value) / se)
    return _record("zero_control_consistency", worst, 3.0, detail="max |v0 - mc| / stderr", t0=t0)


def check_identity(ctx):
    t0 = time.perf_counter()
    v = ctx.value
    cfg = ctx.cfg
    worst, detail = 0.0, []
    for name in ("zero", "random", "feedback"):
        pol = hjb.policy_by_name(name, v, cfg.hjb.R)
        ic = hjb.verify_identity(pol, v, cfg.x0, cfg.integrator.T, cfg.experiment.n_eval,
                                 ctx.sampler(300), cfg.hjb.R)
        tol = max(3 * ic.stderr, 0.05 * abs(ic.lhs.value))
        worst = max(worst, abs(ic.residual) / tol)
        detail.append(f"{name}:{ic.residual:+.4g}")
    return _record("cost_identity", worst, 1.0, detail=" ".join(detail), t0=t0)


def check_dpp(ctx):
    t0 = time.perf_counter()
    v = ctx.value
    cfg = ctx.cfg
    T = cfg.integrator.T
    est = hjb.dpp_consistency(v, cfg.x0, 0.0, T / 2, cfg.experiment.n_eval, ctx.sampler(400), cfg.hjb.R)
    tol = max(3 * est.stderr, 0.05 * abs(float(v.value(T, cfg.x0))))
    return _record("dpp_consistency", abs(est.value), tol, est.stderr, f"residual={est.value:+.4g}", t0)


def check_control_benefit(ctx):
    t0 = time.perf_counter()
    v = ctx.value
    cfg = ctx.cfg
    s = ctx.sampler(500)
    T, n = cfg.integrator.T, cfg.experiment.n_eval
    d = paired_cost_difference(s, cfg.x0, T, n, hjb.feedback_policy(v, cfg.hjb.R), ControlSignal.zero())
    # one-sided 95%: feedback - zero + 1.645 se must be below zero
    return _record("control_benefit", d.value + 1.645 * d.stderr, 0.0, d.stderr,
                   f"feedback - zero = {d.value:+.4g}", t0)


def paired_cost_difference(sampler, x, T, n, pol_a, pol_b) -> fk.McEstimate:
    ids = np.arange(n)
    cfg = sampler.config(T)
    a = run_paths(sampler.model, cfg, x[None], ids, sampler.rng, control=pol_a, workers=sampler.workers)
    b = run_paths(sampler.model, cfg, x[None], ids, sampler.rng, control=pol_b, workers=sampler.workers)
    ok = a.ok[0] & b.ok[0]
    return fk.McEstimate.from_samples((a.cost[0] - b.cost[0])[ok])


FAST: list[Callable] = [check_antisymmetry, check_energy_neutrality, check_pseudo_spectral,
                        check_interpolation, check_ito, check_hamiltonian, check_feedback, check_decay,
                        check_ou_moment, check_energy_balance, check_tangent_fd, check_bel]
FULL: list[Callable] = FAST + [check_zero_control, check_identity, check_dpp, check_control_benefit]


def run_validation(cfg: ExperimentConfig, level: str = "fast",
                   tensor: TrilinearTensor | None = None) -> list[CheckRecord]:
    if level not in ("fast", "full"):
        raise ValueError(f"level must be fast or full, got {level!r}")
    ctx = Context(cfg, level, tensor)
    out = []
    for check in (FULL if level == "full" else FAST):
        t0 = time.perf_counter()
        try:
            rec = check(ctx)
        except ArithmeticError as exc:
            rec = CheckRecord(check.__name__.removeprefix("check_"), "FAIL", math.nan, math.nan,
                              math.nan, time.perf_counter() - t0, f"numerical failure: {exc}")
        out.append(replace(rec, runtime=round(time.perf_counter() - t0, 3)))
    return out


def report_dict(records: list[CheckRecord], cfg: ExperimentConfig, level: str) -> dict:
    import numpy
    import scipy

    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "fingerprint": cfg.fingerprint,
        "seed": cfg.seed,
        "level": level,
        "passed": all(r.passed for r in records),
        "checks": [asdict(r) for r in records],
        "environment": {"python": platform.python_version(), "numpy": numpy.__version__,
                        "scipy": scipy.__version__, "platform": platform.platform()},
    }


def format_table(records: list[CheckRecord]) -> str:
    rows = [("check", "status", "measured", "tolerance", "stderr", "runtime_s")]
    rows += [(r.name, r.status, f"{r.measured:.4g}", f"{r.tolerance:.4g}", f"{r.stderr:.3g}",
              f"{r.runtime:.2f}") for r in records]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
