"""Monte Carlo semigroups and their derivatives by Bismut-Elworthy-Li weights.

``S_t f(x) = E f(Y(t, x))`` and the enstrophy-damped
``T_t f(x) = E[exp(-2 gamma Y_int(t)) f(Y(t, x))]`` with
``Y_int(t) = int_0^t ||Y||_1/2^2``.  Derivatives in ``x`` are computed by
weighting samples with stochastic integrals of the tangent flow, so ``f``
itself is never differentiated for the gradient.

For the weighted semigroup the gradient reads

    <D T_t f(x), H> = E[ e f(Y(t)) ((1/t) I(t) - 4 gamma J(t)) ]

where ``e = exp(-2 gamma Y_int(t))``, ``I = int <A^(eps/2) eta, dW>`` and
``J = int (1 - s/t) <A^1/2 eta, A^1/2 Y> ds``.  The minus sign comes from
differentiating ``Y_int`` along the initial condition versus along the
Malliavin perturbation ``(s/t) eta``; the finite-difference tests pin it.
The Hessian estimator is the pathwise derivative of that expression.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .integrator import GalerkinModel, IntegratorConfig, run_paths
from .rng import Streams, as_streams

# coefficient of gamma * J in the gradient weight
BEL_WEIGHT_SIGN = -1.0


@dataclass(frozen=True)
class Functional:
    """Scalar functional on batches of fields, with optional gradient."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "f"

    def __call__(self, X):
        return self.value(np.asarray(X, dtype=float))


def energy() -> Functional:
    """``f(x) = ||x||^2`` with ``Df(x) = 2x``."""
    return Functional(lambda X: np.sum(X * X, axis=-1), lambda X: 2.0 * X, "energy")


def constant(c: float = 1.0) -> Functional:
    return Functional(lambda X: np.full(X.shape[:-1], float(c)), lambda X: np.zeros_like(X),
                      f"constant({c})")


@dataclass(frozen=True)
class SemigroupQuery:
    f: Functional
    t: float
    x: np.ndarray
    gamma: float = 0.0
    n: int = 1000
    directions: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.t < 0:
            raise ValueError(f"query time must be nonnegative, got {self.t}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.n < 1:
            raise ValueError("need at least one sample")


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n_effective: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "McEstimate":
        return cls(float(d["value"]), float(d["stderr"]), int(d["n_effective"]))

    @classmethod
    def from_samples(cls, s: np.ndarray) -> "McEstimate":
        s = np.asarray(s, dtype=float)
        if s.size == 0:
            raise ArithmeticError("no completed paths to average")
        if not np.all(np.isfinite(s)):
            raise ArithmeticError("Monte Carlo samples overflowed")
        se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else 0.0
        return cls(float(s.mean()), se, int(s.size))

    def within(self, target: float, k: float = 3.0, rel: float = 0.0) -> bool:
        return abs(self.value - target) <= max(k * self.stderr, rel * abs(target))


@dataclass
class Sampler:
    """Simulation context shared by the estimators."""

    model: GalerkinModel
    dt: float = 1e-3
    rng: Streams | int = 0
    scheme: str = "exponential_euler"
    linear: bool = False
    workers: int = 1
    antithetic: bool = False
    first_path: int = 0
    meta: dict = field(default_factory=dict)

    def config(self, t: float) -> IntegratorConfig:
        return IntegratorConfig(self.dt, t, self.scheme)

    def run(self, xs, t: float, n: int, **kw):
        ids = np.arange(self.first_path, self.first_path + n)
        return run_paths(self.model, self.config(t), xs, ids, as_streams(self.rng),
                         linear=self.linear, workers=self.workers, antithetic=self.antithetic, **kw)


def _weights(bundle, gamma):
    return np.exp(-2.0 * gamma * bundle.enstrophy) if gamma else np.ones_like(bundle.enstrophy)


def weighted_samples(q: SemigroupQuery, sampler: Sampler, xs=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-path samples of ``e f(Y(t))`` for each row of ``xs`` and the ok-mask."""
    xs = np.atleast_2d(q.x if xs is None else xs)
    if q.t == 0:
        vals = q.f(xs)[:, None]
        return vals, np.ones_like(vals, dtype=bool)
    b = sampler.run(xs, q.t, q.n)
    vals = _weights(b, q.gamma) * q.f(b.state.reshape(-1, b.state.shape[-1])).reshape(b.enstrophy.shape)
    return vals, b.ok


def estimate_S(q: SemigroupQuery, sampler: Sampler) -> McEstimate:
    if q.gamma != 0:
        raise ValueError("estimate_S is the unweighted semigroup; use estimate_T for gamma > 0")
    return estimate_T(q, sampler)


def estimate_T(q: SemigroupQuery, sampler: Sampler) -> McEstimate:
    vals, ok = weighted_samples(q, sampler)
    return McEstimate.from_samples(vals[0][ok[0]])


def _direction(H, m):
    H = np.asarray(H, dtype=float)
    if H.shape != (m,):
        raise ValueError(f"direction must have shape ({m},), got {H.shape}")
    return H


def gradient_samples(q: SemigroupQuery, sampler: Sampler, H) -> np.ndarray:
    if not q.t > 0:
        raise ValueError("derivative queries need t > 0")
    H = _direction(H, q.x.size)
    b = sampler.run(q.x[None], q.t, q.n, directions=H[None])
    ok = b.ok[0]
    e = _weights(b, q.gamma)[0]
    fy = q.f(b.state[0])
    w = b.i_bel[0, :, 0] / q.t + BEL_WEIGHT_SIGN * 4.0 * q.gamma * b.j_bel[0, :, 0]
    return (e * fy * w)[ok]


def bel_gradient(q: SemigroupQuery, sampler: Sampler, H) -> McEstimate:
    """``<D T_t f(x), H>`` without differentiating ``f``."""
    if not np.any(H):
        _direction(H, q.x.size)
        return McEstimate(0.0, 0.0, q.n)
    return McEstimate.from_samples(gradient_samples(q, sampler, H))


def bel_hessian(q: SemigroupQuery, sampler: Sampler, H) -> McEstimate:
    """``D^2 T_t f(x)(H, H)``: pathwise derivative of the gradient estimator.

    Needs ``q.f.grad``; for a fitted functional that is the fitted gradient.
    """
    if not q.t > 0:
        raise ValueError("derivative queries need t > 0")
    H = _direction(H, q.x.size)
    if not np.any(H):
        return McEstimate(0.0, 0.0, q.n)
    if q.f.grad is None:
        raise ValueError("the Hessian estimator needs the gradient of f")
    b = sampler.run(q.x[None], q.t, q.n, directions=H[None], second_order=True)
    ok = b.ok[0]
    g, c, t = q.gamma, BEL_WEIGHT_SIGN * 4.0 * q.gamma, q.t
    e = _weights(b, g)[0]
    Y = b.state[0]
    fy = q.f(Y)
    dfy = np.sum(q.f.grad(Y) * b.tangent[0, :, 0], axis=-1)
    w1 = b.i_bel[0, :, 0] / t + c * b.j_bel[0, :, 0]
    dw1 = b.i2_bel[0, :, 0] / t + c * b.j2_bel[0, :, 0]
    d_ef = e * (dfy - 4.0 * g * fy * b.k_bel[0, :, 0])
    return McEstimate.from_samples((d_ef * w1 + e * fy * dw1)[ok])


def _paired(q, sampler, xs, coeffs, scale):
    vals, ok = weighted_samples(q, sampler, xs)
    keep = np.all(ok, axis=0)
    comb = np.tensordot(coeffs, vals[:, keep], axes=(0, 0)) / scale
    return McEstimate.from_samples(comb)


def fd_gradient(q: SemigroupQuery, sampler: Sampler, H, delta: float = 1e-3) -> McEstimate:
    """Central difference of ``T_t f`` on common random numbers, paired stderr."""
    H = _direction(H, q.x.size)
    xs = np.stack([q.x + delta * H, q.x - delta * H])
    return _paired(q, sampler, xs, np.array([1.0, -1.0]), 2.0 * delta)


def fd_hessian(q: SemigroupQuery, sampler: Sampler, H, delta: float = 1e-3) -> McEstimate:
    H = _direction(H, q.x.size)
    xs = np.stack([q.x + delta * H, q.x, q.x - delta * H])
    return _paired(q, sampler, xs, np.array([1.0, -2.0, 1.0]), delta * delta)


def query_record(q: SemigroupQuery, est: McEstimate, kind: str) -> dict:
    """JSON-ready summary of a query and its estimate."""
    return {"kind": kind, "functional": q.f.name, "t": q.t, "x": q.x.tolist(), "gamma": q.gamma,
            "n": q.n, "estimate": est.to_dict()}
