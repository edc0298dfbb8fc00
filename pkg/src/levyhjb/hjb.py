"""Hamiltonian, feedback law and the fitted-value Picard solver for the HJB equation.

The control problem minimises
``E[ int_0^T (||X||_1/2^2 + |U|^2/2) dt + ||X(T)||^2 ]`` over controls in the
ball of radius ``R``, with the control entering the state through ``K``.  The
value ``v(t, x)`` (``t`` = remaining horizon) solves the mild equation

    v(t) = S_t f + int_0^t S_(t-s) F(K* D v(s)) ds + int_0^t S_(t-s) g ds

which is iterated on a slice grid.  Each slice is a least-squares fit over a
quadratic feature family on a training cloud.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .feynman_kac import McEstimate, Sampler
from .integrator import ControlSignal, GalerkinModel, IntegratorConfig, clip_to_ball, run_paths
from .noise import RegimeWarning
from .rng import Role, Streams, as_streams
from .spectral import Basis, fractional_norm, trace_fractional

VALUE_SCHEMA = "levyhjb.value-function"
VALUE_VERSION = 1
FEATURE_SETS = ("energy", "diagonal", "diagonal_linear", "full")


class RankDeficientError(np.linalg.LinAlgError):
    pass


class PicardDivergence(ArithmeticError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class ChecksumError(ValueError):
    pass


# --- operators and pointwise maps ---------------------------------------------------

@dataclass(frozen=True)
class ControlOperatorK:
    """Diagonal smoothing ``(K u)_k = lambda_k^(-alpha) u_k``; self-adjoint."""

    alpha_tilde1: float
    basis: Basis

    def __post_init__(self):
        if not 0.0 < self.alpha_tilde1 < 0.5:
            raise ValueError("the control smoothing exponent must lie in (0, 1/2)")

    @property
    def diagonal(self) -> np.ndarray:
        return self.basis.eigenvalues ** (-self.alpha_tilde1)

    def apply(self, u):
        return self.diagonal * np.asarray(u, dtype=float)

    adjoint = apply


def hamiltonian_F(p, R: float):
    """``inf over |U| <= R of <U, p> + |U|^2 / 2``; batched over rows."""
    p = np.asarray(p, dtype=float)
    n = np.sqrt(np.sum(p * p, axis=-1))
    return np.where(n <= R, -0.5 * n * n, -R * n + 0.5 * R * R)


def feedback_G(p, R: float):
    """Minimiser of the Hamiltonian: ``-p`` projected onto the ball."""
    return clip_to_ball(-np.asarray(p, dtype=float), R)


def hamiltonian_bruteforce(p, R: float, n_samples: int, rng) -> float:
    """Minimum over uniform samples of the ball plus the analytic candidate."""
    p = np.asarray(p, dtype=float)
    m = p.size
    gen = rng if isinstance(rng, np.random.Generator) else as_streams(rng).generator(0, Role.MISC)
    d = gen.standard_normal((n_samples, m))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    U = R * gen.random(n_samples)[:, None] ** (1.0 / m) * d
    U = np.vstack([U, feedback_G(p, R)[None]])
    return float(np.min(U @ p + 0.5 * np.sum(U * U, axis=1)))


def chi(a):
    a = np.asarray(a, dtype=float)
    out = np.maximum(a, 0.0) ** 2
    return float(out) if out.ndim == 0 else out


def costs(x, basis: Basis, gamma: float):
    """``(f, g, f~, g~)`` with ``f = ||x||^2``, ``g = ||x||_1/2^2`` and the
    ``exp(-gamma ||x||^2)``-damped versions."""
    x = np.asarray(x, dtype=float)
    f = np.sum(x * x, axis=-1)
    g = np.sum(basis.eigenvalues * x * x, axis=-1)
    damp = np.exp(-gamma * f)
    return f, g, damp * f, damp * g


def transform_v_w(value, x, gamma: float, direction: str):
    """``w = exp(-gamma ||x||^2) v`` (``to_w``) or its inverse (``to_v``)."""
    x = np.asarray(x, dtype=float)
    e = gamma * np.sum(x * x, axis=-1)
    if direction == "to_w":
        return np.asarray(value) * np.exp(-e)
    if direction == "to_v":
        if np.any(e > 700.0):
            raise OverflowError(f"exp(gamma ||x||^2) overflows: exponent {np.max(e):.1f}")
        return np.asarray(value) * np.exp(e)
    raise ValueError(f"direction must be 'to_w' or 'to_v', got {direction!r}")


# --- configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class HjbConfig:
    R: float = 0.5
    gamma: float = 0.5
    T: float = 0.5
    n_slices: int = 20
    n_mc: int = 5000
    n_cloud: int = 40
    r_cloud: float = 1.5
    cloud_alpha: float = 0.0
    features: str = "diagonal_linear"
    picard_tol: float = 1e-6
    picard_max_iter: int = 50
    alpha1: float = 0.2
    alpha: float = 0.3
    alpha_tilde1: float = 0.4
    theta: float = 0.1

    def __post_init__(self):
        if self.R < 0:
            raise ValueError("control radius R must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.T > 0 or self.n_slices < 1:
            raise ValueError("need T > 0 and at least one slice")
        if self.features not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {self.features!r}; choose from {FEATURE_SETS}")
        if not self.alpha1 < self.alpha < self.alpha_tilde1 < 0.5:
            raise ValueError(
                f"exponents must satisfy alpha1 < alpha < alpha_tilde1 < 1/2, got "
                f"{self.alpha1}, {self.alpha}, {self.alpha_tilde1}")
        if self.n_mc < 2 or self.n_cloud < 2:
            raise ValueError("need at least two samples and two cloud points")

    @property
    def slice_width(self) -> float:
        return self.T / self.n_slices

    def check_noise_exponent(self, eps: float | None) -> list[str]:
        """Warn when ``eps`` misses ``1 < eps < 1 + 2 alpha_tilde1``."""
        msgs = []
        if eps is None:
            return msgs
        if eps <= 1.0:
            msgs.append(f"eps={eps} <= 1: the noise covariance is not trace class")
        if eps >= 1.0 + 2.0 * self.alpha_tilde1:
            msgs.append(f"eps={eps} >= 1 + 2*alpha_tilde1 = {1 + 2 * self.alpha_tilde1}: "
                        "the smoothing estimate for the controlled semigroup does not apply")
        for msg in msgs:
            warnings.warn(msg, RegimeWarning, stacklevel=2)
        return msgs


# --- features and value function -----------------------------------------------------

class FeatureMap:
    """Quadratic feature families; each coefficient vector maps to
    ``v(x) = c + <b, x> + x^T Q x``."""

    def __init__(self, kind: str, basis: Basis):
        if kind not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {kind!r}")
        self.kind = kind
        self.basis = basis
        m = basis.m
        self._iu = np.triu_indices(m)
        self.n_features = {"energy": 3, "diagonal": m + 1, "diagonal_linear": 2 * m + 1,
                           "full": 1 + m + m * (m + 1) // 2}[kind]

    def design(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        one = np.ones((len(X), 1))
        if self.kind == "energy":
            lam = self.basis.eigenvalues
            return np.hstack([one, np.sum(X * X, 1, keepdims=True),
                              np.sum(lam * X * X, 1, keepdims=True)])
        if self.kind == "diagonal":
            return np.hstack([one, X * X])
        if self.kind == "diagonal_linear":
            return np.hstack([one, X, X * X])
        i, j = self._iu
        return np.hstack([one, X, X[:, i] * X[:, j]])

    def quadratic(self, coef: np.ndarray):
        """``(c, b, Q)`` for one coefficient vector."""
        m = self.basis.m
        coef = np.asarray(coef, dtype=float)
        b = np.zeros(m)
        if self.kind == "energy":
            Q = np.diag(coef[1] + coef[2] * self.basis.eigenvalues)
        elif self.kind == "diagonal":
            Q = np.diag(coef[1:])
        elif self.kind == "diagonal_linear":
            b = coef[1:m + 1].copy()
            Q = np.diag(coef[m + 1:])
        else:
            b = coef[1:m + 1].copy()
            Q = np.zeros((m, m))
            i, j = self._iu
            Q[i, j] = coef[m + 1:]
            Q = 0.5 * (Q + Q.T)
        return float(coef[0]), b, Q

    def terminal(self) -> np.ndarray:
        """Coefficients of ``||x||^2``."""
        m = self.basis.m
        c = np.zeros(self.n_features)
        if self.kind == "energy":
            c[1] = 1.0
        elif self.kind == "diagonal":
            c[1:] = 1.0
        elif self.kind == "diagonal_linear":
            c[m + 1:] = 1.0
        else:
            i, j = self._iu
            c[m + 1:] = (i == j).astype(float)
        return c

    def fit(self, X, y) -> np.ndarray:
        Phi = self.design(X)
        rank = np.linalg.matrix_rank(Phi)
        if rank < self.n_features:
            raise RankDeficientError(
                f"feature set {self.kind!r} is rank deficient on the training cloud "
                f"(rank {rank} < {self.n_features} features at m={self.basis.m})")
        coef, *_ = np.linalg.lstsq(Phi, y, rcond=None)
        return coef


@dataclass
class ValueFunction:
    """Slice-wise quadratic surrogate of ``v(t, x)``, linear in ``t`` between slices."""

    features: str
    basis: Basis
    k_diag: np.ndarray
    slice_times: np.ndarray
    coeffs: np.ndarray
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.slice_times = np.asarray(self.slice_times, dtype=float)
        self._fmap = FeatureMap(self.features, self.basis)
        quads = [self._fmap.quadratic(c) for c in self.coeffs]
        self._c = np.array([q[0] for q in quads])
        self._b = np.stack([q[1] for q in quads])
        self._Q = np.stack([q[2] for q in quads])

    @property
    def T(self) -> float:
        return float(self.slice_times[-1])

    def _locate(self, t: float):
        ts = self.slice_times
        if t < -1e-12 or t > ts[-1] + 1e-12:
            raise ValueError(f"time {t} outside [0, {ts[-1]}]")
        t = min(max(t, 0.0), ts[-1])
        j = min(int(np.searchsorted(ts, t, side="right")) - 1, len(ts) - 2)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return j, w

    def _form(self, t):
        j, w = self._locate(float(t))
        if w == 0.0:
            return self._c[j], self._b[j], self._Q[j]
        mix = lambda a: (1.0 - w) * a[j] + w * a[j + 1]
        return mix(self._c), mix(self._b), mix(self._Q)

    def value(self, t, X):
        c, b, Q = self._form(t)
        X = np.asarray(X, dtype=float)
        return c + X @ b + np.einsum("...i,ij,...j->...", X, Q, X)

    def grad(self, t, X):
        _, b, Q = self._form(t)
        return b + 2.0 * np.asarray(X, dtype=float) @ Q

    def kgrad(self, t, X):
        """``K* D_x v(t, x)``."""
        return self.k_diag * self.grad(t, X)

    def slice_value(self, j: int, X):
        X = np.asarray(X, dtype=float)
        return self._c[j] + X @ self._b[j] + np.einsum("...i,ij,...j->...", X, self._Q[j], X)

    def slice_kgrad(self, j: int, X):
        return self.k_diag * (self._b[j] + 2.0 * np.asarray(X, dtype=float) @ self._Q[j])

    # serialization
    def _payload(self) -> dict:
        return {
            "schema": VALUE_SCHEMA,
            "version": VALUE_VERSION,
            "features": self.features,
            "m": self.basis.m,
            "k_diag": [float(v) for v in self.k_diag],
            "slice_times": [float(v) for v in self.slice_times],
            "coeffs": [[float(v) for v in row] for row in self.coeffs],
            "fingerprint": self.fingerprint,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        payload = self._payload()
        payload["checksum"] = _checksum(payload)
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str, basis: Basis | None = None) -> "ValueFunction":
        from .spectral import build_basis

        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ChecksumError(f"value file is not valid JSON: {exc}") from exc
        for key in ("schema", "version", "features", "m", "k_diag", "slice_times", "coeffs",
                    "fingerprint", "checksum"):
            if key not in data:
                raise ValueError(f"value file lacks the mandatory field {key!r}")
        if data["schema"] != VALUE_SCHEMA or data["version"] != VALUE_VERSION:
            raise ValueError(f"unsupported value file {data['schema']} v{data['version']}")
        stored = data.pop("checksum")
        if _checksum(data) != stored:
            raise ChecksumError("value file checksum mismatch: the file was modified or corrupted")
        basis = basis or build_basis(int(data["m"]))
        return cls(data["features"], basis, np.array(data["k_diag"]), np.array(data["slice_times"]),
                   np.array(data["coeffs"]), data["fingerprint"], data.get("meta", {}))


def _checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --- Picard machinery ------------------------------------------------------------------

def sample_cloud(basis: Basis, n: int, radius: float, alpha: float, streams: Streams) -> np.ndarray:
    """``n`` points uniform in radius-power law inside ``{||x||_alpha <= radius}``."""
    m = basis.m
    pts = np.empty((n, m))
    for i in range(n):
        g = streams.generator(i, Role.CLOUD)
        z = g.standard_normal(m)
        z /= fractional_norm(z, basis, alpha)
        pts[i] = radius * g.random() ** (1.0 / m) * z
    return pts


@dataclass
class PicardMachinery:
    """Uncontrolled paths from the cloud, sampled on the slice grid, reused by every step."""

    model: GalerkinModel
    cfg: HjbConfig
    sampler: Sampler
    cloud: np.ndarray
    states: np.ndarray       # (n_slices + 1, n_cloud, n_mc, m)
    base: np.ndarray         # (n_slices + 1, n_cloud) mean of f(Y_t) + int_0^t g
    base_se: np.ndarray
    k_diag: np.ndarray
    fingerprint: str = ""

    @classmethod
    def build(cls, model: GalerkinModel, cfg: HjbConfig, sampler: Sampler,
              fingerprint: str = "", cloud: np.ndarray | None = None) -> "PicardMachinery":
        streams = as_streams(sampler.rng)
        if cloud is None:
            cloud = sample_cloud(model.basis, cfg.n_cloud, cfg.r_cloud, cfg.cloud_alpha, streams)
        steps_per_slice = cfg.slice_width / sampler.dt
        if abs(steps_per_slice - round(steps_per_slice)) > 1e-9:
            raise ValueError("slice width must be a multiple of dt")
        sps = int(round(steps_per_slice))
        rec = [j * sps for j in range(cfg.n_slices + 1)]
        b = run_paths(model, IntegratorConfig(sampler.dt, cfg.T, sampler.scheme), cloud,
                      np.arange(sampler.first_path, sampler.first_path + cfg.n_mc), streams,
                      record_steps=rec, workers=sampler.workers, linear=sampler.linear)
        if np.any(b.aborted):
            raise ArithmeticError("uncontrolled training paths aborted; shrink the cloud or dt")
        samples = np.sum(b.records**2, axis=-1) + b.record_enstrophy
        base = samples.mean(axis=2)
        se = samples.std(axis=2, ddof=1) / math.sqrt(cfg.n_mc)
        k_diag = model.gain
        return cls(model, cfg, sampler, cloud, b.records, base, se, k_diag, fingerprint)

    def empty_value(self) -> ValueFunction:
        fmap = FeatureMap(self.cfg.features, self.model.basis)
        coeffs = np.zeros((self.cfg.n_slices + 1, fmap.n_features))
        coeffs[0] = fmap.terminal()
        return self._vf(coeffs, {"iteration": 0})

    def _vf(self, coeffs, meta) -> ValueFunction:
        times = self.cfg.slice_width * np.arange(self.cfg.n_slices + 1)
        times[-1] = self.cfg.T
        return ValueFunction(self.cfg.features, self.model.basis, self.k_diag, times, coeffs,
                             self.fingerprint, dict(meta))

    def targets(self, v_prev: ValueFunction | None) -> np.ndarray:
        """Right-hand side of the mild equation at every slice and cloud point."""
        out = self.base.copy()
        if v_prev is None or self.cfg.R == 0:
            return out
        n_s, R, dlt = self.cfg.n_slices, self.cfg.R, self.cfg.slice_width
        # Fmean[s, k] = E F(K* D v(t_s, Y_{t_k})) per cloud point
        Fmean = np.zeros((n_s + 1, n_s + 1, len(self.cloud)))
        for k in range(1, n_s + 1):
            Yk = self.states[k]
            for s in range(0, n_s - k + 1):
                Fmean[s, k] = hamiltonian_F(v_prev.slice_kgrad(s, Yk), R).mean(axis=-1)
        for j in range(1, n_s + 1):
            out[j] += dlt * sum(Fmean[j - k, k] for k in range(1, j + 1))
        return out

    def fit(self, targets: np.ndarray, meta: dict) -> ValueFunction:
        fmap = FeatureMap(self.cfg.features, self.model.basis)
        coeffs = np.empty((self.cfg.n_slices + 1, fmap.n_features))
        coeffs[0] = fmap.terminal()
        for j in range(1, self.cfg.n_slices + 1):
            coeffs[j] = fmap.fit(self.cloud, targets[j])
        return self._vf(coeffs, meta)


def picard_step(v_prev: ValueFunction | None, cfg: HjbConfig, machinery: PicardMachinery) -> ValueFunction:
    """One application of the mild-form map followed by the slice-wise refit."""
    it = 0 if v_prev is None else int(v_prev.meta.get("iteration", 0)) + 1
    return machinery.fit(machinery.targets(v_prev), {"iteration": it})


@dataclass
class SolveReport:
    iterations: int
    converged: bool
    residuals: list
    features: str

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged,
                "residuals": [float(r) for r in self.residuals], "features": self.features,
                "strictly_decreasing": bool(all(b < a for a, b in zip(self.residuals, self.residuals[1:])))}


def _cloud_values(v: ValueFunction, cloud: np.ndarray) -> np.ndarray:
    return np.stack([v.slice_value(j, cloud) for j in range(len(v.slice_times))])


def solve_value_function(cfg: HjbConfig, machinery: PicardMachinery) -> tuple[ValueFunction, SolveReport]:
    """Iterate from the zero-control value until the relative sup change drops below tol."""
    v = picard_step(None, cfg, machinery)
    old = _cloud_values(v, machinery.cloud)
    history = []
    rising = 0
    for k in range(1, cfg.picard_max_iter + 1):
        v_new = picard_step(v, cfg, machinery)
        new = _cloud_values(v_new, machinery.cloud)
        res = float(np.max(np.abs(new - old) / (1.0 + np.abs(old))))
        history.append(res)
        v, old = v_new, new
        if res <= cfg.picard_tol:
            v.meta.update(converged=True, residuals=history)
            return v, SolveReport(k, True, history, cfg.features)
        rising = rising + 1 if len(history) > 1 and res >= history[-2] else 0
        if rising >= 3:
            raise PicardDivergence("Picard residual failed to decrease for 3 consecutive iterations",
                                   history)
    v.meta.update(converged=False, residuals=history)
    return v, SolveReport(cfg.picard_max_iter, False, history, cfg.features)


def zero_control_value(cfg: HjbConfig, machinery: PicardMachinery) -> ValueFunction:
    return picard_step(None, cfg, machinery)


# --- policies and verification ----------------------------------------------------------

def feedback_policy(v: ValueFunction, R: float, horizon: float | None = None) -> ControlSignal:
    """``U(s) = G(K* D v(horizon - s, X(s)))``."""
    H = v.T if horizon is None else horizon
    return ControlSignal.feedback(lambda s, X: feedback_G(v.kgrad(H - s, X), R), R)


def policy_by_name(name: str, v: ValueFunction | None, R: float) -> ControlSignal:
    if name == "zero":
        return ControlSignal.zero()
    if name == "random":
        return ControlSignal.random(R)
    if name == "feedback":
        if v is None:
            raise ValueError("the feedback policy needs a value function")
        return feedback_policy(v, R)
    raise ValueError(f"unknown policy {name!r}; choose zero, random or feedback")


def _run(sampler: Sampler, x, T, n, policy, aux=None):
    ids = np.arange(sampler.first_path, sampler.first_path + n)
    return run_paths(sampler.model, sampler.config(T), np.asarray(x, dtype=float)[None], ids,
                     as_streams(sampler.rng), control=policy, aux=aux, workers=sampler.workers,
                     linear=sampler.linear)


def evaluate_cost(policy: ControlSignal, x, T: float, n: int, sampler: Sampler) -> McEstimate:
    b = _run(sampler, x, T, n, policy)
    return McEstimate.from_samples(b.cost[0][b.ok[0]])


@dataclass(frozen=True)
class IdentityCheck:
    lhs: McEstimate
    rhs: float
    residual: float
    stderr: float

    def passes(self, rel: float = 0.05, k: float = 3.0) -> bool:
        return abs(self.residual) <= max(k * self.stderr, rel * abs(self.lhs.value))

    def to_dict(self) -> dict:
        return {"lhs": self.lhs.to_dict(), "rhs": self.rhs, "residual": self.residual,
                "stderr": self.stderr}


def verify_identity(policy: ControlSignal, v: ValueFunction, x, T: float, n: int,
                    sampler: Sampler, R: float) -> IdentityCheck:
    """Cost of ``policy`` against ``v(T, x)`` plus the control-mismatch integral."""
    def mismatch(s, X, U):
        p = v.kgrad(T - s, X)
        u = 0.0 if U is None else U
        pn = np.sqrt(np.sum(p * p, axis=-1))
        return 0.5 * (np.sum((u + p) ** 2, axis=-1) - chi(pn - R))

    b = _run(sampler, x, T, n, policy, aux=mismatch)
    ok = b.ok[0]
    cost = b.cost[0][ok]
    corr = b.aux[0][ok]
    v0 = float(v.value(T, np.asarray(x, dtype=float)))
    res = McEstimate.from_samples(cost - corr - v0)
    lhs = McEstimate.from_samples(cost)
    return IdentityCheck(lhs, v0 + float(corr.mean()), res.value, res.stderr)


def dpp_consistency(v: ValueFunction, x, t: float, tau: float, n: int, sampler: Sampler,
                    R: float, policy: ControlSignal | str = "feedback") -> McEstimate:
    """``E[int_t^tau L ds + v(T - tau, X(tau))] - v(T - t, x)`` under ``policy``."""
    T = v.T
    if not 0.0 <= t <= tau <= T:
        raise ValueError(f"need 0 <= t <= tau <= T, got t={t}, tau={tau}, T={T}")
    x = np.asarray(x, dtype=float)
    v_here = float(v.value(T - t, x))
    if tau == t:
        return McEstimate(0.0, 0.0, n)
    if isinstance(policy, str):
        policy = feedback_policy(v, R, T - t) if policy == "feedback" else policy_by_name(policy, v, R)
    b = _run(sampler, x, tau - t, n, policy)
    ok = b.ok[0]
    samples = b.running_cost[0] + v.value(T - tau, b.state[0])
    return McEstimate.from_samples(samples[ok] - v_here)


# --- transformed equation diagnostics ----------------------------------------------------

def transformed_nonlinearity(x, w_fn, dw_fn, model: GalerkinModel, gamma: float, theta: float,
                             R: float, n_marks: int, rng) -> dict:
    """Terms of the nonlinearity of the exponentially transformed equation at ``x``.

    ``w_fn(X)`` and ``dw_fn(X)`` evaluate ``w`` and ``D w`` at one time.  The
    jump integral is averaged over ``n_marks`` mark draws.  Coefficients are
    taken as stated for the transformed equation, with ``theta`` and ``gamma``
    kept distinct.
    """
    x = np.asarray(x, dtype=float)
    basis = model.basis
    eps = model.eps if model.eps is not None else 0.0
    lam = basis.eigenvalues
    k = model.gain
    w = float(w_fn(x[None])[0])
    dw = dw_fn(x[None])[0]
    sq = float(x @ x)
    drift = 2.0 * theta * float((lam ** -eps * x) @ dw)
    potential = (4.0 * gamma**2 * float(np.sum(lam ** -eps * x * x))
                 + 2.0 * gamma * trace_fractional(basis, eps)) * w
    if gamma * sq > 700.0:
        raise OverflowError("exp(gamma ||x||^2) overflows")
    hamil = math.exp(-gamma * sq) * float(hamiltonian_F(math.exp(gamma * sq) * (k * dw + 2.0 * gamma * k * w * x), R))
    jump = 0.0
    jm = model.jumps
    if jm is not None and jm.rate > 0:
        gen = as_streams(rng).generator(0, Role.MARKS)
        G = jm.field(jm.marks.sample(gen, n_marks))
        XG = x + G
        factor = np.exp(gamma * (np.sum(XG * XG, axis=1) - sq)) - 1.0
        jump = jm.rate * float(np.mean(factor * w_fn(XG) - 2.0 * theta * w * (G @ x)))
    return {"drift": drift, "potential": potential, "hamiltonian": hamil, "jump": jump,
            "total": drift + potential + hamil + jump}


def transform_consistency(v: ValueFunction, t: float, x, model: GalerkinModel, gamma: float,
                          R: float, n_marks: int, rng) -> dict:
    """Exact v/w identities behind the transformed equation, evaluated at ``x``.

    Returns the absolute defects of
    ``exp(-g|x|^2) F(exp(g|x|^2)(K* Dw + 2g K* w x)) = exp(-g|x|^2) F(K* Dv)`` and
    ``(exp(g|x+G|^2 - g|x|^2) - 1) w(x+G) = exp(-g|x|^2) v(x+G) - w(x+G)``.
    """
    x = np.asarray(x, dtype=float)
    sq = float(x @ x)
    vx = float(v.value(t, x))
    w = float(transform_v_w(vx, x, gamma, "to_w"))
    dw = math.exp(-gamma * sq) * (v.grad(t, x) - 2.0 * gamma * vx * x)
    k = model.gain
    lhs_h = math.exp(-gamma * sq) * float(hamiltonian_F(math.exp(gamma * sq) * (k * dw + 2.0 * gamma * k * w * x), R))
    rhs_h = math.exp(-gamma * sq) * float(hamiltonian_F(v.kgrad(t, x), R))
    jump_defect = 0.0
    jm = model.jumps
    if jm is not None and jm.rate > 0:
        gen = as_streams(rng).generator(1, Role.MARKS)
        XG = x + jm.field(jm.marks.sample(gen, n_marks))
        vg = v.value(t, XG)
        wg = transform_v_w(vg, XG, gamma, "to_w")
        lhs_j = (np.exp(gamma * (np.sum(XG * XG, axis=1) - sq)) - 1.0) * wg
        rhs_j = math.exp(-gamma * sq) * vg - wg
        jump_defect = float(np.max(np.abs(lhs_j - rhs_j)))
    return {"hamiltonian_defect": abs(lhs_h - rhs_h), "jump_defect": jump_defect,
            "round_trip_defect": abs(float(transform_v_w(w, x, gamma, "to_v")) - vx)}
