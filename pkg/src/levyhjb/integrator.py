"""Time stepping for the Galerkin state, its tangent flows and path accumulators.

The Stokes part is integrated exactly mode by mode (integrating-factor Euler),
the convection term explicitly.  Jumps happen at their exact event times: a
step that contains events is split there and the jump field is added
atomically.  The compensator drift is applied continuously.

The batch engine :func:`run_paths` simulates ``n_x`` initial conditions
against the same noise paths (common random numbers).  Arrays in the
returned :class:`TrajectoryBundle` are laid out ``(n_x, n_paths, ...)``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .noise import JumpModel, compensator_drift, sample_jump_arrays
from .rng import Role, Streams, as_streams
from .spectral import Basis, TrilinearTensor, build_basis, build_trilinear_tensor

SCHEMES = ("exponential_euler", "semi_implicit_euler")
BLOWUP_FACTOR = 1e6
ABORT_BUDGET = 1e-3
# noise values held in memory per chunk, and rows stepped together
_CHUNK_NOISE_ELEMS = 1 << 22
_CHUNK_ROWS = 1 << 14


class IntegrationError(ArithmeticError):
    """A path left the finite range; carries where and when."""

    def __init__(self, message: str, path_id: int | None = None, time: float | None = None):
        super().__init__(message)
        self.path_id = path_id
        self.time = time


class PathBudgetError(IntegrationError):
    """Too many paths aborted for the ensemble to be trusted."""


@dataclass(frozen=True)
class GalerkinModel:
    """Truncated system: basis, convection tensor, noise and control gain.

    ``eps=None`` switches the Gaussian forcing off, ``jumps=None`` the jumps.
    ``control_gain`` is the diagonal of ``K``.
    """

    basis: Basis
    tensor: TrilinearTensor
    eps: float | None = 1.5
    jumps: JumpModel | None = None
    control_gain: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.basis.m

    @property
    def noise_scale(self) -> np.ndarray:
        if self.eps is None:
            return np.zeros(self.m)
        return self.basis.eigenvalues ** (-0.5 * self.eps)

    @property
    def gain(self) -> np.ndarray:
        return np.ones(self.m) if self.control_gain is None else self.control_gain

    @property
    def compensator(self) -> np.ndarray:
        if self.jumps is None:
            return np.zeros(self.m)
        return compensator_drift(self.jumps)

    def without_noise(self) -> "GalerkinModel":
        return replace(self, eps=None, jumps=None)


def build_model(m: int, eps: float | None = 1.5, jumps: JumpModel | None = None,
                control_exponent: float = 0.4) -> GalerkinModel:
    basis = build_basis(m)
    gain = basis.eigenvalues ** (-control_exponent)
    return GalerkinModel(basis, build_trilinear_tensor(basis), eps, jumps, gain)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    T: float = 0.5
    scheme: str = "exponential_euler"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"T/dt = {n} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def with_horizon(self, T: float) -> "IntegratorConfig":
        return replace(self, T=T)


# --- controls ------------------------------------------------------------------

def clip_to_ball(U: np.ndarray, R: float) -> np.ndarray:
    """Radial projection onto ``{||U|| <= R}``; the result never exceeds ``R``."""
    U = np.asarray(U, dtype=float)
    n = np.sqrt(np.sum(U * U, axis=-1, keepdims=True))
    over = n > R
    if not np.any(over):
        return U
    # clipped rows go a few ulps inside the ball so any summation order
    # measures <= R; for tiny R the squares are subnormal and the first
    # scaling can still land outside, hence the doubling shrink
    eps = np.finfo(float).eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(over, U * (R * (1.0 - 4 * eps) / n), U)
    shrink = 4e-16
    while True:
        n2 = np.sqrt(np.sum(out * out, axis=-1, keepdims=True))
        bad = over & (n2 > R * (1.0 - 2 * eps))
        if not np.any(bad):
            return out
        out = np.where(bad, out * (1.0 - shrink), out)
        shrink = min(2.0 * shrink, 0.5)


@dataclass(frozen=True)
class ControlSignal:
    """``zero``, ``open_loop`` (``fn(t) -> (m,)``), ``feedback``
    (``fn(t, X) -> (rows, m)``) or ``random`` (uniform in the ball, redrawn
    each step from the path's control stream).  Values are projected onto
    the ball of radius ``R``."""

    kind: str = "zero"
    R: float = math.inf
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "open_loop", "feedback", "random"):
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.kind in ("open_loop", "feedback") and self.fn is None:
            raise ValueError(f"{self.kind} control needs a function")
        if self.kind == "random" and not math.isfinite(self.R):
            raise ValueError("random control needs a finite radius")
        if self.R < 0:
            raise ValueError("control radius must be nonnegative")

    @classmethod
    def zero(cls) -> "ControlSignal":
        return cls("zero")

    @classmethod
    def open_loop(cls, fn, R: float = math.inf) -> "ControlSignal":
        return cls("open_loop", R, fn)

    @classmethod
    def feedback(cls, fn, R: float) -> "ControlSignal":
        return cls("feedback", R, fn)

    @classmethod
    def random(cls, R: float) -> "ControlSignal":
        return cls("random", R)

    @property
    def state_dependent(self) -> bool:
        return self.kind == "feedback"


# --- single steps ----------------------------------------------------------------

def _decay(lam: np.ndarray, h, scheme: str) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim:
        h = h[..., None]
    if scheme == "exponential_euler":
        return np.exp(-lam * h)
    return 1.0 / (1.0 + lam * h)


def _h(h):
    h = np.asarray(h, dtype=float)
    return h[..., None] if h.ndim else h


def _sym(u, v, tensor: TrilinearTensor, linear: bool):
    """``B(u, v) + B(v, u)`` batched over leading axes."""
    if linear or tensor.is_zero:
        return np.zeros(np.broadcast_shapes(u.shape, v.shape))
    m = tensor.m
    outer = u[..., :, None] * v[..., None, :]
    outer = outer + np.swapaxes(outer, -1, -2)
    lead = outer.shape[:-2]
    return (outer.reshape(-1, m * m) @ tensor.matrix).reshape(lead + (m,))


def _conv(u, tensor: TrilinearTensor, linear: bool):
    if linear or tensor.is_zero:
        return np.zeros_like(u)
    m = tensor.m
    outer = u[..., :, None] * u[..., None, :]
    return (outer.reshape(-1, m * m) @ tensor.matrix).reshape(u.shape)


def step_state(x: np.ndarray, u, model: GalerkinModel, dt, noise: np.ndarray | None = None,
               jump_fields: np.ndarray | None = None, scheme: str = "exponential_euler",
               linear: bool = False) -> np.ndarray:
    """One step ``x' = E(dt) [x + dt (-B(x) + K u - comp) + noise] + jumps``.

    ``noise`` is the colored increment, ``jump_fields`` the sum of fields of
    events at the end of the step.  ``dt`` may be a per-row array.
    """
    x = np.asarray(x, dtype=float)
    drift = -_conv(x, model.tensor, linear) - model.compensator
    if u is not None:
        drift = drift + model.gain * np.asarray(u, dtype=float)
    y = x + _h(dt) * drift
    if noise is not None:
        y = y + noise
    y = _decay(model.basis.eigenvalues, dt, scheme) * y
    if jump_fields is not None:
        y = y + jump_fields
    if not np.all(np.isfinite(y)):
        raise IntegrationError("state became non-finite")
    return y


def step_tangent(eta: np.ndarray, Y: np.ndarray, model: GalerkinModel, dt,
                 scheme: str = "exponential_euler", linear: bool = False) -> np.ndarray:
    """``d eta = (-A eta - B(eta, Y) - B(Y, eta)) dt``; the exact derivative of
    :func:`step_state` with respect to ``x``."""
    out = _decay(model.basis.eigenvalues, dt, scheme) * (
        eta - _h(dt) * _sym(eta, Y, model.tensor, linear))
    if not np.all(np.isfinite(out)):
        raise IntegrationError("tangent became non-finite")
    return out


def step_second_tangent(zeta: np.ndarray, eta: np.ndarray, Y: np.ndarray, model: GalerkinModel,
                        dt, scheme: str = "exponential_euler", linear: bool = False) -> np.ndarray:
    """``d zeta = (-A zeta - B(zeta, Y) - B(Y, zeta) - 2 B(eta, eta)) dt``."""
    src = _sym(zeta, Y, model.tensor, linear) + 2.0 * _conv(eta, model.tensor, linear)
    out = _decay(model.basis.eigenvalues, dt, scheme) * (zeta - _h(dt) * src)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("second tangent became non-finite")
    return out


# --- bundle ------------------------------------------------------------------------

@dataclass
class TrajectoryBundle:
    """Results of a batch run, arrays shaped ``(n_x, n_paths, ...)``.

    ``enstrophy`` is the trapezoid of ``||Y||_1/2^2`` on the grid.  The BEL
    integrals refer to the endpoint ``T`` of the run:
    ``i_bel = sum <A^(eps/2) eta_n, dW_n>`` (left point),
    ``j_bel = int (1 - s/T) <A^1/2 eta, A^1/2 Y> ds`` and
    ``k_bel = int <A^1/2 eta, A^1/2 Y> ds`` (trapezoid).  ``i2_bel`` and
    ``j2_bel`` are their derivatives along the same direction.
    """

    times: np.ndarray
    path_ids: np.ndarray
    x0s: np.ndarray
    state: np.ndarray
    enstrophy: np.ndarray
    control_cost: np.ndarray
    sup_sq: np.ndarray
    n_jumps: np.ndarray
    aborted: np.ndarray
    abort_time: np.ndarray
    tangent: np.ndarray | None = None
    second_tangent: np.ndarray | None = None
    i_bel: np.ndarray | None = None
    j_bel: np.ndarray | None = None
    k_bel: np.ndarray | None = None
    i2_bel: np.ndarray | None = None
    j2_bel: np.ndarray | None = None
    aux: np.ndarray | None = None
    record_steps: tuple = ()
    records: np.ndarray | None = None
    record_enstrophy: np.ndarray | None = None
    path: np.ndarray | None = None
    controls_max_norm: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_x(self) -> int:
        return self.state.shape[0]

    @property
    def n_paths(self) -> int:
        return self.state.shape[1]

    @property
    def running_cost(self) -> np.ndarray:
        return self.enstrophy + self.control_cost

    @property
    def cost(self) -> np.ndarray:
        """``int (||Y||_1/2^2 + |U|^2/2) dt + ||Y(T)||^2`` per row."""
        return self.running_cost + np.sum(self.state**2, axis=-1)

    @property
    def ok(self) -> np.ndarray:
        return ~self.aborted


_AXIS = {"records": 2, "record_enstrophy": 2, "path": 2}
_PER_ROW = ("state", "enstrophy", "control_cost", "sup_sq", "aborted", "abort_time", "tangent",
            "second_tangent", "i_bel", "j_bel", "k_bel", "i2_bel", "j2_bel", "aux",
            "records", "record_enstrophy", "path")


def _concat(parts: list[TrajectoryBundle]) -> TrajectoryBundle:
    first = parts[0]
    if len(parts) == 1:
        return first
    kw = {}
    for name in _PER_ROW:
        vals = [getattr(p, name) for p in parts]
        kw[name] = None if vals[0] is None else np.concatenate(vals, axis=_AXIS.get(name, 1))
    kw["n_jumps"] = np.concatenate([p.n_jumps for p in parts])
    kw["path_ids"] = np.concatenate([p.path_ids for p in parts])
    kw["controls_max_norm"] = max(p.controls_max_norm for p in parts)
    return replace(first, **kw)


# --- engine ------------------------------------------------------------------------

@dataclass
class _Noise:
    xi: np.ndarray              # (N, P, m) standard normal
    ctrl_dir: np.ndarray | None  # (N, P, m)
    ctrl_rad: np.ndarray | None  # (N, P)
    ev_step: np.ndarray
    ev_path: np.ndarray
    ev_time: np.ndarray
    ev_field: np.ndarray
    ev_rank: np.ndarray
    ev_prev: np.ndarray
    ev_last: np.ndarray
    n_jumps: np.ndarray


def _draw_noise(model: GalerkinModel, cfg: IntegratorConfig, streams: Streams,
                path_ids: np.ndarray, random_control: bool, antithetic: bool) -> _Noise:
    N, m, P = cfg.n_steps, model.m, len(path_ids)
    xi = np.empty((N, P, m))
    ctrl_dir = np.empty((N, P, m)) if random_control else None
    ctrl_rad = np.empty((N, P)) if random_control else None
    steps, paths, times, marks = [], [], [], []
    jumps = model.jumps if (model.jumps is not None and model.jumps.rate > 0) else None
    for p, pid in enumerate(path_ids):
        pid = int(pid)
        # antithetic pairs (2k, 2k+1) share a Gaussian stream with opposite signs
        base, sign = (pid // 2, -1.0 if pid % 2 else 1.0) if antithetic else (pid, 1.0)
        if model.eps is None:
            xi[:, p, :] = 0.0
        else:
            xi[:, p, :] = sign * streams.generator(base, Role.GAUSSIAN).standard_normal((N, m))
        if jumps is not None:
            t, z = sample_jump_arrays(jumps, 0.0, cfg.T, streams.generator(pid, Role.JUMPS))
            if len(t):
                times.append(t)
                marks.append(z)
                paths.append(np.full(len(t), p))
        if random_control:
            g = streams.generator(pid, Role.CONTROL)
            d = g.standard_normal((N, m))
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            ctrl_dir[:, p, :] = d
            ctrl_rad[:, p] = g.random(N) ** (1.0 / m)
    if times:
        ev_time = np.concatenate(times)
        ev_path = np.concatenate(paths)
        ev_field = jumps.field(np.concatenate(marks))
        ev_step = np.clip(np.ceil(ev_time / cfg.dt - 1e-9).astype(np.int64) - 1, 0, N - 1)
        order = np.lexsort((ev_time, ev_path, ev_step))
        ev_time, ev_path, ev_field, ev_step = ev_time[order], ev_path[order], ev_field[order], ev_step[order]
        key = ev_step * P + ev_path
        new_group = np.r_[True, key[1:] != key[:-1]]
        group_start = np.maximum.accumulate(np.where(new_group, np.arange(len(key)), 0))
        ev_rank = np.arange(len(key)) - group_start
        ev_prev = np.where(new_group, ev_step * cfg.dt, np.r_[0.0, ev_time[:-1]])
        ev_last = np.r_[key[1:] != key[:-1], True]
        n_jumps = np.bincount(ev_path, minlength=P)
    else:
        ev_time = ev_prev = np.empty(0)
        ev_path = ev_step = ev_rank = np.empty(0, dtype=np.int64)
        ev_field = np.empty((0, m))
        ev_last = np.empty(0, dtype=bool)
        n_jumps = np.zeros(P, dtype=np.int64)
    return _Noise(xi, ctrl_dir, ctrl_rad, ev_step, ev_path, ev_time, ev_field, ev_rank, ev_prev,
                  ev_last, n_jumps)


def _chunk_size(n_x: int, n_paths: int, n_steps: int, m: int) -> int:
    by_noise = _CHUNK_NOISE_ELEMS // max(1, n_steps * m)
    by_rows = _CHUNK_ROWS // max(1, n_x)
    return int(max(1, min(n_paths, by_noise, by_rows)))


def run_paths(model: GalerkinModel, cfg: IntegratorConfig, x0s, path_ids, rng,
              control: ControlSignal | None = None, directions=None, second_order: bool = False,
              linear: bool = False, record_steps: Sequence[int] = (), aux=None,
              store_path: bool = False, workers: int = 1, antithetic: bool = False,
              abort_budget: float = ABORT_BUDGET) -> TrajectoryBundle:
    """Simulate every initial condition in ``x0s`` along every path id.

    ``directions`` (``(n_d, m)``) switches on the tangent flows and the BEL
    accumulators; ``second_order`` adds the second tangent.  ``aux(t, X, U)``
    returns a per-row integrand accumulated by the left-point rule.
    Chunking depends only on the problem size, so ``workers`` never changes
    the result.
    """
    streams = as_streams(rng)
    control = control or ControlSignal.zero()
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if x0s.shape[1] != model.m:
        raise ValueError(f"initial conditions have {x0s.shape[1]} modes, model has {model.m}")
    if not np.all(np.isfinite(x0s)):
        raise ValueError("initial condition is not finite")
    path_ids = np.asarray(path_ids, dtype=np.int64).ravel()
    if len(path_ids) == 0:
        raise ValueError("no paths requested")
    if directions is not None:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if directions.shape[1] != model.m:
            raise ValueError("direction width does not match the model")
        if control.state_dependent:
            raise ValueError("tangent flows need a state-independent control")
    elif second_order:
        raise ValueError("second_order needs directions")
    record_steps = tuple(sorted(int(s) for s in record_steps))
    if record_steps and not (0 <= record_steps[0] and record_steps[-1] <= cfg.n_steps):
        raise ValueError("record steps outside the grid")
    size = _chunk_size(len(x0s), len(path_ids), cfg.n_steps, model.m)
    chunks = [path_ids[i:i + size] for i in range(0, len(path_ids), size)]

    def job(ids):
        return _run_chunk(model, cfg, x0s, ids, streams, control, directions, second_order, linear,
                          record_steps, aux, store_path, antithetic)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    out = _concat(parts)
    frac = float(np.mean(out.aborted))
    if frac > abort_budget:
        bad = np.argwhere(out.aborted)[0]
        raise PathBudgetError(
            f"{frac:.2%} of paths aborted (budget {abort_budget:.2%})",
            int(out.path_ids[bad[1]]), float(out.abort_time[tuple(bad)]))
    out.meta.update(seed=streams.seed, n_chunks=len(chunks), chunk_size=size,
                    eigenvalues=model.basis.eigenvalues.tolist())
    return out


def _run_chunk(model, cfg, x0s, path_ids, streams, control, directions, second_order, linear,
               record_steps, aux, store_path, antithetic) -> TrajectoryBundle:
    N, dt, m, T = cfg.n_steps, cfg.dt, model.m, cfg.T
    n_x, P = len(x0s), len(path_ids)
    lam = model.basis.eigenvalues
    sigma = model.noise_scale
    sqdt = math.sqrt(dt)
    bel_w = lam ** (0.5 * model.eps) if model.eps is not None else np.zeros(m)
    comp = model.compensator
    gain = model.gain
    tensor = model.tensor
    scheme = cfg.scheme
    noise = _draw_noise(model, cfg, streams, path_ids, control.kind == "random", antithetic)
    ev_bounds = np.searchsorted(noise.ev_step, np.arange(N + 1))

    Y = np.broadcast_to(x0s[:, None, :], (n_x, P, m)).copy()
    tangents = directions is not None
    if tangents:
        n_d = len(directions)
        eta = np.broadcast_to(directions[None, None], (n_x, P, n_d, m)).copy()
        i_bel = np.zeros((n_x, P, n_d))
        j_bel = np.zeros((n_x, P, n_d))
        k_bel = np.zeros((n_x, P, n_d))
        zeta = np.zeros_like(eta) if second_order else None
        i2 = np.zeros((n_x, P, n_d)) if second_order else None
        j2 = np.zeros((n_x, P, n_d)) if second_order else None
    ens = np.zeros((n_x, P))
    ccost = np.zeros((n_x, P))
    auxacc = np.zeros((n_x, P)) if aux is not None else None
    sup_sq = np.sum(Y * Y, axis=-1)
    aborted = np.zeros((n_x, P), dtype=bool)
    abort_time = np.full((n_x, P), np.nan)
    limit_sq = (BLOWUP_FACTOR * (1.0 + np.linalg.norm(x0s, axis=-1))) ** 2
    rec = np.empty((len(record_steps), n_x, P, m)) if record_steps else None
    rec_ens = np.empty((len(record_steps), n_x, P)) if record_steps else None
    rec_pos = {s: i for i, s in enumerate(record_steps)}
    path = np.empty((N + 1, n_x, P, m)) if store_path else None
    umax = 0.0

    def enstrophy_density(y):
        return np.sum(lam * y * y, axis=-1)

    def advance(y, e, z, u_drift, h, dw):
        """Advance state (and tangents) over ``h``; ``h`` scalar or (k,) along paths."""
        hh = h if np.ndim(h) == 0 else np.asarray(h)[None, :, None]
        dec = np.exp(-lam * hh) if scheme == "exponential_euler" else 1.0 / (1.0 + lam * hh)
        drift = -_conv(y, tensor, linear) - comp
        if u_drift is not None:
            drift = drift + u_drift
        y_new = y + hh * drift
        if dw is not None:
            y_new = y_new + dw
        y_new = dec * y_new
        e_new = z_new = None
        if e is not None:
            yy = y[:, :, None, :]
            hd = hh if np.ndim(h) == 0 else hh[..., None, :]
            dd = dec if np.ndim(h) == 0 else dec[:, :, None, :]
            e_new = dd * (e - hd * _sym(e, yy, tensor, linear))
            if z is not None:
                z_new = dd * (z - hd * (_sym(z, yy, tensor, linear) + 2.0 * _conv(e, tensor, linear)))
        return y_new, e_new, z_new

    for n in range(N + 1):
        t = n * dt
        w_trap = 0.5 * dt if n in (0, N) else dt
        dens = enstrophy_density(Y)
        if n in rec_pos:
            rec[rec_pos[n]] = Y
            rec_ens[rec_pos[n]] = ens + (0.5 * dt * dens if n > 0 else 0.0)
        ens += w_trap * dens
        if tangents:
            ly = lam * Y
            cross = np.einsum("xpdm,xpm->xpd", eta, ly)
            k_bel += w_trap * cross
            j_bel += w_trap * (1.0 - t / T) * cross
            if second_order:
                c2 = np.einsum("xpdm,xpm->xpd", zeta, ly) + np.sum(lam * eta * eta, axis=-1)
                j2 += w_trap * (1.0 - t / T) * c2
        if store_path:
            path[n] = Y
        if n == N:
            break

        # control held constant over the step, taken at the left node
        if control.kind == "zero":
            U = None
        elif control.kind == "open_loop":
            U = clip_to_ball(np.asarray(control.fn(t), dtype=float), control.R)
            U = np.broadcast_to(U, (n_x, P, m))
        elif control.kind == "random":
            U = control.R * noise.ctrl_rad[n][:, None] * noise.ctrl_dir[n]
            U = clip_to_ball(np.broadcast_to(U[None], (n_x, P, m)), control.R)
        else:
            U = clip_to_ball(np.asarray(control.fn(t, Y.reshape(-1, m)), dtype=float),
                             control.R).reshape(n_x, P, m)
        if U is not None:
            usq = np.sum(U * U, axis=-1)
            umax = max(umax, float(np.sqrt(usq.max())))
            ccost += 0.5 * dt * usq
            u_drift = gain * U
        else:
            u_drift = None
        if aux is not None:
            auxacc += dt * np.asarray(aux(t, Y.reshape(-1, m), None if U is None else U.reshape(-1, m)),
                                      dtype=float).reshape(n_x, P)

        xi = noise.xi[n]
        dw = sigma * sqdt * xi[None]
        if tangents:
            proj = (bel_w * sqdt) * xi[None, :, None, :]
            i_bel += np.sum(eta * proj, axis=-1)
            if second_order:
                i2 += np.sum(zeta * proj, axis=-1)

        a, b = ev_bounds[n], ev_bounds[n + 1]
        e_cur = eta if tangents else None
        z_cur = zeta if (tangents and second_order) else None
        Yn, En, Zn = advance(Y, e_cur, z_cur, u_drift, dt, dw)
        if b > a:
            ranks = noise.ev_rank[a:b]
            rank0 = np.flatnonzero(ranks == 0) + a
            ps = noise.ev_path[rank0]
            slot = np.full(P, -1)
            slot[ps] = np.arange(len(ps))
            ys = Y[:, ps]
            es = e_cur[:, ps] if tangents else None
            zs = z_cur[:, ps] if z_cur is not None else None
            us = u_drift[:, ps] if u_drift is not None else None
            t_end = np.full(len(ps), (n + 1) * dt)
            t_last = np.empty(len(ps))
            for r in range(int(ranks.max()) + 1):
                idx = np.flatnonzero(ranks == r) + a
                sub = slot[noise.ev_path[idx]]
                h = np.maximum(noise.ev_time[idx] - noise.ev_prev[idx], 0.0)
                y_s = ys[:, sub]
                e_s = es[:, sub] if es is not None else None
                z_s = zs[:, sub] if zs is not None else None
                u_s = us[:, sub] if us is not None else None
                y_s, e_s, z_s = advance(y_s, e_s, z_s, u_s, h, dw[:, ps[sub]] if r == 0 else None)
                ys[:, sub] = y_s + noise.ev_field[idx][None]
                if es is not None:
                    es[:, sub] = e_s
                if zs is not None:
                    zs[:, sub] = z_s
                t_last[sub] = noise.ev_time[idx]
            h = np.maximum(t_end - t_last, 0.0)
            ys, es, zs = advance(ys, es, zs, us, h, None)
            Yn[:, ps] = ys
            if tangents:
                En[:, ps] = es
                if zs is not None:
                    Zn[:, ps] = zs
        Y = Yn
        if tangents:
            eta = En
            if second_order:
                zeta = Zn

        nsq = np.sum(Y * Y, axis=-1)
        bad = ~(nsq <= limit_sq[:, None]) & ~aborted
        if np.any(bad):
            aborted |= bad
            abort_time[bad] = (n + 1) * dt
            Y[aborted] = 0.0
            nsq[aborted] = 0.0
            if tangents:
                eta[aborted] = 0.0
                if second_order:
                    zeta[aborted] = 0.0
        np.maximum(sup_sq, nsq, out=sup_sq)

    bundle = TrajectoryBundle(
        times=cfg.times, path_ids=path_ids.copy(), x0s=x0s, state=Y, enstrophy=ens,
        control_cost=ccost, sup_sq=sup_sq, n_jumps=noise.n_jumps, aborted=aborted,
        abort_time=abort_time, aux=auxacc, record_steps=record_steps, records=rec,
        record_enstrophy=rec_ens, path=path, controls_max_norm=umax)
    if tangents:
        bundle.tangent, bundle.i_bel, bundle.j_bel, bundle.k_bel = eta, i_bel, j_bel, k_bel
        if second_order:
            bundle.second_tangent, bundle.i2_bel, bundle.j2_bel = zeta, i2, j2
    return bundle


def simulate(x0, model: GalerkinModel, cfg: IntegratorConfig, control: ControlSignal | None = None,
             directions=None, second_order: bool = False, rng=0, path_id: int = 0,
             linear: bool = False) -> TrajectoryBundle:
    """Single path with the full state history stored."""
    return run_paths(model, cfg, np.asarray(x0, dtype=float)[None], [path_id], rng, control,
                     directions, second_order, linear, store_path=True)


def simulate_ou(model: GalerkinModel, cfg: IntegratorConfig, rng, n_paths: int = 1,
                x0=None) -> TrajectoryBundle:
    """Exact per-mode discretization of ``dN = -A N dt + A^(-eps/2) dW``.

    Returns a bundle with ``path`` of shape ``(N+1, 1, n_paths, m)``.
    """
    if model.eps is None:
        raise ValueError("the Ornstein-Uhlenbeck reference needs Gaussian forcing")
    streams = as_streams(rng)
    lam = model.basis.eigenvalues
    m, N, dt = model.m, cfg.n_steps, cfg.dt
    mean_f = np.exp(-lam * dt)
    sd = np.sqrt(lam ** (-model.eps) * -np.expm1(-2.0 * lam * dt) / (2.0 * lam))
    path = np.empty((N + 1, 1, n_paths, m))
    path[0] = 0.0 if x0 is None else np.asarray(x0, dtype=float)
    for p in range(n_paths):
        xi = streams.generator(p, Role.GAUSSIAN).standard_normal((N, m))
        x = path[0, 0, p].copy()
        for n in range(N):
            x = mean_f * x + sd * xi[n]
            path[n + 1, 0, p] = x
    dens = np.sum(lam * path**2, axis=-1)
    w = np.full(N + 1, dt)
    w[[0, -1]] = 0.5 * dt
    ens = np.tensordot(w, dens, axes=(0, 0))
    zeros = np.zeros((1, n_paths))
    return TrajectoryBundle(
        times=cfg.times, path_ids=np.arange(n_paths), x0s=path[0, 0, :1].copy(),
        state=path[-1], enstrophy=ens, control_cost=zeros, sup_sq=np.max(np.sum(path**2, -1), 0),
        n_jumps=np.zeros(n_paths, dtype=np.int64), aborted=zeros.astype(bool),
        abort_time=np.full((1, n_paths), np.nan), path=path,
        meta={"eigenvalues": lam.tolist(), "seed": streams.seed})


def dump_path_csv(bundle: TrajectoryBundle, target, x_index: int = 0, path_index: int = 0):
    """Write one stored path: time, per-mode coefficients, running enstrophy."""
    if bundle.path is None:
        raise ValueError("bundle has no stored path; simulate with store_path=True")
    states = bundle.path[:, x_index, path_index]
    m = states.shape[1]
    lam = np.asarray(bundle.meta["eigenvalues"])
    dt = bundle.times[1] - bundle.times[0]
    d = np.sum(lam * states**2, axis=1)
    ens = np.zeros(len(bundle.times))
    ens[1:] = np.cumsum(0.5 * dt * (d[1:] + d[:-1]))
    own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"c{k}" for k in range(m)] + ["enstrophy_integral"])
        for t, row, e in zip(bundle.times, states, ens):
            w.writerow([f"{t:.10g}"] + [f"{v:.17g}" for v in row] + [f"{e:.17g}"])
    finally:
        if own:
            fh.close()
