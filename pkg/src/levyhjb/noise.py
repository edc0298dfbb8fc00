"""Colored Gaussian forcing and finite-activity (compound Poisson) jump noise.

The jump coefficient is separable, ``G(t, z) = s(z) * g`` with a fixed gain
vector ``g_k = amplitude * lambda_k^(-decay) / sqrt(Z)``.  ``Z`` is the full
lattice sum of ``lambda^(-2*decay)``, so ``||g|| <= amplitude`` at every
truncation level and each gain is independent of ``m``.  Mark shapes satisfy
``|s(z)| <= 1``, hence ``sup_z ||G(t, z)|| <= amplitude``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from .rng import Role, Streams, as_streams
from .spectral import Basis, fractional_norm


class RegimeWarning(UserWarning):
    """A parameter sits outside the range the theory covers."""


@dataclass(frozen=True)
class GaussianNoiseSpec:
    """Forcing ``A^(-eps/2) dW`` on ``basis``."""

    eps: float
    basis: Basis

    def __post_init__(self):
        if not self.in_regime:
            warnings.warn(f"eps={self.eps} <= 1: Tr(A^-eps) is not summable", RegimeWarning,
                          stacklevel=3)

    @property
    def in_regime(self) -> bool:
        return self.eps > 1.0

    @property
    def scale(self) -> np.ndarray:
        """Per-mode coloring ``lambda_k^(-eps/2)``."""
        return self.basis.eigenvalues ** (-0.5 * self.eps)


def sample_wiener_increment(spec: GaussianNoiseSpec, dt: float,
                            rng: np.random.Generator) -> np.ndarray:
    """One colored increment ``A^(-eps/2) (W(t+dt) - W(t))``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return spec.scale * math.sqrt(dt) * rng.standard_normal(spec.basis.m)


# --- marks ------------------------------------------------------------------

@dataclass(frozen=True)
class MarkDistribution:
    """Law of the scalar mark ``z`` and the bounded shape ``s(z)``.

    ``constant``: ``z = value``, ``s = value``.
    ``clipped_gaussian``: ``z ~ N(mean, std^2)``, ``s = clip(z, -1, 1)``.
    ``rademacher``: ``z = +-1`` with equal probability, ``s = z``.
    """

    name: str
    mean: float = 0.0
    std: float = 1.0
    value: float = 1.0

    def __post_init__(self):
        if self.name not in ("constant", "clipped_gaussian", "rademacher"):
            raise ValueError(f"unknown mark distribution {self.name!r}")
        if self.name == "constant" and abs(self.value) > 1.0:
            raise ValueError("constant mark shape must satisfy |value| <= 1")
        if self.name == "clipped_gaussian" and not self.std > 0:
            raise ValueError("clipped_gaussian needs std > 0")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.name == "constant":
            return np.full(n, self.value)
        if self.name == "rademacher":
            return rng.choice(np.array([-1.0, 1.0]), size=n)
        return self.mean + self.std * rng.standard_normal(n)

    def shape(self, z):
        if self.name == "clipped_gaussian":
            return np.clip(z, -1.0, 1.0)
        return np.asarray(z, dtype=float)

    @property
    def sup_shape(self) -> float:
        return abs(self.value) if self.name == "constant" else 1.0

    def shape_moments(self) -> tuple[float, float]:
        """Closed-form ``(E[s], E[s^2])``."""
        if self.name == "constant":
            return self.value, self.value**2
        if self.name == "rademacher":
            return 0.0, 1.0
        mu, sd = self.mean, self.std
        a, b = (-1.0 - mu) / sd, (1.0 - mu) / sd
        pa, pb = norm.cdf(a), norm.sf(b)
        mid = norm.cdf(b) - pa
        da, db = norm.pdf(a), norm.pdf(b)
        first = -pa + pb + mu * mid + sd * (da - db)
        w2 = mid + a * da - b * db
        second = pa + pb + mu * mu * mid + 2.0 * mu * sd * (da - db) + sd * sd * w2
        return float(first), float(second)


# --- jump model ----------------------------------------------------------------

@lru_cache(maxsize=32)
def lattice_norm_constant(decay: float, cutoff: int = 400) -> float:
    """``sum over k in Z^2 \\ {0} of |k|^(-4*decay)`` with an integral tail."""
    if decay <= 0.5:
        raise ValueError("gain decay must exceed 1/2 for a bounded jump coefficient")
    r = np.arange(-cutoff, cutoff + 1, dtype=float)
    k2 = r[:, None] ** 2 + r[None, :] ** 2
    inside = (k2 > 0) & (k2 <= cutoff**2)
    head = np.sum(k2[inside] ** (-2.0 * decay))
    tail = 2.0 * math.pi * cutoff ** (2.0 - 4.0 * decay) / (4.0 * decay - 2.0)
    return float(head + tail)


@dataclass(frozen=True)
class JumpModel:
    """Compound Poisson jumps ``G(z) = s(z) * gains`` with intensity ``rate``."""

    rate: float
    gains: np.ndarray
    marks: MarkDistribution
    theta: float = 0.0

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"jump rate must be nonnegative, got {self.rate}")
        self.gains.setflags(write=False)

    @classmethod
    def build(cls, basis: Basis, rate: float, amplitude: float, decay: float = 1.0,
              marks: MarkDistribution | None = None, theta: float = 0.0) -> "JumpModel":
        if amplitude < 0:
            raise ValueError("jump amplitude must be nonnegative")
        z = lattice_norm_constant(float(decay))
        gains = amplitude * basis.eigenvalues ** (-decay) / math.sqrt(z)
        return cls(float(rate), gains, marks or MarkDistribution("constant"), float(theta))

    @property
    def active(self) -> bool:
        return self.rate > 0 and bool(np.any(self.gains))

    @property
    def g_max(self) -> float:
        """``sup_z ||G(t, z)||`` for this truncation."""
        return self.marks.sup_shape * float(np.linalg.norm(self.gains))

    def field(self, marks) -> np.ndarray:
        """Jump fields for an array of marks, shape ``(n, m)``."""
        s = self.marks.shape(np.asarray(marks, dtype=float))
        return np.multiply.outer(s, self.gains)

    def second_moment(self) -> float:
        """``int ||G||^2 mu(dz)`` per unit time."""
        return self.rate * self.marks.shape_moments()[1] * float(self.gains @ self.gains)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: float
    field: np.ndarray


def sample_jump_arrays(model: JumpModel, t0: float, t1: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sorted event times in ``(t0, t1]`` and their marks."""
    if not t0 < t1:
        raise ValueError(f"need t0 < t1, got [{t0}, {t1}]")
    if model.rate == 0:
        return np.empty(0), np.empty(0)
    n = rng.poisson(model.rate * (t1 - t0))
    times = np.sort(t0 + (t1 - t0) * (1.0 - rng.random(n)))
    marks = model.marks.sample(rng, n)
    return times, marks


def sample_jump_events(model: JumpModel, t0: float, t1: float,
                       rng: np.random.Generator) -> list[JumpEvent]:
    times, marks = sample_jump_arrays(model, t0, t1, rng)
    fields = model.field(marks)
    return [JumpEvent(float(t), float(z), f) for t, z, f in zip(times, marks, fields)]


def compensator_drift(model: JumpModel, t: float = 0.0) -> np.ndarray:
    """``int G(t, z) mu(dz) = rate * E[s] * gains`` (time independent here)."""
    if model.rate == 0:
        return np.zeros_like(model.gains)
    return model.rate * model.marks.shape_moments()[0] * model.gains


def check_h1(model: JumpModel, theta: float, p: float, alpha1: float, horizon: float,
             basis: Basis, rng: np.random.Generator, n_marks: int = 100_000) -> float:
    """Monte Carlo value of the exponential-moment integral in assumption (H1)."""
    if p < 2:
        raise ValueError("p must be at least 2")
    if not 0.0 <= alpha1 <= 0.5:
        raise ValueError("alpha1 must lie in [0, 1/2]")
    if model.rate == 0:
        return 0.0
    G = model.field(model.marks.sample(rng, n_marks))
    g_alpha = fractional_norm(G, basis, alpha1)
    g0 = fractional_norm(G, basis, 0.0)
    integrand = (1.0 + g_alpha) ** p * np.exp(2.0 * theta * g0**2)
    return float(model.rate * horizon * integrand.mean())


def h1_envelope(model: JumpModel, theta: float, p: float, alpha1: float, horizon: float,
                basis: Basis) -> float:
    """Analytic upper bound for :func:`check_h1` from ``||G|| <= g_max``."""
    gm = model.g_max
    lam_m = float(basis.eigenvalues[-1])
    return model.rate * horizon * (1.0 + lam_m**alpha1 * gm) ** p * math.exp(2.0 * theta * gm**2)


def compensated_jump_integral(model: JumpModel, horizon: float, gen: np.random.Generator) -> np.ndarray:
    """``int_0^T int_Z G dpi~`` for one path."""
    times, marks = sample_jump_arrays(model, 0.0, horizon, gen)
    total = model.field(marks).sum(axis=0) if len(times) else np.zeros_like(model.gains)
    return total - horizon * compensator_drift(model)


def ito_isometry_diagnostic(model: JumpModel, spec: GaussianNoiseSpec | None, T: float,
                            n_paths: int, rng) -> tuple[float, float, float]:
    """MC ``E||int int G dpi~||^2`` against ``int int ||G||^2 mu(dz) dt``.

    Returns ``(mc_lhs, analytic_rhs, stderr)``.
    """
    if n_paths < 100:
        raise ValueError("use at least 100 paths")
    if model.rate == 0:
        return 0.0, 0.0, 0.0
    streams: Streams = as_streams(rng)
    sq = np.empty(n_paths)
    for i in range(n_paths):
        M = compensated_jump_integral(model, T, streams.generator(i, Role.JUMPS))
        sq[i] = M @ M
    return float(sq.mean()), float(T * model.second_moment()), float(sq.std(ddof=1) / math.sqrt(n_paths))
