"""Divergence-free Fourier basis of the Stokes operator on the 2D torus.

Fields live on ``[0, 2*pi)^2`` and are expanded in real modes

    e(x) = p_k * c * cos(k.x)   or   e(x) = p_k * c * sin(k.x),

with ``p_k = (-k2, k1)/|k|`` (orthogonal to ``k``, hence divergence free) and
``c = 1/(sqrt(2)*pi)`` so that every mode has unit L2 norm.  The Stokes operator
is diagonal with eigenvalue ``|k|^2``.  Viscosity is fixed to one.

A spectral field is a plain real vector of mode coefficients; batches of fields
are arrays whose last axis indexes modes.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

NORMALISATION = 1.0 / (math.sqrt(2.0) * math.pi)
TORUS_AREA = 4.0 * math.pi**2

SIN, COS = 0, 1


class ConvergenceWarning(UserWarning):
    """A truncated series is used outside the range where it converges."""


@dataclass(frozen=True)
class Basis:
    """First ``m`` real Stokes eigenmodes, sorted by eigenvalue.

    ``wavenumbers[j]`` is the half-plane representative of mode ``j`` and
    ``parity[j]`` is ``SIN`` or ``COS``.
    """

    wavenumbers: np.ndarray
    parity: np.ndarray

    def __post_init__(self):
        for arr in (self.wavenumbers, self.parity):
            arr.setflags(write=False)

    @property
    def m(self) -> int:
        return len(self.parity)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        lam = (self.wavenumbers**2).sum(axis=1).astype(float)
        lam.setflags(write=False)
        return lam

    @cached_property
    def polarization(self) -> np.ndarray:
        k = self.wavenumbers.astype(float)
        p = np.stack([-k[:, 1], k[:, 0]], axis=1) / np.sqrt(self.eigenvalues)[:, None]
        p.setflags(write=False)
        return p

    def mode_table(self) -> list[dict]:
        return [
            {
                "index": j,
                "k": [int(v) for v in self.wavenumbers[j]],
                "parity": "sin" if self.parity[j] == SIN else "cos",
                "eigenvalue": float(self.eigenvalues[j]),
                "polarization": [float(v) for v in self.polarization[j]],
            }
            for j in range(self.m)
        ]

    def unit(self, j: int) -> np.ndarray:
        """Coefficient vector of the single mode ``e_j`` (0-based)."""
        u = np.zeros(self.m)
        u[j] = 1.0
        return u

    def evaluate(self, coeffs: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                 derivative: bool = False):
        """Evaluate a field on points ``(xs, ys)``.

        Returns the velocity, shape ``(2,) + xs.shape``; with ``derivative``
        also the gradient ``grad[l, j] = d_l u_j`` of shape ``(2, 2) + xs.shape``.
        """
        coeffs = np.asarray(coeffs, dtype=float)
        shape = np.shape(xs)
        u = np.zeros((2,) + shape)
        grad = np.zeros((2, 2) + shape) if derivative else None
        for j in np.flatnonzero(coeffs):
            k1, k2 = self.wavenumbers[j]
            phase = k1 * xs + k2 * ys
            if self.parity[j] == COS:
                val, dval = np.cos(phase), -np.sin(phase)
            else:
                val, dval = np.sin(phase), np.cos(phase)
            a = coeffs[j] * NORMALISATION
            p = self.polarization[j]
            u += a * np.multiply.outer(p, val)
            if derivative:
                kv = np.array([k1, k2], dtype=float)
                grad += a * np.multiply.outer(np.outer(kv, p), dval)
        return (u, grad) if derivative else u


def build_basis(m: int) -> Basis:
    """Return the first ``m`` real modes ordered by ``|k|^2``.

    Ties are broken lexicographically on the wavenumber, sine before cosine.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"truncation level must be a positive integer, got {m!r}")
    m = int(m)
    radius = int(math.ceil(math.sqrt(m))) + 1
    while True:
        ks = [
            (k1, k2)
            for k1 in range(0, radius + 1)
            for k2 in range(-radius, radius + 1)
            if (k1 > 0 or k2 > 0) and k1 * k1 + k2 * k2 <= radius * radius
        ]
        if 2 * len(ks) >= m:
            break
        radius += 1
    modes = sorted(
        ((k1 * k1 + k2 * k2, k1, k2, par) for (k1, k2) in ks for par in (SIN, COS))
    )[:m]
    wav = np.array([[k1, k2] for (_, k1, k2, _) in modes], dtype=np.int64)
    par = np.array([p for (*_, p) in modes], dtype=np.int64)
    return Basis(wav, par)


def fractional_apply(u: np.ndarray, basis: Basis, alpha: float) -> np.ndarray:
    """Apply ``A^alpha`` mode-wise (negative powers allowed)."""
    return np.asarray(u, dtype=float) * basis.eigenvalues**alpha


def fractional_norm(u: np.ndarray, basis: Basis, alpha: float = 0.0):
    """``||u||_alpha = ||A^alpha u||``; vectorised over leading axes."""
    v = fractional_apply(u, basis, alpha)
    return np.sqrt(np.sum(v * v, axis=-1))


def trace_fractional(basis: Basis, eps: float) -> float:
    """Partial trace ``sum_k lambda_k^(-eps)``; warns when ``eps <= 1``."""
    if eps <= 1.0:
        warnings.warn(
            f"Tr(A^-eps) diverges as m grows for eps={eps} <= 1; "
            "returning the finite partial sum",
            ConvergenceWarning,
            stacklevel=2,
        )
    return float(np.sum(basis.eigenvalues ** (-eps)))


# --- trilinear form --------------------------------------------------------

_ALPHA = {
    COS: {1: 0.5 + 0j, -1: 0.5 + 0j},
    SIN: {1: -0.5j, -1: 0.5j},
}


def _trilinear_dense(basis: Basis) -> np.ndarray:
    """Exact ``b(e_i, e_j, e_k)`` from the complex-exponential expansion."""
    m = basis.m
    kv = basis.wavenumbers.astype(np.int64)
    P = basis.polarization
    par = basis.parity
    # (p_a . k_b) and (p_b . p_c)
    pa_kb = P @ kv.T.astype(float)  # [a, b]
    pb_pc = P @ P.T  # [b, c]
    acc = np.zeros((m, m, m), dtype=complex)
    coef = {(pr, s): _ALPHA[pr][s] for pr in (SIN, COS) for s in (1, -1)}
    for s1 in (1, -1):
        for s2 in (1, -1):
            for s3 in (1, -1):
                total = (
                    s1 * kv[:, None, None, :]
                    + s2 * kv[None, :, None, :]
                    + s3 * kv[None, None, :, :]
                )
                hit = np.all(total == 0, axis=-1)
                if not hit.any():
                    continue
                a1 = np.array([coef[(p, s1)] for p in par])
                a2 = np.array([coef[(p, s2)] for p in par]) * (1j * s2)
                a3 = np.array([coef[(p, s3)] for p in par])
                acc += hit * (a1[:, None, None] * a2[None, :, None] * a3[None, None, :])
    geom = pa_kb[:, :, None] * pb_pc[None, :, :]
    vals = NORMALISATION**3 * TORUS_AREA * geom * acc
    if np.max(np.abs(vals.imag), initial=0.0) > 1e-12:
        raise RuntimeError("trilinear coefficients acquired an imaginary part")
    return vals.real


@dataclass(frozen=True)
class TrilinearTensor:
    """Dense storage of ``b_{ijk} = b(e_i, e_j, e_k)`` with a sparse view.

    Built once per basis; antisymmetry in the last two slots is imposed by
    construction and verified.
    """

    basis: Basis
    values: np.ndarray
    checksum: str = field(default="")

    def __post_init__(self):
        self.values.setflags(write=False)
        if not self.checksum:
            object.__setattr__(self, "checksum", _tensor_checksum(self.values))

    @property
    def m(self) -> int:
        return self.basis.m

    @cached_property
    def matrix(self) -> np.ndarray:
        """``values`` reshaped to ``(m*m, m)`` for batched contraction."""
        mat = np.ascontiguousarray(self.values.reshape(self.m * self.m, self.m))
        mat.setflags(write=False)
        return mat

    @cached_property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def entries(self):
        """Nonzero entries as ``(i, j, k, value)`` tuples."""
        idx = np.argwhere(self.values != 0.0)
        return [(int(i), int(j), int(k), float(self.values[i, j, k])) for i, j, k in idx]

    def antisymmetry_defect(self) -> float:
        """``max |b_ijk + b_ikj|`` over all stored entries."""
        return float(np.max(np.abs(self.values + self.values.transpose(0, 2, 1)), initial=0.0))


def _tensor_checksum(values: np.ndarray) -> str:
    # + 0.0 folds -0.0 into 0.0 so equal tensors hash equally
    return hashlib.sha256(np.ascontiguousarray(values + 0.0, dtype="<f8").tobytes()).hexdigest()


def build_trilinear_tensor(basis: Basis) -> TrilinearTensor:
    raw = _trilinear_dense(basis)
    # exact antisymmetry: (a - b)/2 and (b - a)/2 are exact negatives in IEEE
    vals = 0.5 * (raw - raw.transpose(0, 2, 1))
    if np.max(np.abs(vals - raw), initial=0.0) > 1e-12:
        raise RuntimeError("analytic trilinear coefficients are not antisymmetric")
    tensor = TrilinearTensor(basis, vals)
    if tensor.antisymmetry_defect() != 0.0:
        raise RuntimeError("antisymmetry verification failed")
    return tensor


def _check_width(arr: np.ndarray, tensor: TrilinearTensor):
    if arr.shape[-1] != tensor.m:
        raise ValueError(
            f"field has {arr.shape[-1]} modes but the tensor was built for m={tensor.m}"
        )


def bilinear_term(u: np.ndarray, v: np.ndarray, tensor: TrilinearTensor) -> np.ndarray:
    """Components ``<B(u, v), e_k> = sum_ij u_i v_j b_ijk``; batched over rows."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_width(u, tensor)
    _check_width(v, tensor)
    if tensor.is_zero:
        return np.zeros(np.broadcast_shapes(u.shape, v.shape))
    m = tensor.m
    outer = u[..., :, None] * v[..., None, :]
    lead = outer.shape[:-2]
    out = outer.reshape(-1, m * m) @ tensor.matrix
    return out.reshape(lead + (m,))


def nonlinear_term(u: np.ndarray, tensor: TrilinearTensor) -> np.ndarray:
    """Galerkin convection ``B_m(u) = P_m B(u, u)`` in spectral coordinates."""
    return bilinear_term(u, u, tensor)


def trilinear_form(u, v, w, tensor: TrilinearTensor) -> float:
    return float(np.dot(bilinear_term(u, v, tensor), np.asarray(w, dtype=float)))


def trilinear_bound_check(u, v, w, tensor: TrilinearTensor, r: float) -> float:
    """Ratio ``|b(u,v,w)| / (||u||_r ||v||_1/2 ||w||_(1/2-r))``."""
    if not 0.0 < r < 0.5:
        raise ValueError(f"r must lie in (0, 1/2), got {r}")
    basis = tensor.basis
    num = abs(trilinear_form(u, v, w, tensor))
    den = (
        fractional_norm(u, basis, r)
        * fractional_norm(v, basis, 0.5)
        * fractional_norm(w, basis, 0.5 - r)
    )
    if den == 0.0:
        if num == 0.0:
            return 0.0
        raise ArithmeticError("nonzero trilinear value with a vanishing norm product")
    return num / den


# --- grid oracle ------------------------------------------------------------

def pseudo_spectral_nonlinear(u: np.ndarray, basis: Basis, n_grid: int | None = None) -> np.ndarray:
    """Independent route to ``<(u.grad)u, e_k>`` by grid quadrature.

    The integrand is a trigonometric polynomial, so the uniform rule is exact
    once ``n_grid`` exceeds three times the largest wavenumber component.
    """
    kmax = int(np.max(np.abs(basis.wavenumbers)))
    if n_grid is None:
        n_grid = max(16, 3 * kmax + 2)
    g = 2.0 * np.pi * np.arange(n_grid) / n_grid
    xs, ys = np.meshgrid(g, g, indexing="ij")
    vel, grad = basis.evaluate(u, xs, ys, derivative=True)
    conv = np.einsum("lxy,ljxy->jxy", vel, grad)
    weight = (2.0 * np.pi / n_grid) ** 2
    out = np.zeros(basis.m)
    for k in range(basis.m):
        ek = basis.evaluate(basis.unit(k), xs, ys)
        out[k] = weight * np.sum(conv * ek)
    return out


def quadrature_trilinear(basis: Basis, i: int, j: int, k: int, n_grid: int = 64) -> float:
    """``b(e_i, e_j, e_k)`` by direct quadrature of ``sum u_l d_l v_j w_j``."""
    g = 2.0 * np.pi * np.arange(n_grid) / n_grid
    xs, ys = np.meshgrid(g, g, indexing="ij")
    u = basis.evaluate(basis.unit(i), xs, ys)
    _, dv = basis.evaluate(basis.unit(j), xs, ys, derivative=True)
    w = basis.evaluate(basis.unit(k), xs, ys)
    integrand = np.einsum("lxy,ljxy,jxy->xy", u, dv, w)
    return float(integrand.sum() * (2.0 * np.pi / n_grid) ** 2)


# --- snapshot ---------------------------------------------------------------

SNAPSHOT_VERSION = 1


def export_snapshot(tensor: TrilinearTensor) -> dict:
    """JSON-ready record of the mode table, eigenvalues and sparse tensor."""
    return {
        "snapshot_version": SNAPSHOT_VERSION,
        "m": tensor.m,
        "modes": tensor.basis.mode_table(),
        "eigenvalues": [float(v) for v in tensor.basis.eigenvalues],
        "tensor_entries": [list(e) for e in tensor.entries()],
        "checksum": tensor.checksum,
    }


def load_snapshot(data: dict | str) -> TrilinearTensor:
    """Rebuild a tensor from :func:`export_snapshot` output without re-verifying it.

    The stored checksum is kept only when it matches the stored entries, so a
    hand-edited snapshot is loadable (for fault injection) but recognisable.
    """
    if isinstance(data, str):
        data = json.loads(data)
    if data.get("snapshot_version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {data.get('snapshot_version')!r}")
    m = int(data["m"])
    wav = np.array([mode["k"] for mode in data["modes"]], dtype=np.int64)
    par = np.array([SIN if mode["parity"] == "sin" else COS for mode in data["modes"]])
    basis = Basis(wav, par)
    vals = np.zeros((m, m, m))
    for i, j, k, v in data["tensor_entries"]:
        vals[int(i), int(j), int(k)] = float(v)
    return TrilinearTensor(basis, vals)
