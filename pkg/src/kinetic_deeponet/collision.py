"""Scattering kernels and the discrete linear collision operator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .quadrature import SLAB, SPHERE, DimensionError, VelocityGrid

ISOTROPIC = "isotropic"
HENYEY_GREENSTEIN = "henyey_greenstein"

# |g| above this is treated as the singular delta limit
G_LIMIT = 1.0 - 1e-9
# terms with |g|^l below this are dropped when the slab truncation is automatic
AUTO_TRUNCATION_TOL = 1e-16


class SingularKernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = ISOTROPIC
    g: float = 0.0
    slab_truncation: int | None = None

    def __post_init__(self):
        if self.kind not in (ISOTROPIC, HENYEY_GREENSTEIN):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not -1.0 <= self.g <= 1.0:
            raise ValueError(f"anisotropy g={self.g} outside [-1, 1]")
        if self.slab_truncation is not None and self.slab_truncation < 1:
            raise ValueError("slab_truncation must be >= 1")

    def truncation(self) -> int:
        """Number of Legendre terms kept for the slab HG kernel."""
        if self.slab_truncation is not None:
            return self.slab_truncation
        return auto_truncation(self.g)

    def spec(self) -> dict:
        return {"kind": self.kind, "g": float(self.g), "L": self.slab_truncation}


def auto_truncation(g: float) -> int:
    g = abs(g)
    if g == 0.0:
        return 1
    if g > G_LIMIT:
        raise SingularKernelError("|g| too close to 1")
    return max(12, int(math.ceil(math.log(AUTO_TRUNCATION_TOL) / math.log(g))))


def _check_g(g: float) -> None:
    if abs(g) > G_LIMIT:
        raise SingularKernelError(f"Henyey-Greenstein kernel is singular at |g|={abs(g)}")


def hg_phase(g: float, cos_angle):
    """HG phase function on the sphere as a function of the scattering cosine."""
    _check_g(g)
    cos_angle = np.asarray(cos_angle, dtype=np.float64)
    return (1.0 - g * g) / (4.0 * math.pi * (1.0 - 2.0 * g * cos_angle + g * g) ** 1.5)


def hg_kernel_sphere(g: float, v, v_star):
    v = np.asarray(v, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    return hg_phase(g, np.sum(v * v_star, axis=-1))


def _legendre_table(max_degree: int, x: np.ndarray) -> np.ndarray:
    """Rows P_0..P_max_degree evaluated at x."""
    x = np.asarray(x, dtype=np.float64)
    table = np.empty((max_degree + 1,) + x.shape)
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = x
    for k in range(2, max_degree + 1):
        table[k] = ((2 * k - 1) * x * table[k - 1] - (k - 1) * table[k - 2]) / k
    return table


def hg_kernel_slab(g: float, mu, mu_star, L: int | None = None):
    """Azimuthally averaged HG kernel, truncated Legendre expansion.

    k(mu, mu*) = sum_{l=0}^{L} (2l+1)/2 g^l P_l(mu) P_l(mu*); normalized so
    that its integral over mu* in [-1, 1] is one.
    """
    _check_g(g)
    mu, mu_star = np.broadcast_arrays(np.asarray(mu, dtype=np.float64), np.asarray(mu_star, dtype=np.float64))
    if np.any(np.abs(mu) > 1.0) or np.any(np.abs(mu_star) > 1.0):
        raise ValueError("slab directions must lie in [-1, 1]")
    L = auto_truncation(g) if L is None else L
    if L < 1:
        raise ValueError("L must be >= 1")
    coef = (2 * np.arange(L + 1) + 1) / 2.0 * g ** np.arange(L + 1)
    pa = _legendre_table(L, mu)
    pb = _legendre_table(L, mu_star)
    return np.tensordot(coef, pa * pb, axes=1)


def kernel_table(grid: VelocityGrid, kernel: KernelSpec) -> np.ndarray:
    """Symmetric matrix K[i, j] = k(v_j, v_i) on the grid points."""
    m = grid.size
    if kernel.kind == ISOTROPIC:
        return np.full((m, m), 1.0 / grid.measure)
    if grid.domain == SLAB:
        L = kernel.truncation()
        _check_g(kernel.g)
        coef = (2 * np.arange(L + 1) + 1) / 2.0 * kernel.g ** np.arange(L + 1)
        p = _legendre_table(L, grid.points)
        K = (p * coef[:, None]).T @ p
    else:
        cosines = np.clip(grid.points @ grid.points.T, -1.0, 1.0)
        K = hg_phase(kernel.g, cosines)
    return 0.5 * (K + K.T)


@dataclass(frozen=True)
class CollisionMatrix:
    """Dense discretization A with (Q f)_i = sum_j A[i, j] f_j."""

    grid: VelocityGrid
    kernel: KernelSpec
    A: np.ndarray

    def __post_init__(self):
        self.A.setflags(write=False)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"a_{j + 1}" for j in range(self.grid.size)])
            for row in self.A:
                writer.writerow([repr(float(a)) for a in row])


def assemble_collision_matrix(grid: VelocityGrid, kernel: KernelSpec) -> CollisionMatrix:
    if grid.domain not in (SLAB, SPHERE):
        raise ValueError(f"unknown grid domain {grid.domain!r}")
    if grid.domain == SPHERE and kernel.slab_truncation is not None:
        raise ValueError("slab kernel truncation given for a sphere grid")
    K = kernel_table(grid, kernel)
    A = K * grid.weights[None, :]
    np.fill_diagonal(A, 0.0)
    # loss term folded into the diagonal so that A @ 1 vanishes row by row
    np.fill_diagonal(A, -A.sum(axis=1))
    return CollisionMatrix(grid, kernel, A)


def apply_collision(matrix: CollisionMatrix, f):
    """Apply A to one density (m,) or a batch (T, m)."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != matrix.grid.size:
        raise DimensionError(f"expected trailing length {matrix.grid.size}, got {f.shape[-1]}")
    return f @ matrix.A.T
