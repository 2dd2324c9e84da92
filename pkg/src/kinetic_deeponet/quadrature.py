"""Velocity-space quadratures for the slab interval [-1, 1] and the unit sphere."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

SLAB = "slab1d"
SPHERE = "sphere"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class VelocityGrid:
    """Quadrature nodes and positive weights defining the discrete velocity space.

    ``points`` has shape (m,) for the slab and (m, 3) for the sphere.
    """

    domain: str
    points: np.ndarray
    weights: np.ndarray
    order: tuple = field(default=())

    def __post_init__(self):
        for arr in (self.points, self.weights):
            arr.setflags(write=False)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        """Coordinate dimension fed to the trunk net."""
        return 1 if self.domain == SLAB else 3

    @property
    def measure(self) -> float:
        return 2.0 if self.domain == SLAB else 4.0 * math.pi

    def coords(self) -> np.ndarray:
        """Points as an (m, dim) array."""
        return self.points.reshape(self.size, self.dim)

    def advection_speeds(self) -> np.ndarray:
        """Velocity components used for spatial transport, shape (m, dim)."""
        return self.coords()

    def spec(self) -> dict:
        if self.domain == SLAB:
            return {"domain": SLAB, "order": int(self.order[0])}
        return {
            "domain": SPHERE,
            "n_polar": int(self.order[0]),
            "n_azimuthal": int(self.order[1]),
        }

    def write_csv(self, path) -> None:
        coords = self.coords()
        names = ["mu"] if self.domain == SLAB else ["vx", "vy", "vz"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", *names, "weight"])
            for i in range(self.size):
                writer.writerow([i, *map(repr, map(float, coords[i])), repr(float(self.weights[i]))])


def grid_from_spec(spec: dict) -> VelocityGrid:
    if spec["domain"] == SLAB:
        return gauss_legendre_slab(int(spec["order"]))
    if spec["domain"] == SPHERE:
        return tensorized_sphere_grid(int(spec["n_polar"]), int(spec["n_azimuthal"]))
    raise ValueError(f"unknown grid domain {spec['domain']!r}")


def legendre_with_derivative(n: int, x: np.ndarray):
    """Return P_n(x) and P_n'(x) via the three-term recurrence."""
    x = np.asarray(x, dtype=np.float64)
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev, np.zeros_like(x)
    p = x.copy()
    for k in range(2, n + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    dp = n * (x * p - p_prev) / (x * x - 1.0)
    return p, dp


def gauss_legendre_nodes(n: int, tol: float = 1e-15, max_iter: int = 100):
    """Gauss-Legendre nodes (ascending) and weights on [-1, 1].

    Newton iteration on P_n started from the Tricomi asymptotic guesses;
    only the non-negative half is iterated and the rest follows by symmetry.
    """
    if n < 1:
        raise ValueError("quadrature order must be >= 1")
    half = (n + 1) // 2
    k = np.arange(1, half + 1)
    theta = math.pi * (4 * k - 1) / (4 * n + 2)
    x = (1 - (n - 1) / (8.0 * n**3)) * np.cos(theta)
    for _ in range(max_iter):
        p, dp = legendre_with_derivative(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) <= tol:
            break
    p, dp = legendre_with_derivative(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    if n % 2 == 1:
        x[-1] = 0.0
        nodes = np.concatenate([-x[:-1], x])
        weights = np.concatenate([w[:-1], w])
    else:
        nodes = np.concatenate([-x, x])
        weights = np.concatenate([w, w])
    order = np.argsort(nodes)
    return nodes[order], weights[order]


def gauss_legendre_slab(order: int) -> VelocityGrid:
    nodes, weights = gauss_legendre_nodes(order)
    return VelocityGrid(SLAB, nodes, weights, (int(order),))


def tensorized_sphere_grid(n_polar: int, n_azimuthal: int) -> VelocityGrid:
    """Product rule: Gauss-Legendre in cos(theta) times the midpoint rule in phi."""
    if n_polar < 1 or n_azimuthal < 2:
        raise ValueError("need n_polar >= 1 and n_azimuthal >= 2")
    mu, w_mu = gauss_legendre_nodes(n_polar)
    phi = 2.0 * math.pi * (np.arange(n_azimuthal) + 0.5) / n_azimuthal
    w_phi = 2.0 * math.pi / n_azimuthal
    mu_t, phi_t = np.meshgrid(mu, phi, indexing="ij")
    sin_t = np.sqrt(np.maximum(1.0 - mu_t**2, 0.0))
    pts = np.stack([sin_t * np.cos(phi_t), sin_t * np.sin(phi_t), mu_t], axis=-1).reshape(-1, 3)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    weights = np.repeat(w_mu * w_phi, n_azimuthal)
    return VelocityGrid(SPHERE, pts, weights, (int(n_polar), int(n_azimuthal)))


def integrate(grid: VelocityGrid, values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != grid.size:
        raise DimensionError(f"expected trailing length {grid.size}, got {values.shape[-1]}")
    return values @ grid.weights


def inner_product(grid: VelocityGrid, a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return integrate(grid, a * b)
