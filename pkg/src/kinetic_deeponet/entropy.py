"""Entropy-closure based sampling of training densities.

Densities are drawn from the Maxwell-Boltzmann closure family
f = exp(alpha . m(v)) with Lagrange multipliers scattered around the
equilibrium, normalized to unit first moment, filtered by an entropy
threshold and labeled with the exact discrete collision operator.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import factorial, logsumexp, lpmv

from .autodiff import mgs2
from .collision import CollisionMatrix, apply_collision
from .quadrature import SLAB, SPHERE, VelocityGrid

log = logging.getLogger(__name__)

EXP_LIMIT = 500.0


class ReconstructionOverflowError(OverflowError):
    pass


class RealizabilityError(RuntimeError):
    pass


class IllConditionedError(RuntimeError):
    pass


class ThresholdTooTightError(RuntimeError):
    pass


class BasisConditioningError(RuntimeError):
    pass


@dataclass(frozen=True)
class MomentBasis:
    grid: VelocityGrid
    degree: int
    M: np.ndarray

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def m1(self) -> float:
        return float(self.M[0, 0])

    def moments(self, f) -> np.ndarray:
        """u = <m f> for a density (m,) or a batch (T, m)."""
        return np.asarray(f) @ (self.M * self.grid.weights).T


def _legendre_rows(degree, mu):
    rows = []
    for l in range(degree + 1):
        c = np.zeros(l + 1)
        c[l] = 1.0
        rows.append(math.sqrt((2 * l + 1) / 2.0) * np.polynomial.legendre.legval(mu, c))
    return np.array(rows)


def real_spherical_harmonics(degree, points) -> np.ndarray:
    """Orthonormal real spherical harmonics up to ``degree`` at unit vectors.

    Row order is (l, m) with l ascending and m = 0, 1, -1, 2, -2, ...
    """
    points = np.asarray(points, dtype=np.float64)
    z = np.clip(points[:, 2], -1.0, 1.0)
    phi = np.arctan2(points[:, 1], points[:, 0])
    rows = []
    for l in range(degree + 1):
        rows.append(math.sqrt((2 * l + 1) / (4 * math.pi)) * lpmv(0, l, z))
        for m in range(1, l + 1):
            norm = math.sqrt(2.0 * (2 * l + 1) / (4 * math.pi) * factorial(l - m) / factorial(l + m))
            plm = lpmv(m, l, z)
            rows.append(norm * plm * np.cos(m * phi))
            rows.append(norm * plm * np.sin(m * phi))
    return np.array(rows)


def moment_basis(grid: VelocityGrid, degree: int) -> MomentBasis:
    """Normalized Legendre (slab) or real spherical harmonic (sphere) basis.

    The rows are re-orthonormalized against the discrete quadrature inner
    product, keeping the constant first row fixed.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if grid.domain == SLAB:
        M = _legendre_rows(degree, grid.points)
    elif grid.domain == SPHERE:
        M = real_spherical_harmonics(degree, grid.points)
    else:
        raise ValueError(f"unknown grid domain {grid.domain!r}")
    gram = (M * grid.weights) @ M.T
    deviation = np.max(np.abs(gram - np.eye(M.shape[0])))
    if deviation > 1e-6:
        raise BasisConditioningError(
            f"degree {degree} exceeds the exactness of the velocity grid (Gram deviation {deviation:.2e})"
        )
    if deviation > 1e-10:
        warnings.warn(f"moment basis Gram deviation {deviation:.2e} before re-orthonormalization")
    M, _ = mgs2(M, grid.weights, pinned_row=0)
    M.setflags(write=False)
    return MomentBasis(grid, degree, M)


def reconstruct_density(alpha, basis: MomentBasis) -> np.ndarray:
    """f = exp(alpha . m) at the quadrature points; alpha may be batched (T, n)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[-1] != basis.n:
        raise ValueError(f"expected {basis.n} multipliers, got {alpha.shape[-1]}")
    exponent = alpha @ basis.M
    if np.max(exponent) > EXP_LIMIT:
        raise ReconstructionOverflowError("closure exponent exceeds overflow guard")
    return np.exp(exponent)


def normalize_first_multiplier(alpha_rest, basis: MomentBasis):
    """First multiplier giving <m1 exp(alpha . m)> = 1 for the given higher ones."""
    alpha_rest = np.asarray(alpha_rest, dtype=np.float64)
    if alpha_rest.shape[-1] != basis.n - 1:
        raise ValueError(f"expected {basis.n - 1} higher multipliers, got {alpha_rest.shape[-1]}")
    exponent = alpha_rest @ basis.M[1:]
    if np.max(exponent, initial=-np.inf) > EXP_LIMIT:
        raise ReconstructionOverflowError("closure exponent exceeds overflow guard")
    log_bracket = logsumexp(exponent, b=basis.grid.weights, axis=-1)
    m1 = basis.m1
    return -(math.log(m1) + log_bracket) / m1


def full_multipliers(alpha_rest, basis: MomentBasis) -> np.ndarray:
    alpha_rest = np.asarray(alpha_rest, dtype=np.float64)
    a1 = np.asarray(normalize_first_multiplier(alpha_rest, basis))
    return np.concatenate([a1[..., None], alpha_rest], axis=-1)


def entropy(f, grid: VelocityGrid):
    """Maxwell-Boltzmann entropy sum_i w_i (f_i log f_i - f_i), batched over rows."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("entropy is defined for non-negative densities only")
    with np.errstate(divide="ignore", invalid="ignore"):
        flogf = np.where(f > 0, f * np.log(np.where(f > 0, f, 1.0)), 0.0)
    return (flogf - f) @ grid.weights


def dual_objective(alpha, u, basis: MomentBasis) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    exponent = alpha @ basis.M
    if np.max(exponent) > EXP_LIMIT:
        return math.inf
    return float(np.exp(exponent) @ basis.grid.weights - alpha @ u)


def solve_dual(u, basis: MomentBasis, tol: float = 1e-10, max_iter: int = 100, alpha0=None) -> np.ndarray:
    """Newton's method with backtracking for the convex closure dual problem.

    Returns the multipliers alpha with ||<m exp(alpha . m)> - u||_inf <= tol.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (basis.n,):
        raise ValueError(f"expected {basis.n} moments, got shape {u.shape}")
    if u[0] <= 0:
        raise RealizabilityError("first moment must be positive")
    M, w = basis.M, basis.grid.weights
    alpha = np.zeros(basis.n) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    obj = dual_objective(alpha, u, basis)
    for _ in range(max_iter):
        f = np.exp(alpha @ M)
        grad = M @ (w * f) - u
        if np.max(np.abs(grad)) <= tol:
            return alpha
        H = (M * (w * f)) @ M.T
        if np.linalg.cond(H) > 1e14:
            raise IllConditionedError("closure Hessian condition number exceeds 1e14")
        d = np.linalg.solve(H, -grad)
        slope = grad @ d
        # objective differences below rounding level cannot be resolved
        slack = 16 * np.finfo(float).eps * max(1.0, abs(obj))
        t = 1.0
        for _ in range(60):
            trial = alpha + t * d
            trial_obj = dual_objective(trial, u, basis)
            if trial_obj <= obj + 1e-4 * t * slope + slack:
                break
            t *= 0.5
        else:
            raise RealizabilityError("line search failed; moment vector may not be realizable")
        alpha, obj = trial, trial_obj
    f = np.exp(alpha @ M)
    if np.max(np.abs(M @ (w * f) - u)) <= tol:
        return alpha
    raise RealizabilityError(f"Newton did not converge in {max_iter} iterations")


@dataclass
class SamplerConfig:
    degree: int = 2
    sigma: float | tuple = 1.0
    entropy_threshold: float | None = None
    threshold_offset: float = 2.0
    sample_count: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("sigma must be positive")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]


def equilibrium_density(basis: MomentBasis) -> np.ndarray:
    return reconstruct_density(full_multipliers(np.zeros(basis.n - 1), basis), basis)


def sample_dataset(grid: VelocityGrid, basis: MomentBasis, matrix: CollisionMatrix,
                   config: SamplerConfig, exclude_equilibrium: bool = True,
                   chunk: int = 1024) -> Dataset:
    """Draw multipliers, reconstruct unit-mass densities, reject by entropy, label.

    Higher multipliers are Gaussian with zero mean (the equilibrium multipliers
    of the linear operator) and per-component standard deviation ``sigma``.
    """
    if matrix.grid is not grid and matrix.grid.spec() != grid.spec():
        raise ValueError("collision matrix grid does not match the sampling grid")
    n_rest = basis.n - 1
    sigma = np.broadcast_to(np.asarray(config.sigma, dtype=np.float64), (n_rest,))
    h_eq = float(entropy(equilibrium_density(basis), grid))
    c = config.entropy_threshold if config.entropy_threshold is not None else h_eq + config.threshold_offset
    rng = np.random.default_rng(config.seed)
    T = config.sample_count
    accepted, drawn, n_accepted = [], 0, 0
    seen_h = []
    while n_accepted < T:
        alpha_rest = rng.normal(size=(chunk, n_rest)) * sigma
        drawn += chunk
        alpha = full_multipliers(alpha_rest, basis)
        exponent = alpha @ basis.M
        ok = np.max(exponent, axis=1) <= EXP_LIMIT
        f = np.exp(np.where(ok[:, None], exponent, 0.0))
        h = entropy(f, grid)
        keep = ok & (h <= c)
        if exclude_equilibrium:
            q = apply_collision(matrix, f)
            keep &= np.linalg.norm(q, axis=1) >= 1e-13
        seen_h.append(h)
        accepted.append(f[keep])
        n_accepted += int(keep.sum())
        if n_accepted < T and drawn >= 10 * T and n_accepted < 0.01 * drawn:
            hs = np.concatenate(seen_h)
            qs = np.quantile(hs, [0.0, 0.1, 0.5, 0.9])
            raise ThresholdTooTightError(
                f"acceptance rate {n_accepted / drawn:.3%} below 1% for threshold c={c:.4f}; "
                f"entropy quantiles (0, 10, 50, 90%): {np.array2string(qs, precision=4)}"
            )
    inputs = np.concatenate(accepted)[:T]
    targets = apply_collision(matrix, inputs)
    log.info("sampled %d densities from %d draws (threshold %.4f)", T, drawn, c)
    metadata = {
        "grid": grid.spec(),
        "kernel": matrix.kernel.spec(),
        "basis_degree": basis.degree,
        "sigma": sigma.tolist(),
        "c": float(c),
        "T": T,
        "seed": config.seed,
        "draws": drawn,
    }
    return Dataset(inputs, targets, metadata)


def write_dataset(dataset: Dataset, path) -> list:
    """Write the CSV and its JSON sidecar; returns both paths."""
    path = Path(path)
    m = dataset.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f_{i + 1}" for i in range(m)] + [f"q_{i + 1}" for i in range(m)])
        for f, q in zip(dataset.inputs, dataset.targets):
            writer.writerow([repr(float(x)) for x in f] + [repr(float(x)) for x in q])
    meta_path = path.with_suffix(".json")
    meta_path.write_text(json.dumps(dataset.metadata, indent=1, sort_keys=True) + "\n")
    return [path, meta_path]


def read_dataset(path) -> Dataset:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    m = data.shape[1] // 2
    meta_path = path.with_suffix(".json")
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Dataset(data[:, :m].copy(), data[:, m:].copy(), metadata)
