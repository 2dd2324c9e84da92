"""Hybrid finite-volume transport solver with a pluggable collision backend.

Solves  d_t f + v . grad_x f = sigma_s Q(f) - sigma_a f + p  with first-order
upwind fluxes and the two-stage SSP Runge-Kutta scheme.  The advection part is
shared by every backend; only the per-cell velocity-space collision term
changes between the exact matrix and a DeepONet surrogate.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .collision import CollisionMatrix, apply_collision, assemble_collision_matrix
from .deeponet import DeepONetModel, infer
from .entropy import entropy
from .quadrature import SLAB, SPHERE, VelocityGrid


class BlowUpError(FloatingPointError):
    pass


class CFLError(ValueError):
    pass


# ---------------------------------------------------------------- backends


class ExactBackend:
    """Quadrature collision operator Q f = A f."""

    name = "exact"

    def __init__(self, matrix: CollisionMatrix):
        self.matrix = matrix
        self.grid = matrix.grid
        self.rate_bound = float(np.max(np.sum(np.abs(matrix.A), axis=1)))

    def apply(self, F):
        return apply_collision(self.matrix, F)


class SurrogateBackend:
    """DeepONet surrogate evaluated through the rescaled, zero-safe ``infer``.

    Slightly negative states (possible with a surrogate, which does not
    guarantee the invariant range) are clipped to zero before evaluation;
    the most negative value seen is kept in ``min_input``.
    """

    def __init__(self, model: DeepONetModel, rate_bound: float | None = None):
        self.model = model
        self.grid = model.grid
        self.name = f"surrogate:{model.variant.value}"
        self.min_input = 0.0
        if rate_bound is None:
            # stability bound borrowed from the quadrature operator of the same kernel
            if model.kernel is None:
                raise ValueError("surrogate without a kernel spec needs an explicit rate_bound")
            A = assemble_collision_matrix(model.grid, model.kernel).A
            rate_bound = float(np.max(np.sum(np.abs(A), axis=1)))
        self.rate_bound = rate_bound

    def apply(self, F):
        F = np.asarray(F, dtype=np.float64)
        lowest = float(F.min()) if F.size else 0.0
        if lowest < 0.0:
            self.min_input = min(self.min_input, lowest)
            F = np.maximum(F, 0.0)
        return infer(self.model, F)


def make_backend(operator) -> ExactBackend | SurrogateBackend:
    if isinstance(operator, (ExactBackend, SurrogateBackend)):
        return operator
    if isinstance(operator, CollisionMatrix):
        return ExactBackend(operator)
    if isinstance(operator, DeepONetModel):
        return SurrogateBackend(operator)
    raise TypeError(f"cannot build a collision backend from {type(operator).__name__}")


# ------------------------------------------------------------ bookkeeping


@dataclass
class MassTrace:
    times: list = field(default_factory=list)
    masses: list = field(default_factory=list)

    def record(self, t: float, q: float) -> None:
        if self.times and t < self.times[-1]:
            raise ValueError("mass trace times must be non-decreasing")
        self.times.append(float(t))
        self.masses.append(float(q))

    def relative_drift(self) -> np.ndarray:
        q = np.asarray(self.masses)
        return np.abs(q - q[0]) / abs(q[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "q"])
            for t, q in zip(self.times, self.masses):
                w.writerow([repr(t), repr(q)])


LEDGER_COLUMNS = ("t", "mass_change", "inflow", "outflow", "absorption", "source", "collision", "residual")


@dataclass
class BalanceLedger:
    """Per-step global balance.

    residual = mass_change - (inflow - outflow - absorption + source); the
    collision column is the mass the collision term created, zero for a
    conservative operator.
    """

    rows: list = field(default_factory=list)

    def totals(self) -> dict:
        arr = np.array([r[1:] for r in self.rows]) if self.rows else np.zeros((0, 7))
        return dict(zip(LEDGER_COLUMNS[1:], arr.sum(axis=0).tolist() if len(arr) else [0.0] * 7))

    def relative_residual(self) -> float:
        """Largest per-step |residual| relative to the step's mass scale."""
        worst = 0.0
        for _, dm, a, b, c, d, _, r in self.rows:
            scale = max(abs(dm), abs(a), abs(b), abs(c), abs(d), 1e-300)
            worst = max(worst, abs(r) / scale)
        return worst

    def run_relative_residual(self, final_mass: float) -> float:
        tot = self.totals()
        scale = max(abs(final_mass), tot["inflow"] + tot["outflow"] + tot["absorption"] + tot["source"], 1e-300)
        return abs(tot["residual"]) / scale

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for row in self.rows:
                w.writerow([repr(float(x)) for x in row])


@dataclass
class FieldState:
    t: float
    f: np.ndarray  # (n_cells, m)
    cell_shape: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.f)):
            raise BlowUpError(f"non-finite state at t={self.t}")


# ----------------------------------------------------------------- problem


@dataclass
class KineticProblem:
    """Geometry, materials and boundary data on a 1D or 2D cell grid.

    ``bounds`` is ((x_lo, x_hi),) or ((x_lo, x_hi), (y_lo, y_hi)); ``shape``
    the matching cell counts.  Cross sections and source are per-cell arrays
    in C order.  ``boundary`` maps a side ("left", "right", "bottom", "top")
    to a function of the velocity coordinates returning the incoming values;
    missing sides are Dirichlet zero.
    """

    grid: VelocityGrid
    bounds: tuple
    shape: tuple
    sigma_a: np.ndarray
    sigma_s: np.ndarray
    source: np.ndarray
    boundary: dict = field(default_factory=dict)
    cfl: float = 0.4
    t_final: float = 1.0
    initial: np.ndarray | None = None

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.bounds = tuple(tuple(float(b) for b in pair) for pair in self.bounds)
        if len(self.shape) not in (1, 2) or len(self.bounds) != len(self.shape):
            raise ValueError("bounds and shape must describe a 1D or 2D grid")
        if any(n < 1 for n in self.shape) or any(hi <= lo for lo, hi in self.bounds):
            raise ValueError("empty spatial grid")
        if not 0.0 < self.cfl <= 1.0:
            raise CFLError(f"CFL number {self.cfl} outside (0, 1]")
        if self.t_final < 0:
            raise ValueError("t_final must be non-negative")
        n = self.n_cells
        for name in ("sigma_a", "sigma_s", "source"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=np.float64), (n,)).copy()
            if np.any(arr < 0):
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, arr)
        if len(self.shape) == 2 and self.grid.domain != SPHERE:
            raise ValueError("2D problems need a sphere velocity grid")
        if len(self.shape) == 1 and self.grid.domain != SLAB:
            raise ValueError("1D problems need a slab velocity grid")

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.bounds, self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def centers(self) -> list:
        return [lo + (np.arange(n) + 0.5) * h for (lo, hi), n, h in zip(self.bounds, self.shape, self.spacing)]

    def speeds(self) -> np.ndarray:
        """Advection speeds per velocity point, one column per spatial axis."""
        c = self.grid.coords()
        return c[:, : len(self.shape)]

    def ghost(self, side: str) -> np.ndarray:
        fn = self.boundary.get(side)
        if fn is None:
            return np.zeros(self.grid.size)
        return np.broadcast_to(np.asarray(fn(self.grid.coords()), dtype=np.float64), (self.grid.size,))

    def max_step(self, rate_bound: float) -> float:
        """dt <= CFL / (sigma_s,max |A|_inf + sigma_a,max + sum_d max|v_d| / dx_d)."""
        v = np.abs(self.speeds())
        transport = float(np.max(sum(v[:, d] / h for d, h in enumerate(self.spacing))))
        rate = float(self.sigma_s.max()) * rate_bound + float(self.sigma_a.max()) + transport
        return self.cfl / rate if rate > 0 else math.inf


def slab_inflow_problem(grid: VelocityGrid, n_x: int = 100, length: float = 1.0, sigma_s: float = 1.0,
                        sigma_a: float = 0.0, inflow: float = 0.5, cfl: float = 0.4,
                        t_final: float = 0.7) -> KineticProblem:
    """Anisotropic inflow at the left boundary for mu > 0, zero initial state."""
    return KineticProblem(
        grid=grid,
        bounds=((0.0, length),),
        shape=(n_x,),
        sigma_a=sigma_a,
        sigma_s=sigma_s,
        source=0.0,
        boundary={"left": lambda c: np.where(c[:, 0] > 0, inflow, 0.0)},
        cfl=cfl,
        t_final=t_final,
    )


# lower-left corners of the absorbing unit squares on the 7x7 lattice
LATTICE_ABSORBERS = ((1, 1), (1, 3), (1, 5), (2, 2), (2, 4), (3, 1), (4, 2), (4, 4), (5, 1), (5, 3), (5, 5))
LATTICE_SOURCE = (3, 3)
LATTICE_MATERIALS = {
    "white": (0.0, 1.0, 0.0),
    "blue": (10.0, 0.0, 0.0),
    "red": (0.0, 1.0, 1.0),
}


def lattice_geometry() -> list:
    """Default rectangles (x0, y0, x1, y1, sigma_a, sigma_s, p) on [0, 7]^2."""
    rects = [(0.0, 0.0, 7.0, 7.0) + LATTICE_MATERIALS["white"]]
    rects += [(x, y, x + 1.0, y + 1.0) + LATTICE_MATERIALS["blue"] for x, y in LATTICE_ABSORBERS]
    x, y = LATTICE_SOURCE
    rects.append((x, y, x + 1.0, y + 1.0) + LATTICE_MATERIALS["red"])
    return [tuple(float(v) for v in r) for r in rects]


def rasterize(rects, bounds, shape):
    """Per-cell (sigma_a, sigma_s, p) from rectangles; later entries win."""
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    nx, ny = shape
    xc = x_lo + (np.arange(nx) + 0.5) * (x_hi - x_lo) / nx
    yc = y_lo + (np.arange(ny) + 0.5) * (y_hi - y_lo) / ny
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    out = np.zeros((3, nx, ny))
    for x0, y0, x1, y1, sa, ss, p in rects:
        inside = (X >= x0) & (X < x1) & (Y >= y0) & (Y < y1)
        out[:, inside] = np.array([sa, ss, p])[:, None]
    return out.reshape(3, -1)


def lattice_problem(grid: VelocityGrid, n_cells: int = 40, geometry=None, cfl: float = 0.4,
                    t_final: float = 1.0) -> KineticProblem:
    bounds = ((0.0, 7.0), (0.0, 7.0))
    shape = (n_cells, n_cells)
    sa, ss, p = rasterize(geometry if geometry is not None else lattice_geometry(), bounds, shape)
    return KineticProblem(grid, bounds, shape, sa, ss, p, cfl=cfl, t_final=t_final)


# ------------------------------------------------------------- transport


def _axis_fluxes(f, v, ghost_lo, ghost_hi, axis):
    """Upwind interface fluxes along ``axis`` of a (..., m) cell array.

    Returns an array one longer than f along ``axis``.
    """
    lo = np.expand_dims(np.broadcast_to(ghost_lo, f.shape[:axis] + f.shape[axis + 1:]), axis)
    hi = np.expand_dims(np.broadcast_to(ghost_hi, f.shape[:axis] + f.shape[axis + 1:]), axis)
    padded = np.concatenate([lo, f, hi], axis=axis)
    n = padded.shape[axis]
    left = np.take(padded, np.arange(n - 1), axis=axis)
    right = np.take(padded, np.arange(1, n), axis=axis)
    return np.maximum(v, 0.0) * left + np.minimum(v, 0.0) * right


class _Transport:
    """Precomputed pieces of the semi-discrete right-hand side."""

    SIDES = (("left", "right"), ("bottom", "top"))

    def __init__(self, problem: KineticProblem, backend):
        self.problem = problem
        self.backend = backend
        self.w = problem.grid.weights
        self.v = problem.speeds()
        self.h = problem.spacing
        self.ghosts = [(problem.ghost(lo), problem.ghost(hi)) for lo, hi in self.SIDES[: len(problem.shape)]]
        self.scatter = np.flatnonzero(problem.sigma_s > 0)
        self.collision_evals = 0

    def rhs(self, f):
        """Return d_t f and this stage's balance terms (rates)."""
        p = self.problem
        shaped = f.reshape(p.shape + (f.shape[-1],))
        div = np.zeros_like(shaped)
        inflow = outflow = 0.0
        for d, (g_lo, g_hi) in enumerate(self.ghosts):
            F = _axis_fluxes(shaped, self.v[:, d], g_lo, g_hi, axis=d)
            n = F.shape[d]
            div += (np.take(F, np.arange(1, n), axis=d) - np.take(F, np.arange(n - 1), axis=d)) / self.h[d]
            # face area = cell volume / spacing along the normal
            area = p.cell_volume / self.h[d]
            lo_flux = np.take(F, 0, axis=d) @ self.w * area
            hi_flux = np.take(F, n - 1, axis=d) @ self.w * area
            inflow += float(np.sum(np.maximum(lo_flux, 0.0)) - np.sum(np.minimum(hi_flux, 0.0)))
            outflow += float(np.sum(np.maximum(hi_flux, 0.0)) - np.sum(np.minimum(lo_flux, 0.0)))
        out = -div.reshape(f.shape)
        coll = np.zeros_like(f)
        if self.scatter.size:
            coll[self.scatter] = p.sigma_s[self.scatter, None] * self.backend.apply(f[self.scatter])
            self.collision_evals += 1
        out += coll - p.sigma_a[:, None] * f + p.source[:, None]
        vol = p.cell_volume
        terms = {
            "inflow": inflow,
            "outflow": outflow,
            "absorption": float(p.sigma_a @ (f @ self.w)) * vol,
            "source": float(p.source.sum() * self.w.sum()) * vol,
            "collision": float(np.sum(coll @ self.w)) * vol,
        }
        return out, terms


def total_mass(problem: KineticProblem, f) -> float:
    return float(np.sum(f @ problem.grid.weights)) * problem.cell_volume


def _run(problem: KineticProblem, backend, dt=None, trace_every: int = 1):
    backend = make_backend(backend)
    if backend.grid.spec() != problem.grid.spec():
        raise ValueError("backend velocity grid does not match the problem grid")
    bound = problem.max_step(backend.rate_bound)
    if dt is None:
        n_t = max(1, math.ceil(problem.t_final / bound - 1e-12)) if problem.t_final > 0 else 0
        dt = problem.t_final / n_t if n_t else 0.0
    else:
        if dt > bound * (1 + 1e-12):
            raise CFLError(f"time step {dt:.4g} exceeds the stability bound {bound:.4g}")
        n_t = math.ceil(problem.t_final / dt - 1e-12)
    m = problem.grid.size
    f = np.zeros((problem.n_cells, m)) if problem.initial is None else np.array(problem.initial, dtype=np.float64).reshape(problem.n_cells, m)
    tr = _Transport(problem, backend)
    trace, ledger = MassTrace(), BalanceLedger()
    t = 0.0
    q = total_mass(problem, f)
    trace.record(t, q)
    started = time.perf_counter()
    for step in range(n_t):
        h = min(dt, problem.t_final - t) if step == n_t - 1 else dt
        k1, a = tr.rhs(f)
        f1 = f + h * k1
        k2, b = tr.rhs(f1)
        f_new = 0.5 * f + 0.5 * (f1 + h * k2)
        if not np.all(np.isfinite(f_new)):
            raise BlowUpError(f"non-finite state at step {step + 1}")
        q_new = total_mass(problem, f_new)
        avg = {k: 0.5 * h * (a[k] + b[k]) for k in a}
        dm = q_new - q
        res = dm - (avg["inflow"] - avg["outflow"] - avg["absorption"] + avg["source"])
        t += h
        ledger.rows.append((t, dm, avg["inflow"], avg["outflow"], avg["absorption"], avg["source"], avg["collision"], res))
        f, q = f_new, q_new
        if (step + 1) % trace_every == 0 or step == n_t - 1:
            trace.record(t, q)
    elapsed = time.perf_counter() - started
    stats = {
        "backend": backend.name,
        "dt": dt,
        "n_steps": n_t,
        "wall_time": elapsed,
        "iterations_per_second": n_t / elapsed if elapsed > 0 else math.inf,
        "min_value": float(f.min()) if f.size else 0.0,
    }
    return FieldState(t, f, problem.shape), trace, ledger, stats


def solve_slab(problem: KineticProblem, backend, dt=None):
    """Run the 1D problem to t_final; returns (state, trace, ledger, stats)."""
    if len(problem.shape) != 1:
        raise ValueError("solve_slab needs a 1D problem")
    return _run(problem, backend, dt)


def solve_lattice(problem: KineticProblem, backend, dt=None):
    """Run the 2D problem; returns (state, scalar flux (nx, ny), trace, ledger, stats)."""
    if len(problem.shape) != 2:
        raise ValueError("solve_lattice needs a 2D problem")
    state, trace, ledger, stats = _run(problem, backend, dt)
    return state, scalar_flux(state, problem.grid).reshape(problem.shape), trace, ledger, stats


def scalar_flux(state: FieldState, grid: VelocityGrid) -> np.ndarray:
    """Velocity integral <f> in every cell."""
    return state.f @ grid.weights


def write_field_csv(path, problem: KineticProblem, state: FieldState, per_velocity: bool = False) -> None:
    centers = problem.centers()
    coords = np.stack([c.ravel() for c in np.meshgrid(*centers, indexing="ij")], axis=1)
    names = ["x", "y"][: len(centers)]
    q = scalar_flux(state, problem.grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = names + ["scalar_flux"]
        if per_velocity:
            header += [f"f_{j + 1}" for j in range(problem.grid.size)]
        w.writerow(header)
        for i in range(problem.n_cells):
            row = [repr(float(x)) for x in coords[i]] + [repr(float(q[i]))]
            if per_velocity:
                row += [repr(float(x)) for x in state.f[i]]
            w.writerow(row)


# ------------------------------------------------------------ relaxation


def relax_homogeneous(backend, f0, n_t: int, dt: float):
    """SSP-RK2 integration of d_t f = Q(f) for a single velocity density.

    Returns the (n_t + 1, m) trajectory, the mass trace and the entropy of
    every stored state.
    """
    backend = make_backend(backend)
    f = np.asarray(f0, dtype=np.float64).copy()
    if f.shape != (backend.grid.size,):
        raise ValueError(f"initial density must have length {backend.grid.size}")
    if np.any(f < -1e-12):
        raise ValueError("initial density must be non-negative")
    if dt * backend.rate_bound > 1.0 + 1e-12:
        raise CFLError(f"dt={dt} exceeds the explicit stability limit {1.0 / backend.rate_bound:.4g}")
    w = backend.grid.weights
    traj = [f.copy()]
    trace = MassTrace()
    trace.record(0.0, float(f @ w))
    for step in range(n_t):
        f1 = f + dt * backend.apply(f[None, :])[0]
        f = 0.5 * f + 0.5 * (f1 + dt * backend.apply(f1[None, :])[0])
        if not np.all(np.isfinite(f)):
            raise BlowUpError(f"non-finite density at step {step + 1}")
        traj.append(f.copy())
        trace.record((step + 1) * dt, float(f @ w))
    traj = np.array(traj)
    ent = [float(entropy(np.maximum(x, 0.0), backend.grid)) for x in traj]
    return traj, trace, ent
