"""Two-dimensional lattice: a source square surrounded by absorbers.

Solves the checkerboard problem with the exact isotropic operator on a 4x8
sphere grid and prints log10 of the scalar flux as a coarse character map
(one character per unit square, darker is larger).
"""

import numpy as np

from kinetic_deeponet.collision import KernelSpec, assemble_collision_matrix
from kinetic_deeponet.quadrature import tensorized_sphere_grid
from kinetic_deeponet.solver import lattice_problem, solve_lattice

SHADES = " .:-=+*#%@"


def main(n_cells=28, t_final=1.0):
    grid = tensorized_sphere_grid(4, 8)
    A = assemble_collision_matrix(grid, KernelSpec())
    problem = lattice_problem(grid, n_cells=n_cells, t_final=t_final)
    _, q, _, ledger, stats = solve_lattice(problem, A)
    k = n_cells // 7
    blocks = q.reshape(7, k, 7, k).mean(axis=(1, 3))
    logq = np.log10(np.maximum(blocks, 1e-12))
    lo, hi = logq.min(), logq.max()
    print(f"{stats['n_steps']} steps, balance residual {ledger.relative_residual():.1e}")
    print(f"log10 flux from {lo:.1f} to {hi:.1f}; y upwards")
    for j in reversed(range(7)):
        row = "".join(SHADES[int((len(SHADES) - 1) * (logq[i, j] - lo) / (hi - lo))] * 2 for i in range(7))
        print("|" + row + "|")


if __name__ == "__main__":
    main()
