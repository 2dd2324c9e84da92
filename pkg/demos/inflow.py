"""Slab inflow: particles enter at x = 0 with mu > 0 into a scattering medium.

Runs the exact operator and prints the scalar flux profile together with the
global balance: mass change equals inflow minus outflow step by step.
"""

import numpy as np

from kinetic_deeponet.collision import KernelSpec, assemble_collision_matrix
from kinetic_deeponet.quadrature import gauss_legendre_slab
from kinetic_deeponet.solver import scalar_flux, slab_inflow_problem, solve_slab


def main():
    grid = gauss_legendre_slab(100)
    A = assemble_collision_matrix(grid, KernelSpec("henyey_greenstein", 0.9))
    problem = slab_inflow_problem(grid, n_x=100, t_final=0.7)
    state, trace, ledger, stats = solve_slab(problem, A)
    q = scalar_flux(state, grid)
    x = problem.centers()[0]
    print(f"{stats['n_steps']} steps of dt = {stats['dt']:.2e}")
    for i in range(0, 100, 10):
        print(f"x = {x[i]:.3f}  flux = {q[i]:.4f}  " + "#" * int(60 * q[i] / q.max()))
    tot = ledger.totals()
    print(f"mass {trace.masses[-1]:.6f}, inflow {tot['inflow']:.6f}, outflow {tot['outflow']:.6f}")
    print(f"worst per-step balance residual {ledger.relative_residual():.1e}")
    assert np.all(q >= 0)


if __name__ == "__main__":
    main()
