"""Space-homogeneous relaxation d_t f = Q(f).

The exact quadrature operator conserves mass and lowers the entropy towards
the constant equilibrium.  A briefly trained method II surrogate keeps the
mass to roundoff as well, while the vanilla network drifts.  Entropy decay
is not built into either network, so after this short training neither
surrogate need lower the entropy monotonically.
"""

import numpy as np

from kinetic_deeponet.collision import KernelSpec, assemble_collision_matrix
from kinetic_deeponet.deeponet import build_model
from kinetic_deeponet.entropy import SamplerConfig, moment_basis, sample_dataset
from kinetic_deeponet.quadrature import gauss_legendre_slab
from kinetic_deeponet.solver import ExactBackend, SurrogateBackend, relax_homogeneous
from kinetic_deeponet.training import TrainConfig, train


def main():
    grid = gauss_legendre_slab(100)
    kernel = KernelSpec("henyey_greenstein", 0.9)
    A = assemble_collision_matrix(grid, kernel)
    basis = moment_basis(grid, 2)
    data = sample_dataset(grid, basis, A, SamplerConfig(sample_count=500, seed=1))
    f0 = sample_dataset(grid, basis, A, SamplerConfig(sample_count=1, seed=7)).inputs[0]
    exact = ExactBackend(A)
    dt = 0.5 / exact.rate_bound
    backends = [("exact", exact)]
    for v in ("vanilla_no_bias", "bias_adaption"):
        model = build_model(v, (100, 16, 16, 8), (1, 16, 16, 8), grid, seed=0, kernel=kernel)
        best, _ = train(model, data, TrainConfig(epochs=300, log_every=0))
        backends.append((v, SurrogateBackend(best)))
    print(f"dt = {dt:.4f}, 50 steps")
    for name, backend in backends:
        traj, trace, ent = relax_homogeneous(backend, f0, 50, dt)
        monotone = bool(np.all(np.diff(ent) <= 1e-12))
        print(f"{name:<16} max mass drift {trace.relative_drift().max():.2e}  "
              f"entropy {ent[0]:+.4f} -> {ent[-1]:+.4f}  non-increasing: {monotone}")


if __name__ == "__main__":
    main()
