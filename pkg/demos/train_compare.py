"""Train all five variants on the slab Henyey-Greenstein (g = 0.9) operator.

Desk-sized run (a couple of minutes on one core): 2000 training densities
from the entropy closure sampler, 2000 Adam epochs, p = 8.  Prints the
relative L2 error on held-out densities next to the mean invariance error.
Pass a larger epoch count as the first argument for a longer run.
"""

import sys

from kinetic_deeponet.collision import KernelSpec, assemble_collision_matrix
from kinetic_deeponet.deeponet import Variant, build_model
from kinetic_deeponet.entropy import SamplerConfig, moment_basis, sample_dataset
from kinetic_deeponet.quadrature import gauss_legendre_slab
from kinetic_deeponet.training import TrainConfig, evaluate, train


def main(epochs=2000):
    grid = gauss_legendre_slab(100)
    kernel = KernelSpec("henyey_greenstein", 0.9)
    A = assemble_collision_matrix(grid, kernel)
    basis = moment_basis(grid, 2)
    train_set = sample_dataset(grid, basis, A, SamplerConfig(sample_count=2000, seed=1))
    test_set = sample_dataset(grid, basis, A, SamplerConfig(sample_count=1000, seed=2))
    print(f"{'variant':<18}{'rel. L2 error':>15}{'mean |<Q f>|':>15}")
    for v in Variant:
        model = build_model(v, (100, 16, 16, 8), (1, 16, 16, 8), grid, seed=0, kernel=kernel)
        best, _ = train(model, train_set, TrainConfig(epochs=epochs, log_every=0))
        m = evaluate(best, test_set)
        print(f"{v.value:<18}{m['rel_l2_error']:>15.4f}{m['invariance_error_mean']:>15.3e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2000)
