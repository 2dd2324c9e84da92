"""Method I trunk basis on a dense velocity grid.

The orthonormalization is carried out on the 100 sensor points; replaying
the same Gram-Schmidt coefficients on raw trunk rows anywhere in [-1, 1]
gives smooth basis functions whose sensor restriction is orthonormal.
"""

import numpy as np

from kinetic_deeponet.deeponet import build_model, evaluate_basis
from kinetic_deeponet.quadrature import gauss_legendre_slab


def main():
    grid = gauss_legendre_slab(100)
    model = build_model("orthogonal", (100, 16, 16, 8), (1, 16, 16, 8), grid, seed=0)
    on_grid = evaluate_basis(model, grid.points)
    gram = (on_grid * grid.weights) @ on_grid.T
    live = np.abs(np.diag(gram)) > 0.5
    dev = np.max(np.abs(gram[np.ix_(live, live)] - np.eye(live.sum())))
    print(f"{live.sum()} of {len(live)} rows live, Gram deviation on sensors {dev:.1e}")
    mu = np.linspace(-1, 1, 9)
    dense = evaluate_basis(model, mu)
    print("mu      " + " ".join(f"tau_{k + 1:<4}" for k in range(dense.shape[0])))
    for i, m in enumerate(mu):
        print(f"{m:+.2f}  " + " ".join(f"{v:+.3f}" for v in dense[:, i]))


if __name__ == "__main__":
    main()
