"""DeepONet surrogates of the collision operator.

Five output constructions share one branch/trunk MLP pair:

* ``vanilla_no_bias``  -- sum_k beta_k tau_k
* ``vanilla_bias``     -- sum_k beta_k tau_k + b
* ``soft_constraint``  -- extended sum with a constant trunk row and a free
  coefficient; conservation is only encouraged by a penalty in the loss
* ``orthogonal``       -- trunk rows plus the collision invariant are
  orthonormalized under the quadrature inner product and the invariant's
  coefficient is pinned to zero (method I)
* ``bias_adaption``    -- constant trunk row whose coefficient is solved for
  so that the output integrates to zero (method II)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .collision import KernelSpec
from .quadrature import DimensionError, VelocityGrid, grid_from_spec

FORMAT_VERSION = 1


class Variant(str, Enum):
    VANILLA_NO_BIAS = "vanilla_no_bias"
    VANILLA_BIAS = "vanilla_bias"
    SOFT_CONSTRAINT = "soft_constraint"
    ORTHOGONAL = "orthogonal"
    BIAS_ADAPTION = "bias_adaption"

    @property
    def conservative(self) -> bool:
        return self in (Variant.ORTHOGONAL, Variant.BIAS_ADAPTION)

    @property
    def extended(self) -> bool:
        """Whether the trunk carries an extra (p+1)-th row."""
        return self in (Variant.SOFT_CONSTRAINT, Variant.ORTHOGONAL, Variant.BIAS_ADAPTION)


class DomainError(ValueError):
    pass


# standard architectures, (branch, trunk) per velocity domain
DEFAULT_WIDTHS = {
    "slab1d": ((100, 16, 16, 16), (1, 16, 16, 16)),
    "sphere": ((800, 100, 100, 16), (3, 100, 100, 16)),
}


@dataclass
class DeepONetModel:
    variant: Variant
    branch_widths: tuple
    trunk_widths: tuple
    grid: VelocityGrid
    params: dict
    kernel: KernelSpec | None = None
    phi: np.ndarray = field(default=None, repr=False)
    ortho_tol: float = 1e-10
    drop_degenerate: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.branch_widths = tuple(int(w) for w in self.branch_widths)
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        if self.phi is None:
            self.phi = np.ones(self.grid.size)

    @property
    def p(self) -> int:
        return self.trunk_widths[-1]

    @property
    def mass_scale(self) -> float:
        """Constant value of the first moment function, 1/sqrt(<1>)."""
        return 1.0 / math.sqrt(self.grid.measure)

    def param_names(self) -> list:
        return list(self.params)

    def n_params(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def copy(self) -> "DeepONetModel":
        return DeepONetModel(
            self.variant,
            self.branch_widths,
            self.trunk_widths,
            self.grid,
            {k: v.copy() for k, v in self.params.items()},
            self.kernel,
            self.phi.copy(),
            self.ortho_tol,
            self.drop_degenerate,
        )


def _glorot(rng, fan_in, fan_out, n_cols=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out if n_cols is None else n_cols))


def _init_mlp(rng, widths, prefix):
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}.W{i}"] = _glorot(rng, a, b)
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def build_model(variant, branch_widths, trunk_widths, grid: VelocityGrid, seed: int = 0,
                kernel: KernelSpec | None = None) -> DeepONetModel:
    """Create a model with Glorot-uniform weights and zero biases.

    ``branch_widths`` and ``trunk_widths`` list the layer widths from input to
    output; both outputs must equal p.  The soft-constraint variant gets one
    extra branch output, drawn from its own random stream so that every other
    parameter matches the remaining variants for the same seed.
    """
    variant = Variant(variant)
    branch_widths, trunk_widths = tuple(branch_widths), tuple(trunk_widths)
    if len(branch_widths) < 2 or len(trunk_widths) < 2 or min(branch_widths + trunk_widths) < 1:
        raise ValueError("each MLP needs at least two positive layer widths")
    if branch_widths[0] != grid.size:
        raise ValueError(f"branch input width {branch_widths[0]} != number of sensors {grid.size}")
    if trunk_widths[0] != grid.dim:
        raise ValueError(f"trunk input width {trunk_widths[0]} != velocity dimension {grid.dim}")
    if branch_widths[-1] != trunk_widths[-1]:
        raise ValueError("branch and trunk output widths differ")
    ss = np.random.SeedSequence(seed)
    rng_branch, rng_trunk, rng_extra = (np.random.default_rng(s) for s in ss.spawn(3))
    params = _init_mlp(rng_branch, branch_widths, "branch")
    params.update(_init_mlp(rng_trunk, trunk_widths, "trunk"))
    if variant is Variant.SOFT_CONSTRAINT:
        last = len(branch_widths) - 2
        W = params[f"branch.W{last}"]
        extra = _glorot(rng_extra, W.shape[0], W.shape[1], n_cols=1)
        params[f"branch.W{last}"] = np.hstack([W, extra])
        params[f"branch.b{last}"] = np.zeros(W.shape[1] + 1)
        branch_widths = branch_widths[:-1] + (branch_widths[-1] + 1,)
    if variant is Variant.VANILLA_BIAS:
        params["bias_b"] = np.zeros(1)
    return DeepONetModel(variant, branch_widths, trunk_widths, grid, params, kernel)


def _mlp(P, prefix, n_layers, x):
    h = x
    for i in range(n_layers):
        h = ad.add_row_bias(ad.matmul(h, P[f"{prefix}.W{i}"]), P[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def branch_net(model, F, P=None):
    P = _leaves(model) if P is None else P
    return _mlp(P, "branch", len(model.branch_widths) - 1, F)


def raw_trunk(model, points, P=None):
    """Trunk outputs as a (p, n_points) tensor."""
    P = _leaves(model) if P is None else P
    x = np.asarray(points, dtype=np.float64).reshape(-1, model.trunk_widths[0])
    return ad.transpose(_mlp(P, "trunk", len(model.trunk_widths) - 1, x))


def _leaves(model, requires_grad=False):
    return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in model.params.items()}


def _extend(model, tau):
    v = model.variant
    if v in (Variant.VANILLA_NO_BIAS, Variant.VANILLA_BIAS):
        return tau
    if v is Variant.ORTHOGONAL:
        ext = ad.concat([tau, model.phi[None, :]], axis=0)
        return ad.orthonormalize_weighted(ext, model.grid.weights, pinned_row=model.p,
                                          tol=model.ortho_tol, drop_degenerate=model.drop_degenerate)
    return ad.concat([tau, np.ones((1, model.grid.size))], axis=0)


def extended_trunk(model, P=None):
    """Trunk basis on the sensor points as used by the model's output sum.

    Vanilla variants: the p raw rows.  Soft constraint and method II: raw rows
    plus a constant row.  Method I: raw rows plus phi, orthonormalized with
    phi pinned as the last row.
    """
    return _extend(model, raw_trunk(model, model.grid.coords(), P))


def trunk_basis(model) -> np.ndarray:
    return extended_trunk(model).value


def forward_graph(model, F, P=None):
    """Differentiable forward pass; returns (outputs, trunk basis) tensors."""
    P = _leaves(model) if P is None else P
    F = ad.as_tensor(F)
    if F.value.ndim != 2 or F.shape[1] != model.grid.size:
        raise DimensionError(f"expected a (T, {model.grid.size}) batch, got {F.shape}")
    beta = branch_net(model, F, P)
    raw = raw_trunk(model, model.grid.coords(), P)
    tau = _extend(model, raw)
    v = model.variant
    if v is Variant.VANILLA_BIAS:
        out = ad.add_scalar(ad.matmul(beta, tau), P["bias_b"])
    elif v is Variant.ORTHOGONAL:
        # coefficient of the phi row is fixed to zero
        pinned = np.zeros((F.shape[0], 1))
        out = ad.matmul(ad.concat([beta, pinned], axis=1), tau)
    elif v is Variant.BIAS_ADAPTION:
        w_phi = (model.grid.weights * model.phi)[:, None]
        coupling = ad.scale(ad.matmul(raw, w_phi), -1.0 / float(np.sum(w_phi)))
        beta_last = ad.matmul(beta, coupling)
        out = ad.matmul(ad.concat([beta, beta_last], axis=1), tau)
    else:
        out = ad.matmul(beta, tau)
    return out, tau


def forward(model, F) -> np.ndarray:
    """Predicted Q values at the sensor points for a (T, m) or (m,) input."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 1
    out, _ = forward_graph(model, np.atleast_2d(F))
    return out.value[0] if single else out.value


def collision_invariance_error(model, F):
    """|<phi Q_theta(f)>| per input row."""
    out = forward(model, F)
    return np.abs(out @ (model.grid.weights * model.phi))


def infer(model, F, zero_tol: float = 1e-14) -> np.ndarray:
    """Mass-rescaled, zero-safe evaluation used inside solvers.

    Inputs are rescaled to the unit first moment the model was trained on and
    the output is scaled back, so infer(c f) = c infer(f) for c > 0.  Inputs
    whose mass is at most ``zero_tol * m`` map to zero.
    """
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 1
    F = np.atleast_2d(F)
    if F.shape[1] != model.grid.size:
        raise DimensionError(f"expected trailing length {model.grid.size}, got {F.shape[1]}")
    if np.any(F < -1e-12):
        raise DomainError("collision surrogate requires non-negative input densities")
    mass = F @ model.grid.weights
    out = np.zeros_like(F)
    live = mass > zero_tol * model.grid.size
    if np.any(live):
        scale = model.mass_scale * mass[live]
        out[live] = scale[:, None] * forward(model, F[live] / scale[:, None])
    return out[0] if single else out


def evaluate_basis(model, points) -> np.ndarray:
    """Trunk basis evaluated at arbitrary velocity points, shape (rows, n).

    For method I the orthonormalization is defined on the sensor grid; the
    same linear recombination of raw rows and phi is applied at ``points``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.reshape(-1, model.trunk_widths[0]).shape[0]
    raw = raw_trunk(model, points).value
    v = model.variant
    if v in (Variant.VANILLA_NO_BIAS, Variant.VANILLA_BIAS):
        return raw
    ext = np.vstack([raw, np.ones((1, n))])
    if v is not Variant.ORTHOGONAL:
        return ext
    grid_raw = raw_trunk(model, model.grid.coords()).value
    grid_ext = np.vstack([grid_raw, model.phi[None, :]])
    _, tape = ad.mgs2(grid_ext, model.grid.weights, model.p, model.ortho_tol, record=True,
                      drop_degenerate=model.drop_degenerate)
    # replay the sensor-grid Gram-Schmidt steps on the dense rows; phi is the
    # constant one, so its dense counterpart is the ones row of ext
    for entry in tape:
        if len(entry) == 1:
            ext[entry[0]] = 0.0
        elif len(entry) == 2:
            k, norm = entry
            ext[k] /= norm
        else:
            j, k, r, _ = entry
            ext[k] -= r * ext[j]
    return ext


def to_dict(model) -> dict:
    def mlp(prefix, widths):
        n = len(widths) - 1
        return {
            "widths": list(widths),
            "weights": [model.params[f"{prefix}.W{i}"].ravel().tolist() for i in range(n)],
            "biases": [model.params[f"{prefix}.b{i}"].tolist() for i in range(n)],
        }

    doc = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant.value,
        "p": model.p,
        "grid": model.grid.spec(),
        "kernel": None if model.kernel is None else model.kernel.spec(),
        "branch": mlp("branch", model.branch_widths),
        "trunk": mlp("trunk", model.trunk_widths),
    }
    if "bias_b" in model.params:
        doc["bias_b"] = float(model.params["bias_b"][0])
    return doc


def from_dict(doc: dict) -> DeepONetModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    grid = grid_from_spec(doc["grid"])
    kernel = None
    if doc.get("kernel") is not None:
        k = doc["kernel"]
        kernel = KernelSpec(k["kind"], k["g"], k.get("L"))
    params = {}
    for prefix in ("branch", "trunk"):
        widths = doc[prefix]["widths"]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"{prefix}.W{i}"] = np.array(doc[prefix]["weights"][i], dtype=np.float64).reshape(a, b)
            params[f"{prefix}.b{i}"] = np.array(doc[prefix]["biases"][i], dtype=np.float64)
    if "bias_b" in doc:
        params["bias_b"] = np.array([doc["bias_b"]], dtype=np.float64)
    model = DeepONetModel(doc["variant"], doc["branch"]["widths"], doc["trunk"]["widths"], grid, params, kernel)
    if model.p != doc["p"]:
        raise ValueError("checkpoint p does not match trunk output width")
    return model


def dumps_checkpoint(model) -> str:
    return json.dumps(to_dict(model), indent=1) + "\n"


def save_checkpoint(model, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path) -> DeepONetModel:
    with open(path) as fh:
        return from_dict(json.load(fh))
