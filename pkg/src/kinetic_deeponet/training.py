"""Full-batch Adam training and the accuracy/conservation metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .deeponet import Variant, forward, forward_graph, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


class TrainingAbortedError(RuntimeError):
    """Training stopped early; ``best_model`` holds the last good snapshot."""

    def __init__(self, message, best_model=None, history=None):
        super().__init__(message)
        self.best_model = best_model
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 10000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    penalty_weight: float = 0.1
    seed: int = 0
    checkpoint_path: str | None = None
    log_every: int = 1000

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0 or self.penalty_weight < 0:
            raise ValueError("learning rate and penalty weight must be non-negative")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    invariance_error: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    trunk_row_norms: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.loss)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,invariance_error\n")
            for i, (l, e) in enumerate(zip(self.loss, self.invariance_error)):
                fh.write(f"{i + 1},{l!r},{e!r}\n")


def _mse(out, targets):
    diff = ad.sub(out, targets)
    return ad.scale(ad.tsum(ad.hadamard(diff, diff)), 1.0 / out.shape[0])


def mse_loss(model, inputs, targets, P=None) -> ad.Tensor:
    """Mean over samples of the squared Euclidean error over sensor points."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape:
        raise ValueError(f"inputs {inputs.shape} and targets {targets.shape} differ in shape")
    out, _ = forward_graph(model, inputs, P)
    return _mse(out, targets)


def orthogonality_penalty(tau, weights) -> ad.Tensor:
    """sum over ordered pairs k1 != k2 of |<tau_k1 tau_k2>|."""
    gram = ad.weighted_gram(tau, weights)
    off = 1.0 - np.eye(gram.shape[0])
    return ad.tsum(ad.hadamard(ad.absolute(gram), off))


def soft_constraint_loss(model, inputs, targets, penalty_weight: float = 0.1, P=None) -> ad.Tensor:
    if model.variant is not Variant.SOFT_CONSTRAINT:
        raise ValueError("soft-constraint loss requires the soft_constraint variant")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape:
        raise ValueError(f"inputs {inputs.shape} and targets {targets.shape} differ in shape")
    out, tau = forward_graph(model, inputs, P)
    penalty = orthogonality_penalty(tau, model.grid.weights)
    return ad.add(_mse(out, targets), ad.scale(penalty, penalty_weight))


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: dict, grads: dict, state: Adam) -> None:
    state.step(params, grads)


def _loss_graph(model, inputs, targets, config, P):
    out, tau = forward_graph(model, inputs, P)
    loss = _mse(out, targets)
    penalty = None
    if model.variant is Variant.SOFT_CONSTRAINT:
        penalty = orthogonality_penalty(tau, model.grid.weights)
        loss = ad.add(loss, ad.scale(penalty, config.penalty_weight))
    return loss, out, tau, penalty


def train(model, dataset, config: TrainConfig):
    """Full-batch Adam; returns the lowest-loss snapshot and the history.

    The input model is not modified.
    """
    if dataset.inputs.shape[1] != model.grid.size:
        raise ValueError("dataset sensor count does not match the model grid")
    if dataset.metadata.get("grid") not in (None, model.grid.spec()):
        raise ValueError("dataset grid does not match the model grid")
    work = model.copy()
    inputs, targets = dataset.inputs, dataset.targets
    weights_phi = work.grid.weights * work.phi
    opt = Adam(work.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    history = TrainHistory()
    best, best_loss = work.copy(), np.inf
    names = list(work.params)
    for epoch in range(config.epochs):
        P = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in work.params.items()}
        try:
            loss, out, tau, penalty = _loss_graph(work, inputs, targets, config, P)
        except ad.DegenerateBasisError as exc:
            if config.checkpoint_path:
                save_checkpoint(best, config.checkpoint_path)
            raise TrainingAbortedError(f"epoch {epoch + 1}: {exc}", best, history) from exc
        except ad.NonFiniteError as exc:
            raise TrainingDivergedError(f"epoch {epoch + 1}: {exc}") from exc
        value = float(loss.value)
        history.loss.append(value)
        history.invariance_error.append(float(np.mean(np.abs(out.value @ weights_phi))))
        if penalty is not None:
            history.penalty.append(float(penalty.value))
            history.trunk_row_norms.append(np.sqrt((tau.value**2) @ work.grid.weights).tolist())
        if value < best_loss:
            best_loss, best = value, work.copy()
            history.best_epoch = epoch
        grads = dict(zip(names, ad.backward(loss, [P[k] for k in names])))
        opt.step(work.params, grads)
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("epoch %d loss %.4e invariance %.3e", epoch + 1, value, history.invariance_error[-1])
    if config.checkpoint_path:
        save_checkpoint(best, config.checkpoint_path)
    return best, history


def relative_errors(model, dataset, zero_tol: float = 1e-13) -> np.ndarray:
    pred = forward(model, dataset.inputs)
    num = np.linalg.norm(dataset.targets - pred, axis=1)
    den = np.linalg.norm(dataset.targets, axis=1)
    keep = den >= zero_tol
    if not np.all(keep):
        warnings.warn(f"{int((~keep).sum())} zero-norm targets excluded from the relative error")
    return num[keep] / den[keep]


def rel_l2_error(model, dataset) -> float:
    """Mean over samples of ||Q(f) - Q_theta(f)||_2 / ||Q(f)||_2."""
    return float(np.mean(relative_errors(model, dataset)))


def evaluate(model, dataset) -> dict:
    pred = forward(model, dataset.inputs)
    inv = np.abs(pred @ (model.grid.weights * model.phi))
    return {
        "variant": model.variant.value,
        "rel_l2_error": rel_l2_error(model, dataset),
        "invariance_error_mean": float(inv.mean()),
        "invariance_error_max": float(inv.max()),
        "n_samples": len(dataset),
    }
