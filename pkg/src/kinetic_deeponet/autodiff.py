"""A small reverse-mode automatic differentiation engine over dense float64 arrays.

Only the operations needed by tanh MLPs, quadrature-weighted inner products and
the weighted orthonormalization of the trunk basis are provided.  Every
forward op checks its result for NaN/Inf.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class DegenerateBasisError(ArithmeticError):
    """Raised when orthonormalization meets a numerically dependent row."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self.parents)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value produced in forward pass")
    parents = tuple(p for p in parents if p.tracked)
    if not parents:
        return Tensor(value)
    return Tensor(value, parents=parents, backward_fn=backward_fn)


def _accumulate(t: Tensor, g) -> None:
    if not t.tracked:
        return
    t.grad = g if t.grad is None else t.grad + g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _result(a.value @ b.value, (a, b), backward)


def add_row_bias(x, bias) -> Tensor:
    """Add a bias vector of length n to every row of an (r, n) tensor."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.value.ndim != 2 or bias.shape != (x.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {x.shape}")

    def backward(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=0))

    return _result(x.value + bias.value, (x, bias), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))

    return _result(y, (x,), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        _accumulate(x, c * g)

    return _result(c * x.value, (x,), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.value - b.value, (a, b), backward)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _result(a.value * b.value, (a, b), backward)


def add_scalar(x, s) -> Tensor:
    """Add a one-element tensor ``s`` to every entry of ``x``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.value.size != 1:
        raise ValueError("add_scalar expects a one-element tensor")

    def backward(g):
        _accumulate(x, g)
        _accumulate(s, np.full(s.shape, g.sum()))

    return _result(x.value + s.value.reshape(()), (x, s), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.sign(x.value))

    return _result(np.abs(x.value), (x,), backward)


def tsum(x) -> Tensor:
    """Sum of all entries, returned as a 0-d tensor."""
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _result(np.asarray(x.value.sum()), (x,), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g.T)

    return _result(x.value.T, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def weighted_inner(x, w) -> Tensor:
    """Quadrature integral of each row: x @ w for x of shape (r, m) or (m,)."""
    x = as_tensor(x)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"weight length {w.shape[0]} does not match {x.shape}")

    def backward(g):
        _accumulate(x, np.multiply.outer(g, w))

    return _result(x.value @ w, (x,), backward)


def weighted_gram(x, w) -> Tensor:
    """Gram matrix G[a, b] = sum_i w_i x[a, i] x[b, i]."""
    x = as_tensor(x)
    w = np.asarray(w, dtype=np.float64)
    xw = x.value * w

    def backward(g):
        _accumulate(x, (g + g.T) @ xw)

    return _result(xw @ x.value.T, (x,), backward)


def mgs2(B, w, pinned_row: int, tol: float = 1e-10, record: bool = False, drop_degenerate: bool = False):
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Rows are orthonormalized in <a, b>_w = sum_i w_i a_i b_i, starting with
    ``pinned_row`` so that it is only normalized.  A row whose norm after
    projection falls to ``tol`` times its original norm raises
    DegenerateBasisError, or is set to zero when ``drop_degenerate``.
    Returns the orthonormal rows and, if ``record``, the tape needed for the
    reverse pass.
    """
    B = np.asarray(B, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n_rows = B.shape[0]
    if not 0 <= pinned_row < n_rows:
        raise IndexError("pinned_row out of range")
    order = [pinned_row] + [k for k in range(n_rows) if k != pinned_row]
    Q = np.empty_like(B)
    tape = [] if record else None
    for pos, k in enumerate(order):
        v = B[k].copy()
        norm0 = np.sqrt(np.dot(w, v * v))
        if norm0 == 0.0:
            raise DegenerateBasisError(f"row {k} is identically zero")
        for _ in range(2 if pos else 0):
            for j in order[:pos]:
                r = np.dot(w, Q[j] * v)
                if record:
                    tape.append((j, k, r, v.copy()))
                v -= r * Q[j]
        n = np.sqrt(np.dot(w, v * v))
        if n <= tol * norm0:
            if not drop_degenerate:
                raise DegenerateBasisError(f"row {k} is numerically dependent on previous rows")
            Q[k] = 0.0
            if record:
                tape.append((k,))
            continue
        Q[k] = v / n
        if record:
            tape.append((k, n))
    return Q, tape


def orthonormalize_weighted(B, w, pinned_row: int, tol: float = 1e-10, drop_degenerate: bool = False) -> Tensor:
    """Differentiable weighted orthonormalization of the rows of B.

    Row ``pinned_row`` of the result is exactly B[pinned_row] normalized.
    """
    B = as_tensor(B)
    w = np.asarray(w, dtype=np.float64)
    if B.value.ndim != 2 or B.shape[1] != w.shape[0]:
        raise ValueError(f"cannot orthonormalize {B.shape} with {w.shape[0]} weights")
    Q, tape = mgs2(B.value, w, pinned_row, tol, record=B.tracked, drop_degenerate=drop_degenerate)

    def backward(g):
        adj = np.array(g, dtype=np.float64, copy=True)
        for entry in reversed(tape):
            if len(entry) == 1:
                adj[entry[0]] = 0.0
            elif len(entry) == 2:
                k, n = entry
                q = Q[k]
                adj[k] = (adj[k] - np.dot(adj[k], q) * (w * q)) / n
            else:
                j, k, r, v_old = entry
                a = adj[k]
                r_bar = -np.dot(a, Q[j])
                adj[j] += -r * a + r_bar * (w * v_old)
                adj[k] = a + r_bar * (w * Q[j])
        _accumulate(B, adj)

    return _result(Q, (B,), backward)


def backward(loss: Tensor, params) -> list:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``params``.

    Parameters not connected to the loss receive zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar tensor")
    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    for node in topo:
        node.grad = None
    return grads
