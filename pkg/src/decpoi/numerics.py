"""Differentiable-computation substrate.

A small reverse-mode engine over float64 numpy arrays. The primitive set is
exactly what the losses in this project need: matrix product, elementwise
add/mul/div, softmax, sigmoid, log, exp, clip, embedding lookup (gather),
reshape/transpose and reductions. Parameters live in immutable ParamStore
snapshots; `grad` evaluates a scalar loss written against a dict of Var
leaves and returns the exact analytic gradient.
"""

from __future__ import annotations

import json
from collections.abc import Mapping

import numpy as np

from .exceptions import ConfigError, ContractError, NumericError


# ---------------------------------------------------------------------------
# Computation graph
# ---------------------------------------------------------------------------

class Var:
    """Graph node: a float64 array plus the VJP closure that produced it."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp  # callable(upstream) -> per-parent gradient arrays

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def lift(x) -> Var:
    """Wrap a constant as a leaf Var (no-op for Var input)."""
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = lift(a), lift(b)
    out = Var(a.value + b.value, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = lift(a), lift(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = lift(a), lift(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape),
                          _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = lift(a), lift(b)
    return Var(a.value / b.value, (a, b),
               lambda g: (_unbroadcast(g / b.value, a.shape),
                          _unbroadcast(-g * a.value / (b.value ** 2), b.shape)))


def matmul(a, b):
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractError("matmul supports 2-D operands only")
    return Var(a.value @ b.value, (a, b),
               lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a):
    a = lift(a)
    return Var(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = lift(a)
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather(a, idx):
    """Row lookup a[idx] with scatter-add backward (embedding lookup)."""
    a = lift(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        return (acc,)

    return Var(a.value[idx], (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    a = lift(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def log(a):
    a = lift(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def exp(a):
    a = lift(a)
    out_val = np.exp(a.value)
    return Var(out_val, (a,), lambda g: (g * out_val,))


def sigmoid(a):
    a = lift(a)
    x = a.value
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def clip(a, lo, hi):
    """Clamp values; gradient passes through only where unclipped."""
    a = lift(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Var(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


def softmax(a, axis=-1):
    """Stable softmax (max-subtraction) along `axis`."""
    a = lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return Var(s, (a,), vjp)


def backward(root: Var):
    """Accumulate gradients of a scalar root into every reachable leaf."""
    if root.value.size != 1:
        raise ContractError("backward requires a scalar output")
    topo, seen, stack = [], set(), [(root, False)]
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
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class ParamStore(Mapping):
    """Immutable snapshot of named float64 arrays with fixed shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = {}
        for name in arrays:
            arr = np.array(arrays[name], dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in parameter '{name}'")
            arr.setflags(write=False)
            self._arrays[name] = arr

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def shapes(self):
        return {k: v.shape for k, v in self._arrays.items()}

    def map(self, fn) -> "ParamStore":
        """New store with fn applied entrywise to every array."""
        return type(self)({k: fn(v) for k, v in self._arrays.items()})

    def allclose(self, other, rtol=1e-12, atol=0.0) -> bool:
        return set(self) == set(other) and all(
            np.allclose(self[k], other[k], rtol=rtol, atol=atol) for k in self)

    def equal(self, other) -> bool:
        return set(self) == set(other) and all(
            np.array_equal(self[k], other[k]) for k in self)

    def value_range(self):
        """(min, max) over all scalar entries across every array."""
        lo = min(float(v.min()) for v in self._arrays.values())
        hi = max(float(v.max()) for v in self._arrays.values())
        return lo, hi


class GradStore(ParamStore):
    """Gradient arrays, key/shape congruent with their ParamStore."""


def _require_congruent(p: ParamStore, g: Mapping):
    if set(p) != set(g):
        raise ContractError("parameter/gradient key sets differ")
    for k in p:
        if p[k].shape != np.asarray(g[k]).shape:
            raise ContractError(f"shape mismatch for '{k}'")


def grad(loss_fn, params: Mapping[str, np.ndarray]):
    """Evaluate `loss_fn` on Var leaves built from `params`.

    loss_fn receives a dict name -> Var and must return a scalar Var
    composed of this module's primitives. Returns (loss, GradStore);
    parameters the loss never touches get exact-zero gradients.
    """
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in parameter '{name}'")
    leaves = {name: Var(arr) for name, arr in params.items()}
    out = loss_fn(leaves)
    if out.value.size != 1:
        raise ContractError("loss_fn must return a scalar")
    loss = float(out.value.reshape(()))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss (params: {sorted(params)})")
    backward(out)
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    return loss, GradStore(grads)


def sgd_step(p: ParamStore, g: Mapping, lr: float) -> ParamStore:
    """p' = p - lr * g over all keys."""
    if lr < 0:
        raise ContractError("learning rate must be >= 0")
    _require_congruent(p, g)
    return ParamStore({k: p[k] - lr * np.asarray(g[k]) for k in p})


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli keep-mask scaled by 1/(1-rate); training-mode only."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = (rng.random(shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# Serialization: JSON map name -> shape -> row-major values
# ---------------------------------------------------------------------------

def params_to_dict(store: ParamStore) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        for name, arr in store.items()
    }


def params_from_dict(d: Mapping) -> ParamStore:
    arrays = {}
    for name, entry in d.items():
        arrays[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return ParamStore(arrays)


def save_params(path, store: ParamStore, header: dict | None = None):
    payload = {"header": dict(header or {}), "params": params_to_dict(store)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return params_from_dict(payload["params"]), payload.get("header", {})
