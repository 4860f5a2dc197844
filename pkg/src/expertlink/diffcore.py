"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the operation set the linking model needs: linear maps,
tanh / leaky-ReLU, token-embedding means, row normalization, gradient
reversal, loss reductions, an Adam optimizer with per-group learning
rates, and a central-finite-difference gradient checker.  No
broadcasting, no GPU, no graph rewriting.
"""
from __future__ import annotations

import json
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_TLS = threading.local()


def _grad_enabled() -> bool:
    return getattr(_TLS, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape recording (forward values only)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _TLS.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _TLS.grad_enabled = self._prev
        return False


class DiffError(ValueError):
    """Raised on shape mismatches and invalid graph operations."""


class Tensor:
    """A node in the computation tape.

    ``parents`` and ``_backward`` are set for recorded intermediate nodes;
    leaves created with ``requires_grad=True`` accumulate into ``grad``
    when ``backward`` runs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def param(name: str, data) -> Tensor:
    """A named trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _tracking(*tensors: Tensor) -> bool:
    return _grad_enabled() and any(t.requires_grad for t in tensors)


def custom(data, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Record an externally defined op.

    ``backward(g)`` must return an iterable of (parent, grad_contribution)
    pairs.  When recording is off, the parents and closure are dropped.
    """
    if _tracking(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# Backward pass

def backward(loss: Tensor) -> None:
    """Populate gradients of all reachable leaves with d loss / d leaf.

    Repeated calls accumulate into leaf ``grad`` arrays until cleared.
    """
    if loss.data.shape != ():
        raise DiffError(f"backward requires a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            node.grad = np.array(g, dtype=np.float64, copy=True) if node.grad is None \
                else node.grad + g


# ---------------------------------------------------------------------------
# Operations

def linear(w: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W (rows of x are samples) or W^T x for a single vector."""
    if w.data.ndim != 2:
        raise DiffError(f"linear weight must be 2-D, got {w.data.shape}")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != w.data.shape[0]:
        raise DiffError(
            f"linear shape mismatch: weight {w.data.shape} vs input {x.data.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise DiffError(
                f"linear bias shape {b.data.shape} incompatible with weight {w.data.shape}")
        y = y + b.data
    parents = (w, x) if b is None else (w, x, b)
    if not _tracking(*parents):
        return Tensor(y)

    def back(g):
        if x.data.ndim == 1:
            pairs = [(w, np.outer(x.data, g)), (x, w.data @ g)]
        else:
            pairs = [(w, x.data.T @ g), (x, g @ w.data.T)]
        if b is not None:
            pairs.append((b, g if g.ndim == 1 else g.sum(axis=0)))
        return pairs

    return Tensor(y, requires_grad=True, parents=parents, backward=back)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T for 2-D a, b with matching last dimension."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DiffError(f"matmul_nt shape mismatch: {a.data.shape} vs {b.data.shape}")
    y = a.data @ b.data.T

    def back(g):
        return [(a, g @ b.data), (b, g.T @ a.data)]

    return custom(y, (a, b), back)


def affine(x: Tensor, mul: float = 1.0, add: float = 0.0) -> Tensor:
    """Elementwise y = mul * x + add with python-float coefficients."""
    y = mul * x.data + add

    def back(g):
        return [(x, mul * g)]

    return custom(y, (x,), back)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DiffError(f"{op} shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return custom(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return custom(a.data - b.data, (a, b), lambda g: [(a, g), (b, -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return custom(a.data * b.data, (a, b),
                  lambda g: [(a, g * b.data), (b, g * a.data)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom(y, (x,), lambda g: [(x, g * (1.0 - y * y))])


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    return custom(y, (x,), lambda g: [(x, g * (x.data > 0.0))])


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    y = np.where(x.data > 0.0, x.data, slope * x.data)
    return custom(y, (x,), lambda g: [(x, g * np.where(x.data > 0.0, 1.0, slope))])


def tsum(x: Tensor) -> Tensor:
    return custom(np.sum(x.data), (x,),
                  lambda g: [(x, np.full_like(x.data, float(g)))])


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return custom(np.mean(x.data), (x,),
                  lambda g: [(x, np.full_like(x.data, float(g) / n))])


def sum_tensors(ts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors."""
    if not ts:
        raise DiffError("sum_tensors needs at least one tensor")
    y = ts[0].data.copy()
    for t in ts[1:]:
        _require_same_shape("sum_tensors", ts[0], t)
        y += t.data
    return custom(y, tuple(ts), lambda g: [(t, g) for t in ts])


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise DiffError(f"slice_rows needs a 2-D tensor, got {x.data.shape}")
    y = x.data[start:stop]

    def back(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return [(x, full)]

    return custom(y, (x,), back)


def embed_mean(table: Tensor, token_lists: Sequence[Sequence[int]]) -> Tensor:
    """Row i = mean of embedding-table rows for token_lists[i].

    Token id lists must be non-empty; each list may repeat ids.
    """
    if table.data.ndim != 2:
        raise DiffError(f"embedding table must be 2-D, got {table.data.shape}")
    n = len(token_lists)
    if n == 0:
        raise DiffError("embed_mean needs at least one token list")
    ids = [np.asarray(t, dtype=np.intp) for t in token_lists]
    for i, t in enumerate(ids):
        if t.size == 0:
            raise DiffError(f"token list {i} is empty")
    y = np.empty((n, table.data.shape[1]), dtype=np.float64)
    for i, t in enumerate(ids):
        y[i] = table.data[t].mean(axis=0)

    def back(g):
        gt = np.zeros_like(table.data)
        for i, t in enumerate(ids):
            np.add.at(gt, t, g[i] / t.size)
        return [(table, gt)]

    return custom(y, (table,), back)


def l2norm_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise DiffError(f"l2norm_rows needs a 2-D tensor, got {x.data.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = x.data / norms

    def back(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return [(x, (g - y * dot) / norms)]

    return custom(y, (x,), back)


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by -lam."""
    if lam < 0:
        raise DiffError("gradient-reversal scale must be >= 0")
    return custom(x.data, (x,), lambda g: [(x, -lam * g)])


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise dot products of two equal-shape 2-D tensors -> (n,)."""
    _require_same_shape("dot_rows", a, b)
    y = np.sum(a.data * b.data, axis=1)

    def back(g):
        return [(a, g[:, None] * b.data), (b, g[:, None] * a.data)]

    return custom(y, (a, b), back)


def nll_2class(logits: Tensor, labels: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean negative log-likelihood over two-column logits.

    Selected-class probabilities are clamped to [clamp, 1 - clamp]; rows at
    the clamp contribute zero gradient.
    """
    if logits.data.ndim != 2 or logits.data.shape[1] != 2:
        raise DiffError(f"nll_2class expects (n, 2) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise DiffError(f"labels shape {labels.shape} does not match {n} rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    p_sel = p[np.arange(n), labels]
    clamped = (p_sel < clamp) | (p_sel > 1.0 - clamp)
    p_safe = np.clip(p_sel, clamp, 1.0 - clamp)
    y = -np.mean(np.log(p_safe))

    def back(g):
        onehot = np.zeros_like(p)
        onehot[np.arange(n), labels] = 1.0
        dlogits = (p - onehot) / n
        dlogits[clamped] = 0.0
        return [(logits, float(g) * dlogits)]

    return custom(y, (logits,), back)


# ---------------------------------------------------------------------------
# Optimizer

class OptimizerError(RuntimeError):
    pass


class Adam:
    """Adaptive-moment optimizer with per-group base rates and epoch-wise
    exponential decay of all rates."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 decay: float = 0.96):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.t = 0
        self.lr_scale = 1.0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        for params, _ in self.groups:
            for p in params:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def set_epoch(self, epoch: int) -> None:
        """Apply the exponential schedule: rate = base * decay**epoch."""
        self.lr_scale = self.decay ** epoch

    def step(self) -> None:
        """One bias-corrected update; clears gradients afterward."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for params, base_lr in self.groups:
            lr = base_lr * self.lr_scale
            for p in params:
                g = p.grad
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise OptimizerError(
                        f"non-finite gradient for parameter {p.name or '<unnamed>'}")
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if not np.all(np.isfinite(p.data)):
                    raise OptimizerError(
                        f"non-finite values in parameter {p.name or '<unnamed>'} after update")
        self.zero_grad()

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None


# ---------------------------------------------------------------------------
# Gradient verification

def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                      epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar loss from the live parameter values on
    every call.  Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if epsilon <= 0:
        raise DiffError("epsilon must be positive")
    for p in params:
        p.grad = None
    out = fn()
    if not np.isfinite(out.data):
        raise DiffError("function value is not finite")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = float(fn().data)
                flat[i] = orig - epsilon
                f_minus = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise DiffError("function value is not finite during probing")
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1
_CHECKPOINT_MAGIC = b"ELCKPT1\n"


def save_checkpoint(path, named_arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write a versioned binary parameter container.

    Layout: magic, 4-byte big-endian header length, JSON header (version,
    meta, parameter names + shapes in name order), then row-major
    little-endian float64 bytes per parameter.  Byte-deterministic for
    identical inputs; values round-trip exactly.
    """
    names = sorted(named_arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": [{"name": n, "shape": list(np.asarray(named_arrays[n]).shape)}
                   for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(4, "big"))
        f.write(header_bytes)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(named_arrays[n], dtype="<f8"))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise DiffError(f"{path} is not a parameter checkpoint")
        header_len = int.from_bytes(f.read(4), "big")
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DiffError(
                f"unsupported checkpoint version {header.get('format_version')!r}")
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise DiffError(f"truncated checkpoint while reading {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header.get("meta", {})
