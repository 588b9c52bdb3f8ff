"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Deliberately small: 2-D matrices, vectors and scalars cover every forward and
backward pass in this package. Each op records a closure that propagates the
upstream gradient to its inputs; ``backward`` replays the closures in reverse
topological order. Everything runs in 64-bit so finite-difference checks are
meaningful.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

_GELU_COEF = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)


class Tensor:
    """A float64 array with an optional gradient slot.

    ``data`` is row-major float64. ``grad`` is lazily allocated during
    ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after our limited broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    if len(shape) == 1 and g.ndim == 2 and shape[0] == g.shape[1]:
        return g.sum(axis=0)
    raise DimensionError(f"cannot reduce grad {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.shape == ():
        return
    if len(b.shape) == 1 and len(a.shape) == 2 and b.shape[0] == a.shape[1]:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(_reduce_to(g, b.shape))

    return _result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-_reduce_to(g, b.shape))

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(_reduce_to(g * a.data, b.shape))

    return _result(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _result(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g.T)

    return _result(a.data.T, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal row counts along axis 1."""
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(f"concat_cols: got shapes {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[:, offset:offset + w])
            offset += w

    return _result(out_data, tuple(parts), backward)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a.accumulate(buf)

    return _result(out_data, (a,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects 2-D input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=1, keepdims=True)
            x.accumulate(y * (g - inner))

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gamma, beta."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects 2-D input, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: input width {d} but gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ContractViolation("layer_norm requires eps > 0")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            x.accumulate(inv_std * (gx - m1 - xhat * m2))

    return _result(out_data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU activation (tanh form)."""
    z = x.data
    inner = _GELU_SCALE * (z + _GELU_COEF * z ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * z * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            d_inner = _GELU_SCALE * (1.0 + 3.0 * _GELU_COEF * z ** 2)
            dz = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t ** 2) * d_inner
            x.accumulate(g * dz)

    return _result(out_data, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), backward)


def cross_entropy_logits(logits: Tensor, targets: Sequence[int],
                         mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over mask-true rows.

    ``logits`` is [rows x vocab]; ``targets`` and ``mask`` are per-row. Rows
    where ``mask`` is false contribute nothing and receive zero gradient.
    """
    n_rows, vocab = logits.shape
    if len(targets) != n_rows or len(mask) != n_rows:
        raise DimensionError(
            f"cross_entropy_logits: {n_rows} rows but {len(targets)} targets, "
            f"{len(mask)} mask entries")
    rows = [i for i, m in enumerate(mask) if m]
    if not rows:
        raise ContractViolation("cross_entropy_logits requires at least one masked row")
    for i in rows:
        if not 0 <= targets[i] < vocab:
            raise IndexError(f"target {targets[i]} out of range for vocab {vocab}")

    z = logits.data[rows]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    picked = np.array([targets[i] for i in rows], dtype=np.int64)
    loss = -log_probs[np.arange(len(rows)), picked].mean()

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(len(rows)), picked] -= 1.0
            buf = np.zeros_like(logits.data)
            buf[rows] = probs * (float(g) / len(rows))
            logits.accumulate(buf)

    return _result(np.asarray(loss), (logits,), backward)


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.shape}")
    # Iterative topological order; graphs can be deep.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# Parameter containers

class Linear:
    """A weight matrix plus bias, applied as x @ w + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Norm:
    """Layer-norm affine parameters (gamma, beta)."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def named(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class ParameterSet:
    """Named parameters with a trainable mask; iteration is lexicographic."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: set[str] = set()

    def add(self, path: str, tensor: Tensor, trainable: bool = True) -> None:
        if path in self._params:
            raise ContractViolation(f"duplicate parameter path {path!r}")
        self._params[path] = tensor
        if trainable:
            self._trainable.add(path)

    def extend(self, named: Iterable[tuple[str, Tensor]], trainable: bool = True) -> None:
        for path, tensor in named:
            self.add(path, tensor, trainable)

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def trainable_paths(self) -> list[str]:
        return sorted(self._trainable)

    def items(self):
        for path in self.paths():
            yield path, self._params[path]

    def is_trainable(self, path: str) -> bool:
        return path in self._trainable

    def set_trainable(self, path: str, trainable: bool) -> None:
        if path not in self._params:
            raise ContractViolation(f"unknown parameter path {path!r}")
        if trainable:
            self._trainable.add(path)
        else:
            self._trainable.discard(path)

    def zero_grads(self) -> None:
        for path in self.trainable_paths():
            self._params[path].zero_grad()


def parameter_digest(named: Iterable[tuple[str, Tensor]]) -> str:
    """SHA-256 over sorted (path, shape, raw bytes); detects any value change."""
    h = hashlib.sha256()
    for path, tensor in sorted(named, key=lambda kv: kv[0]):
        h.update(path.encode("utf-8"))
        h.update(repr(tensor.shape).encode("ascii"))
        h.update(np.ascontiguousarray(tensor.data).tobytes())
    return h.hexdigest()


@dataclass
class AdamState:
    """Adam optimizer state; moment buffers exist only for trainable paths."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractViolation("Adam betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ContractViolation("Adam eps must be positive")


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Non-trainable parameters are left bit-identical. Trainable gradients are
    cleared afterwards. A trainable parameter without a gradient is a caller
    bug and raises.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for path in params.trainable_paths():
        p = params[path]
        if p.grad is None:
            raise ContractViolation(f"trainable parameter {path!r} has no gradient")
        g = p.grad
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p.data)
        v = state.v.get(path)
        if v is None:
            v = state.v[path] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grads()
