"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the operations the localizer's loss graph needs are provided.  A graph
is recorded during the forward pass and released after ``backward()``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericalError

# Fast R-CNN breakpoint for smooth L1.
SMOOTH_L1_BETA = 1.0

CHECKPOINT_MAGIC = b"CTRLCKPT"
CHECKPOINT_VERSION = 1


class Tensor:
    """Dense float64 array that optionally records how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.shape), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _raise_not_scalar(t: Tensor) -> float:
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a ``1 x n`` row to every row of an ``m x n`` tensor."""
    if x.data.ndim != 2 or bias.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _result(x.data + c, (x,), lambda g: (g,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks, weights)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise DimensionError(f"mul_const shape mismatch: {x.shape} vs {c.shape}")
    return _result(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join along the last axis."""
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat leading dims differ: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return np.split(g, cuts, axis=-1)

    return _result(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), backward)


def take(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Pick elements of the flattened tensor into a 1-D result."""
    flat_index = np.asarray(flat_index, dtype=np.intp)

    def backward(g):
        out = np.zeros(x.data.size)
        np.add.at(out, flat_index, g)
        return (out.reshape(x.shape),)

    return _result(x.data.reshape(-1)[flat_index], (x,), backward)


def _logistic(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for any finite input."""
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _result(out, (x,), lambda g: (g * _logistic(v),))


def sigmoid(x: Tensor) -> Tensor:
    s = _logistic(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def _smooth_l1_value(v: np.ndarray, beta: float) -> np.ndarray:
    a = np.abs(v)
    return np.where(a < beta, 0.5 * v * v / beta, a - 0.5 * beta)


def _smooth_l1_slope(v: np.ndarray, beta: float) -> np.ndarray:
    return np.clip(v / beta, -1.0, 1.0)


def smooth_l1(x: Tensor) -> Tensor:
    v = x.data
    return _result(
        _smooth_l1_value(v, SMOOTH_L1_BETA),
        (x,),
        lambda g: (g * _smooth_l1_slope(v, SMOOTH_L1_BETA),),
    )


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    v = x.data
    z = v - v.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def reduce(op: str, x: Tensor, axis: int | None = None) -> Tensor:
    """Sum or mean over ``axis`` (all elements when ``axis`` is None)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    if axis is not None and not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    count = x.data.size if axis is None else x.shape[axis]
    if op == "sum":
        out = x.data.sum(axis=axis)
        factor = 1.0
    else:
        if count == 0:
            raise DimensionError(f"mean over empty axis of shape {x.shape}")
        out = x.data.mean(axis=axis)
        factor = 1.0 / count
    shape = x.shape

    def backward(g):
        g = np.asarray(g) * factor
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return reduce("sum", x)


def mean_all(x: Tensor) -> Tensor:
    return reduce("mean", x)


# ------------------------------------------------------------- parameters


class ParameterStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if arr.shape != self.params[name].shape:
                raise DimensionError(
                    f"parameter {name!r} shape {self.params[name].shape} vs loaded {arr.shape}"
                )
            self.params[name].data = np.array(arr, dtype=np.float64)

    def num_values(self) -> int:
        return sum(t.data.size for t in self.params.values())


def adam_step(
    store: ParameterStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name, t in store.params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, t in store.params.items():
        g = t.grad
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / c1
        v_hat = store.v[name] / c2
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        t.grad = np.zeros_like(t.data)
    return store


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    epsilon: float = 1e-6,
    sample_count: int = 200,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from ``store`` on every call.  Up to
    ``sample_count`` coordinates are checked; the relative error uses
    ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    rng = rng if rng is not None else np.random.default_rng(0)
    store.zero_grad()
    loss = loss_fn()
    base = loss.item()
    loss.backward()
    again = loss_fn().item()
    if base != again:
        raise NumericalError(f"loss is not deterministic: {base!r} vs {again!r}")
    analytic = {k: t.grad.copy() for k, t in store.params.items()}

    selected = list(names) if names is not None else list(store.params)
    coords = [(n, i) for n in selected for i in range(store.params[n].data.size)]
    if sample_count < len(coords):
        picks = rng.choice(len(coords), size=sample_count, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for name, i in coords:
        flat = store.params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn().item()
        flat[i] = orig - epsilon
        down = loss_fn().item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    store.zero_grad()
    return worst


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray] | ParameterStore) -> None:
    """Write named float64 arrays in the CTRLCKPT binary layout."""
    if isinstance(arrays, ParameterStore):
        arrays = {k: t.data for k, t in arrays.params.items()}
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CTRLCKPT file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out
