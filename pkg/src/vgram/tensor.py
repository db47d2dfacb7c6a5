"""Minimal reverse-mode autodiff over numpy, double precision throughout.

A Tensor wraps an ndarray and records the operation that produced it;
``backward`` replays the tape in reverse topological order. The op set
is the small closed set the model needs: arithmetic with broadcasting,
matmul (with leading batch dims), logsumexp/log-softmax, gather and
fancy indexing, concat/stack, reductions, relu. Forward results are
checked finite after every op, so a NaN trips immediately at its source
instead of three modules later.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

GRAD_CLIP_DEFAULT = 5.0


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        self.data = _as_array(data)
        if not np.isfinite(self.data).all():
            raise FloatingPointError("non-finite values in tensor")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward on a tensor detached from all parameters")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward without a gradient needs a scalar loss")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- operators ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    return Tensor(data, _parents=tuple(parents), _backward=backward)


# -- elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(np.minimum(a.data, 700.0))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


# -- linear algebra ---------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- shape ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.swapaxes(g, ax1, ax2))

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                t.accumulate(g[tuple(idx)])
            offset += s

    return _make(out_data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(part)

    return _make(out_data, tensors, backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[key]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a.accumulate(full)

    return _make(out_data, (a,), backward)


def put_at(values, key, shape: tuple[int, ...]) -> Tensor:
    """Scatter values into a zero tensor; each target cell written at most once."""
    values = as_tensor(values)
    out_data = np.zeros(shape)
    out_data[key] = values.data

    def backward(g):
        if values.requires_grad:
            values.accumulate(g[key])

    return _make(out_data, (values,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along an axis; the embedding lookup primitive."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out_data = np.take(a.data, indices, axis=axis)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
            a.accumulate(full)

    return _make(out_data, (a,), backward)


# -- reductions -------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    denom = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / denom)


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient flows to the first maximal entry only."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)
    onehot = np.zeros_like(a.data)
    np.put_along_axis(onehot, arg, 1.0, axis=axis)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(onehot * gg)

    return _make(out_data, (a,), backward)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_full = m + np.log(total)
    soft = shifted / total

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(soft * gg)

    out_data = out_full if keepdims else np.squeeze(out_full, axis=axis)
    return _make(out_data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    return add(a, mul(logsumexp(a, axis=axis, keepdims=True), -1.0))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(tsum(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, norm)


# -- layers -----------------------------------------------------------


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[0]) if shape[0] > 0 else 1.0
    return rng.uniform(-bound, bound, shape)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Affine stack with rectifier nonlinearities between layers."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i + 1 < len(layers):
            h = relu(h)
    return h


def attention(query: Tensor, keys: Tensor, values: Tensor,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention; softmax over the key axis.

    query (..., n, d), keys (..., m, d), values (..., m, dv). A mask of
    shape (..., n, m) holds 0 for valid and a large negative number for
    padded keys.
    """
    d = query.shape[-1]
    logits = mul(matmul(query, swapaxes(keys, -1, -2)), 1.0 / math.sqrt(d))
    if mask is not None:
        logits = add(logits, Tensor(mask))
    weights = softmax(logits, axis=-1)
    return matmul(weights, values)


def biaffine(u: Tensor, v: Tensor, w1: Tensor, w2: Tensor, b) -> Tensor:
    """u^T W1 v + (u+v)^T W2 + b for single vectors u, v."""
    bil = matmul(reshape(u, (1, -1)), matmul(w1, reshape(v, (-1, 1))))
    lin = matmul(reshape(add(u, v), (1, -1)), reshape(w2, (-1, 1)))
    out = add(add(bil, lin), as_tensor(b))
    return reshape(out, ())


def biaffine_table(us: Tensor, vs: Tensor, w1: Tensor, w2: Tensor, b) -> Tensor:
    """All-pairs scalar biaffine scores: (..., n, d) x (..., m, d) -> (..., n, m)."""
    bil = matmul(matmul(us, w1), swapaxes(vs, -1, -2))
    lu = matmul(us, reshape(w2, (-1, 1)))
    lv = matmul(vs, reshape(w2, (-1, 1)))
    lin = add(lu, swapaxes(lv, -1, -2))
    return add(add(bil, lin), as_tensor(b))


def biaffine_features(us: Tensor, vs: Tensor, w1: Tensor, w2: Tensor,
                      b: Tensor) -> Tensor:
    """Vector-valued biaffine over all ordered pairs.

    us (B, n, d), vs (B, m, d), w1 (d, k, d), w2 (d, k), b (k,), giving
    features of shape (B, n, m, k): per output channel a bilinear form
    plus a linear term over the pair sum.
    """
    batch, n, d = us.shape
    m = vs.shape[1]
    k = w1.shape[1]
    left = matmul(us, reshape(w1, (d, k * d)))          # (B, n, k*d)
    left = reshape(left, (batch, n * k, d))
    bil = matmul(left, swapaxes(vs, -1, -2))             # (B, n*k, m)
    bil = swapaxes(reshape(bil, (batch, n, k, m)), 2, 3)  # (B, n, m, k)
    lu = reshape(matmul(us, w2), (batch, n, 1, k))
    lv = reshape(matmul(vs, w2), (batch, 1, m, k))
    return add(add(bil, add(lu, lv)), b)


# -- parameters and optimizer ----------------------------------------


class ParameterStore:
    """Named parameter tensors with per-parameter adaptive-moment state.

    Creation order is the iteration order, so a deterministic model
    build yields a deterministic checkpoint layout.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def get(self, name: str, shape: tuple[int, ...],
            init: Callable[[tuple[int, ...]], np.ndarray],
            trainable: bool = True) -> Tensor:
        if name not in self._params:
            data = init(shape)
            if tuple(data.shape) != tuple(shape):
                raise ValueError(f"init for {name} produced shape {data.shape}, wanted {shape}")
            self._params[name] = Tensor(data, requires_grad=trainable)
            self._m[name] = np.zeros(shape)
            self._v[name] = np.zeros(shape)
        t = self._params[name]
        if t.shape != tuple(shape):
            raise ValueError(f"parameter {name} exists with shape {t.shape}, wanted {shape}")
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.requires_grad and t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return math.sqrt(total)

    def clip_gradients(self, max_norm: float = GRAD_CLIP_DEFAULT) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            scale = max_norm / norm
            for t in self._params.values():
                if t.requires_grad and t.grad is not None:
                    t.grad *= scale
        return norm

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name}")
            t = self._params[name]
            if t.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {t.shape} vs {arr.shape}")
            t.data = arr.astype(np.float64)


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adaptive-moment update with bias correction over all trainable params."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# -- checkpoint container ---------------------------------------------

_MAGIC = b"VGCP"
_VERSION = 1


def save_checkpoint(path: str, store: ParameterStore, config_digest: str = "") -> None:
    """Versioned binary container: header then (name, shape, float32 LE data)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        digest = config_digest.encode("utf-8")
        f.write(struct.pack("<H", len(digest)))
        f.write(digest)
        names = store.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = store[name].data.astype("<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<H", f.read(2))
        digest = f.read(dlen).decode("utf-8")
        (count,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            nbytes = 4 * int(np.prod(shape)) if shape else 4
            data = np.frombuffer(f.read(nbytes), dtype="<f4").reshape(shape)
            params[name] = data.astype(np.float64)
    return params, digest
