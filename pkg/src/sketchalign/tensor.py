"""Dense float64 tensors with reverse-mode autodiff on an explicit gradient tape.

Every op in this module computes its forward value eagerly with numpy and, when
a ``Tape`` is active and some input requires gradients, records a closure that
pulls the output gradient back to each input. ``Tape.backward`` replays the
records in reverse execution order, which is a valid topological order because
an op's inputs always exist before its output.

Storage is row-major contiguous float64 throughout; shapes are checked at
every op boundary and nothing broadcasts implicitly except scalar-vs-tensor.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "reshape",
    "relu", "gelu", "sigmoid", "softmax_rows", "layer_norm",
    "mean", "sum_all", "l2_norm", "cosine_similarity", "normalize_rows",
    "row_max", "row_mean", "concat_rows", "concat_cols", "take_rows",
    "add_rows", "conv2d", "dropout",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when op operands have incompatible shapes."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks trainable leaves; tensors produced by ops inherit
    the flag from their inputs while a tape is active. After ``Tape.backward``
    every requires_grad tensor on the path to the loss holds an accumulated
    ``grad`` of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the real surface.
    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)
    def __rmul__(self, other): return self.__mul__(other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of executed ops with their local-gradient closures.

    Use as a context manager around the forward pass, then call ``backward``
    on the scalar loss. Repeated backward calls accumulate into ``grad``.
    Records are (output tensor, ((input tensor, pull closure), ...)) tuples.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[tuple[Tensor, Callable], ...]]] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        Tape._active.pop()
        return False

    @staticmethod
    def current() -> "Tape | None":
        return Tape._active[-1] if Tape._active else None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(out is loss for out, _ in self._records):
            raise ValueError("loss tensor was not produced on this tape")

        flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {id(out) for out, _ in self._records}

        for out, pulls in reversed(self._records):
            g = flow.pop(id(out), None)
            if g is None:
                continue  # not on the path from loss
            if out.requires_grad and out is not loss:
                out.grad = g.copy() if out.grad is None else out.grad + g
            for tensor, pull in pulls:
                contrib = pull(g)
                key = id(tensor)
                if key in flow:
                    flow[key] = flow[key] + contrib
                else:
                    flow[key] = contrib
                if key not in produced:
                    leaves[key] = tensor

        if loss.requires_grad:
            loss.grad = (np.ones_like(loss.data) if loss.grad is None
                         else loss.grad + np.ones_like(loss.data))
        for key, tensor in leaves.items():
            g = flow.get(key)
            if g is None:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _emit(out_data: np.ndarray, pulls: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Wrap an op result, recording grad closures for inputs that need them."""
    tape = Tape.current()
    live = tuple((t, f) for t, f in pulls if t.requires_grad) if tape is not None else ()
    out = Tensor(out_data, requires_grad=bool(live))
    if live:
        tape._records.append((out, live))
    return out


def _scalar(g: np.ndarray) -> float:
    return float(g.reshape(()))


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _to_scalar_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data
    return _emit(out, [
        (a, (lambda g: _to_scalar_shape(g, a.shape)) if _is_scalar(a) and out.shape != a.shape else (lambda g: g)),
        (b, (lambda g: _to_scalar_shape(g, b.shape)) if _is_scalar(b) and out.shape != b.shape else (lambda g: g)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data
    return _emit(out, [
        (a, (lambda g: _to_scalar_shape(g, a.shape)) if _is_scalar(a) and out.shape != a.shape else (lambda g: g)),
        (b, (lambda g: _to_scalar_shape(-g, b.shape)) if _is_scalar(b) and out.shape != b.shape else (lambda g: -g)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data
    return _emit(out, [
        (a, (lambda g: _to_scalar_shape(g * b.data, a.shape)) if _is_scalar(a) and out.shape != a.shape else (lambda g: g * b.data)),
        (b, (lambda g: _to_scalar_shape(g * a.data, b.shape)) if _is_scalar(b) and out.shape != b.shape else (lambda g: g * a.data)),
    ])


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, [(x, lambda g: -g)])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, [(x, lambda g: g * c)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {x.shape}")
    return _emit(np.ascontiguousarray(x.data.T), [(x, lambda g: np.ascontiguousarray(g.T))])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit(x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), [(x, lambda g: g * mask)])


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; its curvature is why the fd tolerance is looser here
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def pull(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner)

    return _emit(out, [(x, pull)])


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _emit(s, [(x, lambda g: g * s * (1.0 - s))])


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d tensor, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("softmax_rows: non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def pull(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _emit(y, [(x, pull)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    lead_axes = tuple(range(x.data.ndim - 1))

    def pull_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    return _emit(out, [
        (x, pull_x),
        (gain, lambda g: (g * xhat).sum(axis=lead_axes) if lead_axes else g * xhat),
        (bias, lambda g: g.sum(axis=lead_axes) if lead_axes else g),
    ])


# ---------------------------------------------------------------------------
# reductions and vector geometry

def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit(np.asarray(x.data.mean()), [(x, lambda g: np.full_like(x.data, _scalar(g) / n))])


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), [(x, lambda g: np.full_like(x.data, _scalar(g)))])


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all elements; subgradient 0 at the origin."""
    n = float(np.sqrt((x.data ** 2).sum()))

    def pull(g):
        if n == 0.0:
            return np.zeros_like(x.data)
        return _scalar(g) * x.data / n

    return _emit(np.asarray(n), [(x, pull)])


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs equal 1-d vectors, got {u.shape}/{v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity undefined for zero-norm input")
    c = float(u.data @ v.data) / (nu * nv)
    return _emit(np.asarray(c), [
        (u, lambda g: _scalar(g) * (v.data / (nu * nv) - c * u.data / nu ** 2)),
        (v, lambda g: _scalar(g) * (u.data / (nu * nv) - c * v.data / nv ** 2)),
    ])


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit norm; all-zero rows stay zero (zero gradient)."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows needs a 2-d tensor, got {x.shape}")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    y = x.data / safe
    nz = norms > 0

    def pull(g):
        back = (g - y * (g * y).sum(axis=1, keepdims=True)) / safe
        return np.where(nz, back, 0.0)

    return _emit(y, [(x, pull)])


def row_max(x: Tensor) -> Tensor:
    """Per-row maximum of a 2-d tensor as an (m, 1) column; ties go to the first."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_max needs a 2-d tensor, got {x.shape}")
    idx = x.data.argmax(axis=1)
    out = x.data[np.arange(x.shape[0]), idx].reshape(-1, 1)

    def pull(g):
        dx = np.zeros_like(x.data)
        dx[np.arange(x.shape[0]), idx] = g[:, 0]
        return dx

    return _emit(out, [(x, pull)])


def row_mean(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"row_mean needs a 2-d tensor, got {x.shape}")
    n = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return _emit(out, [(x, lambda g: np.repeat(g, n, axis=1) / n)])


# ---------------------------------------------------------------------------
# structure

def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows of nothing")
    cols = parts[0].shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ShapeError(f"concat_rows: expected (*, {cols}), got {p.shape}")
    out = np.vstack([p.data for p in parts])
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    pulls = [(p, (lambda lo, hi: lambda g: g[lo:hi])(offsets[i], offsets[i + 1]))
             for i, p in enumerate(parts)]
    return _emit(out, pulls)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols of nothing")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: expected ({rows}, *), got {p.shape}")
    out = np.hstack([p.data for p in parts])
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    pulls = [(p, (lambda lo, hi: lambda g: g[:, lo:hi])(offsets[i], offsets[i + 1]))
             for i, p in enumerate(parts)]
    return _emit(out, pulls)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows by index (duplicates allowed); gradient scatter-adds back."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d tensor, got {x.shape}")
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("take_rows: empty index list")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise IndexError(f"take_rows: id {int(idx.min() if idx.min() < 0 else idx.max())} "
                         f"out of range for table of {x.shape[0]} rows")

    def pull(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return dx

    return _emit(x.data[idx], [(x, pull)])


def add_rows(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) tensor."""
    if x.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeError(f"add_rows: got {x.shape} + {v.shape}")
    return _emit(x.data + v.data, [
        (x, lambda g: g),
        (v, lambda g: g.sum(axis=0)),
    ])


# ---------------------------------------------------------------------------
# convolution and dropout

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of an (h, w, c_in) input with (kh, kw, c_in, c_out) kernels."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need (h,w,c) input and (kh,kw,ci,co) kernel, got {x.shape}/{kernel.shape}")
    h, w, ci = x.shape
    kh, kw, kci, co = kernel.shape
    if kci != ci:
        raise ShapeError(f"conv2d: input channels {ci} != kernel channels {kci}")
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias must be ({co},), got {bias.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kernel.shape[:2]} larger than padded input ({hp}, {wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    windows = windows[::stride, ::stride]              # (ho, wo, ci, kh, kw)
    patches = windows.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * ci)
    kmat = kernel.data.reshape(kh * kw * ci, co)
    out = (patches @ kmat + bias.data).reshape(ho, wo, co)

    def pull_x(g):
        g2 = g.reshape(ho * wo, co)
        dp = (g2 @ kmat.T).reshape(ho, wo, kh, kw, ci)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                dxp[a:a + ho * stride:stride, b:b + wo * stride:stride] += dp[:, :, a, b, :]
        if padding:
            return dxp[padding:-padding, padding:-padding]
        return dxp

    def pull_k(g):
        g2 = g.reshape(ho * wo, co)
        return (patches.T @ g2).reshape(kh, kw, ci, co)

    return _emit(out, [
        (x, pull_x),
        (kernel, pull_k),
        (bias, lambda g: g.reshape(-1, co).sum(axis=0)),
    ])


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element with probability ``rate`` during training, scaling survivors.

    The mask comes from the explicitly passed generator so runs are
    reproducible; outside training this is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return _emit(x.data.copy(), [(x, lambda g: g)])
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, [(x, lambda g: g * keep)])
