"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed (float64 for training/verification, float32 for
speed paths). Each op that has a differentiable input records its parents
and a vector-Jacobian closure on the output node; `backward` replays the
implicit tape in reverse topological order. Nodes whose inputs carry no
gradient requirement skip graph construction entirely, so inference-mode
forwards build no tape.

Tensors are immutable after creation for graph purposes: training code may
swap `.data` in place only between forward passes, never while a tape that
references the tensor is still live.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

GELU_COEFF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)


class Tensor:
    """A numpy array plus the autodiff bookkeeping for reverse mode."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, vjp):
    """Build an op output; drop the tape record when no parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[M,K] @ b[K,N]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is a 1-D bias on the last axis."""
    bias = b.data.ndim == 1 and a.data.ndim > 1
    if bias:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"bias length {b.shape} does not match last axis of {a.shape}")
    elif a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(g):
        gb = g.sum(axis=tuple(range(g.ndim - 1))) if bias else g
        return g, gb

    return _result(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, identical shapes only."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _result(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-length vectors, as a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _result(out, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along the last axis; NaN inputs are rejected."""
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("softmax is defined along the last axis only")
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _result(out, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    """log(softmax(x)) along the last axis, stable for widely spread logits."""
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis of {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gain.data
        gx = (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), vjp)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    u = GELU_SCALE * (x.data + GELU_COEFF * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return _result(out, (x,), vjp)


def tsum(x: Tensor, axis=None) -> Tensor:
    """Sum to a scalar (axis=None) or reduce the last axis (axis=-1)."""
    if axis is None:
        out = x.data.sum()

        def vjp(g):
            return (np.full(x.shape, g, dtype=x.dtype),)

    elif axis in (-1, x.data.ndim - 1):
        out = x.data.sum(axis=-1)

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, -1), x.shape).copy(),)

    else:
        raise ShapeError("tsum supports axis None or the last axis")
    return _result(out, (x,), vjp)


def tmean(x: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    size = x.data.size
    out = x.data.mean()

    def vjp(g):
        return (np.full(x.shape, g / size, dtype=x.dtype),)

    return _result(out, (x,), vjp)


def mask_fill(x: Tensor, keep, fill: float) -> Tensor:
    """Replace entries where `keep` is False with `fill` (a constant)."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise ShapeError(f"mask shape {keep.shape} differs from tensor shape {x.shape}")
    out = np.where(keep, x.data, x.dtype.type(fill))

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return _result(out, (x,), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on training paths."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {p}")
    if p == 0.0:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)

    def vjp(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), vjp)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup out[i] = table[ids[i]]; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix table, got {table.shape}")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(out, (table,), vjp)


def take_pairs(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[i], cols[i]] into a vector; used for picking target logits."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = x.data[rows, cols]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result(out, (x,), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for shape {x.shape}")
    out = x.data[start:stop].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _result(out, (x,), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for shape {x.shape}")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(out, (x,), vjp)


def concat_cols(tensors) -> Tensor:
    """Concatenate matrices along axis 1 (head merge)."""
    tensors = list(tensors)
    heights = {t.shape[0] for t in tensors}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols needs equal heights, got {sorted(heights)}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(out, tuple(tensors), vjp)


def stack(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _result(out, tuple(tensors), vjp)


def concat_rows(tensors) -> Tensor:
    """Concatenate matrices along axis 0."""
    tensors = list(tensors)
    widths = {t.shape[-1] for t in tensors}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows needs equal widths, got {sorted(widths)}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _result(out, tuple(tensors), vjp)


def backward(loss: Tensor, params) -> dict:
    """Gradients of a scalar loss with respect to each marked parameter.

    Parameters not reachable from the loss get zero gradients. Gradients are
    accumulated in a side table keyed by node identity, so tensors stay
    immutable and only the marked parameters' gradients are returned.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("backward called with an unmarked parameter")

    # iterative DFS: deep tapes (long training graphs) must not hit the
    # recursion limit
    topo: list[Tensor] = []
    visited: set[int] = set()
    work = [loss]
    while work:
        node = work[-1]
        if id(node) in visited:
            work.pop()
            continue
        pending = [p for p in node._parents if id(p) not in visited and p.requires_grad]
        if pending:
            work.extend(pending)
        else:
            visited.add(id(node))
            topo.append(node)
            work.pop()

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
    return out
