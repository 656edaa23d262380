"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Graph`` is an append-only tape: every differentiable op pushes one
record, so insertion order is already a topological order and the backward
pass is a single reverse sweep.  Tensors created outside a graph are plain
values; ops on them just compute numpy results without recording.

Everything is float64.  Convolutions are fixed to the one case the
embedding architecture uses: 3x3 kernels, stride 1, zero padding 1.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, ShapeError

_F64 = np.float64


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=_F64)
    return arr


class Tensor:
    """A dense array, optionally attached to a recording graph.

    ``grad`` is populated by ``Graph.backward`` and mirrors ``data``'s shape.
    """

    __slots__ = ("data", "grad", "graph", "node_id")

    def __init__(self, data, graph: "Graph | None" = None, node_id: int | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"


class Record:
    """One tape entry: op name, input/output node ids, backward closure."""

    __slots__ = ("op", "input_ids", "out", "backward_fn")

    def __init__(self, op, input_ids, out, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of differentiable operations.

    Single-threaded per instance.  Leaves are registered with ``leaf``;
    after ``backward`` every leaf has a gradient (zeros if unused).
    """

    def __init__(self):
        self.records: list[Record] = []
        self._leaves: list[Tensor] = []
        self._next_id = 0

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data) -> Tensor:
        """Wrap an array as a watched leaf of this graph (no copy)."""
        t = Tensor(data, graph=self, node_id=self._new_id())
        self._leaves.append(t)
        return t

    def _record(self, op: str, inputs, out_data: np.ndarray, backward_fn) -> Tensor:
        out = Tensor(out_data, graph=self, node_id=self._new_id())
        ids = tuple(t.node_id for t in inputs if isinstance(t, Tensor) and t.graph is self)
        self.records.append(Record(op, ids, out, backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; accumulates grads on all nodes."""
        if loss.graph is not self:
            raise GraphError("loss tensor does not belong to this graph")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            rec.backward_fn(g)
        for t in self._leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _graph_of(*tensors) -> Graph | None:
    """The unique graph among the inputs, or None if all are plain values."""
    g = None
    for t in tensors:
        if isinstance(t, Tensor) and t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise GraphError("inputs recorded on different graphs")
    return g


def _accumulate(t, contrib: np.ndarray) -> None:
    if not isinstance(t, Tensor) or t.graph is None:
        return
    if t.grad is None:
        t.grad = contrib
    else:
        t.grad = t.grad + contrib


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else _as_array(t)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    da, db = _data(a), _data(b)
    out = da + db
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, _unbroadcast(gout, da.shape))
        _accumulate(b, _unbroadcast(gout, db.shape))

    return g._record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    da, db = _data(a), _data(b)
    out = da - db
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, _unbroadcast(gout, da.shape))
        _accumulate(b, _unbroadcast(-gout, db.shape))

    return g._record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    da, db = _data(a), _data(b)
    out = da * db
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, _unbroadcast(gout * db, da.shape))
        _accumulate(b, _unbroadcast(gout * da, db.shape))

    return g._record("mul", (a, b), out, bwd)


def neg(a) -> Tensor:
    g = _graph_of(a)
    out = -_data(a)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, -gout)

    return g._record("neg", (a,), out, bwd)


def scale(a, s: float) -> Tensor:
    g = _graph_of(a)
    out = _data(a) * s
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, gout * s)

    return g._record("scale", (a,), out, bwd)


def sqrt(a) -> Tensor:
    g = _graph_of(a)
    out = np.sqrt(_data(a))
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, gout * (0.5 / np.maximum(out, 1e-300)))

    return g._record("sqrt", (a,), out, bwd)


def log(a) -> Tensor:
    g = _graph_of(a)
    da = _data(a)
    out = np.log(da)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, gout / da)

    return g._record("log", (a,), out, bwd)


def sum_all(a) -> Tensor:
    g = _graph_of(a)
    da = _data(a)
    out = np.asarray(da.sum())
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, np.full_like(da, float(gout)))

    return g._record("sum_all", (a,), out, bwd)


def mean_all(a) -> Tensor:
    g = _graph_of(a)
    da = _data(a)
    n = da.size
    out = np.asarray(da.mean())
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, np.full_like(da, float(gout) / n))

    return g._record("mean_all", (a,), out, bwd)


def mean_axis0(a) -> Tensor:
    g = _graph_of(a)
    da = _data(a)
    n = da.shape[0]
    out = da.mean(axis=0)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, np.broadcast_to(gout / n, da.shape).copy())

    return g._record("mean_axis0", (a,), out, bwd)


def reshape(a, shape) -> Tensor:
    g = _graph_of(a)
    da = _data(a)
    out = da.reshape(shape)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, gout.reshape(da.shape))

    return g._record("reshape", (a,), out, bwd)


def swap_axes(a, ax0: int, ax1: int) -> Tensor:
    g = _graph_of(a)
    out = np.swapaxes(_data(a), ax0, ax1)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, np.swapaxes(gout, ax0, ax1))

    return g._record("swap_axes", (a,), out, bwd)


def index_select(a, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    g = _graph_of(a)
    da = _data(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = da[idx]
    if g is None:
        return Tensor(out)

    def bwd(gout):
        contrib = np.zeros_like(da)
        np.add.at(contrib, idx, gout)
        _accumulate(a, contrib)

    return g._record("index_select", (a,), out, bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    g = _graph_of(a)
    da = _data(a)
    sl = [slice(None)] * da.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = da[sl]
    if g is None:
        return Tensor(out)

    def bwd(gout):
        contrib = np.zeros_like(da)
        contrib[sl] = gout
        _accumulate(a, contrib)

    return g._record("narrow", (a,), out, bwd)


def stack0(tensors) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    g = _graph_of(*tensors)
    out = np.stack([_data(t) for t in tensors])
    if g is None:
        return Tensor(out)

    def bwd(gout):
        for i, t in enumerate(tensors):
            _accumulate(t, gout[i])

    return g._record("stack0", tuple(tensors), out, bwd)


def pick(a, indices) -> Tensor:
    """out[i] = a[i, indices[i]] for a 2-d tensor."""
    g = _graph_of(a)
    da = _data(a)
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(da.shape[0])
    out = da[rows, idx]
    if g is None:
        return Tensor(out)

    def bwd(gout):
        contrib = np.zeros_like(da)
        contrib[rows, idx] = gout
        _accumulate(a, contrib)

    return g._record("pick", (a,), out, bwd)


# ---------------------------------------------------------------------------
# neural-network ops


def _im2col3(x_padded: np.ndarray, height: int, width: int) -> np.ndarray:
    """All 3x3 windows of a padded NCHW batch as [N, C*9, H*W].

    Built from 9 shifted slice copies, which stream through memory in
    source order; the channels-first layout lets conv2d run as one batched
    GEMM with no transposed output copy.
    """
    n, c = x_padded.shape[0], x_padded.shape[1]
    cols = np.empty((n, c, 9, height * width))
    k = 0
    for i in range(3):
        for j in range(3):
            cols[:, :, k, :] = x_padded[:, :, i : i + height, j : j + width].reshape(
                n, c, height * width
            )
            k += 1
    return cols.reshape(n, c * 9, height * width)


def conv2d(x, kernel, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (same-size output).

    x: [N, Cin, H, W]; kernel: [Cout, Cin, 3, 3]; bias: [Cout].
    """
    g = _graph_of(x, kernel, bias)
    dx_, dk_, db_ = _data(x), _data(kernel), _data(bias)
    if dx_.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {dx_.shape}")
    if dk_.ndim != 4 or dk_.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be [Cout, Cin, 3, 3], got {dk_.shape}")
    n, cin, h, w = dx_.shape
    cout = dk_.shape[0]
    if dk_.shape[1] != cin:
        raise ShapeError(f"kernel expects {dk_.shape[1]} input channels, input has {cin}")
    if db_.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {db_.shape}")

    xp = np.pad(dx_, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, w)  # [N, Cin*9, H*W]
    wmat = dk_.reshape(cout, cin * 9)
    out = np.matmul(wmat, cols).reshape(n, cout, h, w)
    out += db_[None, :, None, None]
    if g is None:
        return Tensor(out)

    def bwd(gout):
        gmat = gout.reshape(n, cout, h * w)
        _accumulate(bias, gout.sum(axis=(0, 2, 3)))
        gk = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
        _accumulate(kernel, gk.reshape(cout, cin, 3, 3))
        if isinstance(x, Tensor) and x.graph is not None:
            gp = np.pad(gout, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gcols = _im2col3(gp, h, w)  # [N, Cout*9, H*W]
            wflip = dk_[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * 9)
            _accumulate(x, np.matmul(wflip, gcols).reshape(n, cin, h, w))

    return g._record("conv2d", (x, kernel, bias), out, bwd)



def batchnorm_batch(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize a NCHW batch by its own per-channel statistics.

    No running averages exist anywhere: the statistics always come from the
    batch passed in, so train and test behave identically by construction.
    Variance is the population (biased) variance over N*H*W.
    """
    g = _graph_of(x, gamma, beta)
    dx_, dg_, db_ = _data(x), _data(gamma), _data(beta)
    if dx_.ndim != 4:
        raise ShapeError(f"batchnorm input must be NCHW, got shape {dx_.shape}")
    c = dx_.shape[1]
    if dg_.shape != (c,) or db_.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    mean = dx_.mean(axis=axes, keepdims=True)
    var = dx_.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (dx_ - mean) * inv
    out = dg_[None, :, None, None] * xhat + db_[None, :, None, None]
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(beta, gout.sum(axis=axes))
        _accumulate(gamma, (gout * xhat).sum(axis=axes))
        if isinstance(x, Tensor) and x.graph is not None:
            gxhat = gout * dg_[None, :, None, None]
            mean_g = gxhat.mean(axis=axes, keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
            _accumulate(x, inv * (gxhat - mean_g - xhat * mean_gx))

    return g._record("batchnorm", (x, gamma, beta), out, bwd)


def relu(a) -> Tensor:
    g = _graph_of(a)
    da = _data(a)
    out = np.maximum(da, 0.0)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(a, gout * (da > 0.0))

    return g._record("relu", (a,), out, bwd)


def maxpool2(a) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd row/column is discarded.

    The gradient routes to the first maximal element of each window in
    row-major order (numpy argmax tie-breaking).
    """
    g = _graph_of(a)
    da = _data(a)
    if da.ndim != 4:
        raise ShapeError(f"maxpool2 input must be NCHW, got shape {da.shape}")
    n, c, h, w = da.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs H,W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    trimmed = da[:, :, : 2 * ho, : 2 * wo]
    windows = trimmed.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if g is None:
        return Tensor(out)

    def bwd(gout):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], gout[..., None], axis=-1)
        gtrim = gflat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gtrim = gtrim.reshape(n, c, 2 * ho, 2 * wo)
        if (h, w) == (2 * ho, 2 * wo):
            _accumulate(a, gtrim)
        else:
            full = np.zeros_like(da)
            full[:, :, : 2 * ho, : 2 * wo] = gtrim
            _accumulate(a, full)

    return g._record("maxpool2", (a,), out, bwd)


def linear(x, weight, bias) -> Tensor:
    """x @ weight.T + bias for x: [N, D], weight: [M, D], bias: [M]."""
    g = _graph_of(x, weight, bias)
    dx_, dw_, db_ = _data(x), _data(weight), _data(bias)
    if dx_.ndim != 2 or dw_.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if dx_.shape[1] != dw_.shape[1]:
        raise ShapeError(
            f"linear inner dimensions disagree: input {dx_.shape} vs weight {dw_.shape}"
        )
    if db_.shape != (dw_.shape[0],):
        raise ShapeError(f"bias must have shape ({dw_.shape[0]},), got {db_.shape}")
    out = dx_ @ dw_.T + db_
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(x, gout @ dw_)
        _accumulate(weight, gout.T @ dx_)
        _accumulate(bias, gout.sum(axis=0))

    return g._record("linear", (x, weight, bias), out, bwd)


def softmax(a) -> Tensor:
    """Softmax along the last axis, max-shifted for overflow safety."""
    g = _graph_of(a)
    da = _data(a)
    shifted = da - da.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        dot = (gout * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (gout - dot))

    return g._record("softmax", (a,), out, bwd)


def log_softmax(a) -> Tensor:
    """log(softmax) along the last axis, computed stably."""
    g = _graph_of(a)
    da = _data(a)
    shifted = da - da.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    if g is None:
        return Tensor(out)

    sm = np.exp(out)

    def bwd(gout):
        _accumulate(a, gout - sm * gout.sum(axis=-1, keepdims=True))

    return g._record("log_softmax", (a,), out, bwd)


def dropout_apply(x, mask: np.ndarray, keep: float) -> Tensor:
    """Inverted channel dropout: x[n,c] * mask[c] / keep.

    The mask is supplied by the caller (sampling lives in the model layer)
    and is not a differentiable input.
    """
    if keep <= 0.0:
        raise ValueError(f"keep probability must be positive, got {keep}")
    g = _graph_of(x)
    dx_ = _data(x)
    if dx_.ndim != 4:
        raise ShapeError(f"dropout input must be NCHW, got shape {dx_.shape}")
    m = np.asarray(mask, dtype=_F64)
    if m.shape != (dx_.shape[1],):
        raise ShapeError(f"mask must have shape ({dx_.shape[1]},), got {m.shape}")
    factor = (m / keep)[None, :, None, None]
    out = dx_ * factor
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(x, gout * factor)

    return g._record("dropout", (x,), out, bwd)


# ---------------------------------------------------------------------------
# distance ops


def euclidean_distance(a, b) -> Tensor:
    """sqrt of summed squared differences over all entries; a scalar."""
    g = _graph_of(a, b)
    da, db = _data(a), _data(b)
    if da.shape != db.shape:
        raise ShapeError(f"distance operands differ in shape: {da.shape} vs {db.shape}")
    diff = da - db
    out = np.asarray(np.sqrt((diff * diff).sum()))
    if g is None:
        return Tensor(out)

    def bwd(gout):
        d = max(float(out), 1e-300)
        contrib = (float(gout) / d) * diff
        _accumulate(a, contrib)
        _accumulate(b, -contrib)

    return g._record("euclidean_distance", (a, b), out, bwd)


def pairwise_distance(q, r) -> Tensor:
    """Euclidean distances between rows: q [N, D], r [C, D] -> [N, C]."""
    g = _graph_of(q, r)
    dq, dr = _data(q), _data(r)
    if dq.ndim != 2 or dr.ndim != 2 or dq.shape[1] != dr.shape[1]:
        raise ShapeError(f"pairwise_distance expects [N,D] and [C,D], got {dq.shape}, {dr.shape}")
    diff = dq[:, None, :] - dr[None, :, :]
    out = np.sqrt((diff * diff).sum(axis=-1))
    if g is None:
        return Tensor(out)

    def bwd(gout):
        w = gout / np.maximum(out, 1e-300)
        _accumulate(q, np.einsum("nc,ncd->nd", w, diff))
        _accumulate(r, -np.einsum("nc,ncd->cd", w, diff))

    return g._record("pairwise_distance", (q, r), out, bwd)


def weighted_sum_maps(stacks, weights) -> Tensor:
    """Per-batch-item weighted sum of maps: [B,m,h,w] x [B,m] -> [B,h,w]."""
    g = _graph_of(stacks, weights)
    ds, dw = _data(stacks), _data(weights)
    if ds.ndim != 4 or dw.ndim != 2 or ds.shape[:2] != dw.shape:
        raise ShapeError(f"weighted_sum_maps expects [B,m,h,w] and [B,m], got {ds.shape}, {dw.shape}")
    out = np.einsum("bm,bmhw->bhw", dw, ds)
    if g is None:
        return Tensor(out)

    def bwd(gout):
        _accumulate(weights, np.einsum("bhw,bmhw->bm", gout, ds))
        _accumulate(stacks, dw[:, :, None, None] * gout[:, None, :, :])

    return g._record("weighted_sum_maps", (stacks, weights), out, bwd)
