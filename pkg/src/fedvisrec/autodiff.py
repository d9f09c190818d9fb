"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Graph`` is a flat tape: ops append records in execution order, and
``backward`` replays them in exact reverse insertion order, so gradients are
bit-reproducible.  Tensors are immutable once produced; arrays allocated by
ops are marked read-only.

Only the operations the simulator needs are provided (no general
broadcasting, no higher-order derivatives, CPU only).
"""

from __future__ import annotations

import numpy as np

from .errors import NonBinaryLabel, NotScalarLoss, ShapeMismatch

BCE_CLAMP = 1e-12


def _own(arr):
    """Mark a freshly-allocated array read-only and hand it back."""
    arr = np.asarray(arr, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d; keep their shape.
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class Tensor:
    """A dense float64 array, optionally attached to a tape."""

    __slots__ = ("data", "graph", "trainable", "name")

    def __init__(self, data, graph=None, trainable=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Small operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, name=None):
    """A tensor that participates in no graph (no gradient ever)."""
    return Tensor(data, graph=None, trainable=False, name=name)


class Graph:
    """Flat op tape.  Insertion order is the topological order."""

    __slots__ = ("nodes", "leaves")

    def __init__(self):
        self.nodes = []   # (out_tensor, input_tensors, backward_fn)
        self.leaves = []  # trainable parameter tensors, in creation order

    def leaf(self, data, name=None):
        t = Tensor(np.array(data, dtype=np.float64), graph=self, trainable=True, name=name)
        self.leaves.append(t)
        return t

    def _record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))
        return out


def _graph_of(*tensors):
    """The unique graph the inputs belong to, or None for pure constants."""
    g = None
    for t in tensors:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise ValueError("op mixes tensors from two different graphs")
    return g


def _emit(g, out_data, inputs, backward_fn):
    out = Tensor(_own(out_data), graph=g)
    if g is not None:
        g._record(out, inputs, backward_fn)
    return out


def backward(graph, loss):
    """Gradient of a scalar loss for every trainable leaf of the graph.

    Leaves the loss never touched get exact zero tensors.  Nodes are visited
    in exact reverse insertion order, so results are deterministic down to
    the bit.
    """
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.data.shape}")
    adjoint = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(graph.nodes):
        g_out = adjoint.pop(id(out), None)
        if g_out is None:
            continue
        for t, contrib in zip(inputs, backward_fn(g_out)):
            if contrib is None or t.graph is None:
                continue
            acc = adjoint.get(id(t))
            adjoint[id(t)] = contrib if acc is None else acc + contrib
    return {leaf: adjoint.get(id(leaf), np.zeros_like(leaf.data)) for leaf in graph.leaves}


# --- elementwise and structural ops ---

def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add {a.data.shape} vs {b.data.shape}")
    return _emit(_graph_of(a, b), a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"sub {a.data.shape} vs {b.data.shape}")
    return _emit(_graph_of(a, b), a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit(_graph_of(a, b), ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, k):
    k = float(k)
    return _emit(_graph_of(a), a.data * k, (a,), lambda g: (g * k,))


def square(a):
    ad = a.data
    return _emit(_graph_of(a), ad * ad, (a,), lambda g: (2.0 * ad * g,))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit(_graph_of(a, b), ad @ bd, (a, b),
                 lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")
    return _emit(_graph_of(a), a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.data.shape
    return _emit(_graph_of(a), a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(old),))


def sigmoid(x):
    xd = x.data
    # Stable in both tails: only ever exponentiates a non-positive argument.
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _emit(_graph_of(x), out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, slope=0.1):
    xd = x.data
    factor = np.where(xd > 0, 1.0, slope)
    return _emit(_graph_of(x), xd * factor, (x,), lambda g: (g * factor,))


def relu(x):
    return leaky_relu(x, slope=0.0)


def sum_all(x):
    shape = x.data.shape
    return _emit(_graph_of(x), np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full(shape, float(g)),))


def mean_all(x):
    shape = x.data.shape
    n = x.data.size
    return _emit(_graph_of(x), np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def concat(parts, axis=0):
    if not parts:
        raise ShapeMismatch("concat of zero parts")
    ref = parts[0].data.shape
    for p in parts[1:]:
        got = p.data.shape
        if len(got) != len(ref) or any(
            got[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeMismatch(f"concat off-axis dims differ: {ref} vs {got}")
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _emit(_graph_of(*parts), np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), bwd)


def gather_rows(x, indices):
    """Select rows of a 2-D tensor.  Backward scatter-adds into the source."""
    if x.data.ndim != 2:
        raise ShapeMismatch("gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.data.shape

    def bwd(g):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit(_graph_of(x), x.data[idx], (x,), bwd)


def broadcast_rows(v, n):
    """Repeat a length-m vector into an (n, m) matrix; backward sums rows."""
    if v.data.ndim != 1:
        raise ShapeMismatch("broadcast_rows expects a 1-D tensor")
    return _emit(_graph_of(v), np.broadcast_to(v.data, (n, v.data.shape[0])), (v,),
                 lambda g: (g.sum(axis=0),))


def add_bias(x, b):
    """(n, m) + (m,) with backward summing the bias gradient over rows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"add_bias {x.data.shape} + {b.data.shape}")
    return _emit(_graph_of(x, b), x.data + b.data, (x, b),
                 lambda g: (g, g.sum(axis=0)))


def add_channel(x, c):
    """(N, C, H, W) + per-channel (C,) vector broadcast over N, H, W."""
    if x.data.ndim != 4 or c.data.ndim != 1 or x.data.shape[1] != c.data.shape[0]:
        raise ShapeMismatch(f"add_channel {x.data.shape} + {c.data.shape}")
    return _emit(_graph_of(x, c), x.data + c.data[None, :, None, None], (x, c),
                 lambda g: (g, g.sum(axis=(0, 2, 3))))


def add_channel_rows(x, c):
    """(N, C, H, W) + per-sample per-channel (N, C) bias broadcast over H, W."""
    if x.data.ndim != 4 or c.data.ndim != 2 or x.data.shape[:2] != c.data.shape:
        raise ShapeMismatch(f"add_channel_rows {x.data.shape} + {c.data.shape}")
    return _emit(_graph_of(x, c), x.data + c.data[:, :, None, None], (x, c),
                 lambda g: (g, g.sum(axis=(2, 3))))


def bce_loss(r_hat, r):
    """Summed binary cross-entropy with predictions clamped away from 0/1.

    Labels must be exactly 0 or 1.  The clamp is part of the function being
    differentiated: coordinates that hit the clamp get zero gradient.
    """
    if r_hat.data.shape != r.data.shape:
        raise ShapeMismatch(f"bce {r_hat.data.shape} vs {r.data.shape}")
    labels = r.data
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise NonBinaryLabel("labels must be exactly 0 or 1")
    clamped = np.clip(r_hat.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (r_hat.data > BCE_CLAMP) & (r_hat.data < 1.0 - BCE_CLAMP)
    loss = -(labels * np.log(clamped) + (1.0 - labels) * np.log1p(-clamped)).sum()

    def bwd(g):
        grad = np.where(inside, (clamped - labels) / (clamped * (1.0 - clamped)), 0.0)
        return (grad * float(g), None)

    return _emit(_graph_of(r_hat, r), np.asarray(loss), (r_hat, r), bwd)


# --- convolution stack (used by the visual extractor and the denoiser) ---

def _pad_nchw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride, h_out, w_out):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    return cols


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution on (N, C, H, W) with (C_out, C_in, kh, kw) kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and kernels")
    n, c_in, h, wdt = x.data.shape
    c_out, c_k, kh, kw = w.data.shape
    if c_k != c_in:
        raise ShapeMismatch(f"conv2d channels {c_in} vs kernel {c_k}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wdt + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeMismatch("conv2d output would be empty")

    xp = _pad_nchw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h_out * w_out, c_in * kh * kw)
    wf = w.data.reshape(c_out, -1)
    out = (cols2 @ wf.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        if b.data.shape != (c_out,):
            raise ShapeMismatch(f"conv2d bias {b.data.shape}")
        out = out + b.data[None, :, None, None]

    padded_shape = xp.shape

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        dw = (g2.T @ cols2).reshape(w.data.shape)
        dcols2 = g2 @ wf
        dcols = dcols2.reshape(n, h_out, w_out, c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, :, i, j]
        dx = dxp if padding == 0 else dxp[:, :, padding:-padding, padding:-padding]
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit(_graph_of(*inputs), out, inputs, bwd)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) mean over the spatial grid."""
    if x.data.ndim != 4:
        raise ShapeMismatch("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.data.shape

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _emit(_graph_of(x), x.data.mean(axis=(2, 3)), (x,), bwd)


# --- gradient oracle ---

def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.  The
    analytic gradient comes from the tape; the numeric one from central
    differences coordinate by coordinate.  Error at coordinate i is
    ``|analytic_i - numeric_i| / (|analytic_i| + 1e-8)``.
    """
    x = np.asarray(x, dtype=np.float64)
    g = Graph()
    xt = g.leaf(x)
    analytic = backward(g, f(xt))[xt]

    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = float(f(constant(bumped.reshape(x.shape))).data)
        bumped[i] = flat[i] - h
        f_minus = float(f(constant(bumped.reshape(x.shape))).data)
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst
