"""Small dense reverse-mode autodiff kernel, Adam, gradient checking and checkpoints.

Every value is a 2-D float64 array. Values are created inside a
:class:`Recording`; each operation appends a node, so the node list is already
in topological order and ``backward`` just walks it in reverse.
"""
import json
import struct

import numpy as np

from .errors import InputDataError, NumericError, ShapeError


class Recording:
    """Tape of operations. Parameters are registered leaves addressed by name."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, name, array):
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        v = self._leaf(array)
        v.name = name
        self.params[name] = v
        return v

    def const(self, array):
        return self._leaf(array)

    def _leaf(self, array):
        data = np.asarray(array, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim != 2:
            raise ShapeError("leaf", data.shape)
        return self._push(data, (), None)

    def _push(self, data, parents, backward_fn):
        v = DiffValue(self, data, parents, backward_fn, len(self.nodes))
        self.nodes.append(v)
        return v


class DiffValue:
    __slots__ = ("rec", "data", "parents", "backward_fn", "index", "name")

    def __init__(self, rec, data, parents, backward_fn, index):
        self.rec = rec
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index
        self.name = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError("item", self.data.shape)
        return float(self.data[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffValue):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"DiffValue(shape={self.shape}, name={self.name})"


def _rec(*values):
    rec = values[0].rec
    for v in values[1:]:
        if v.rec is not rec:
            raise ValueError("operands belong to different recordings")
    return rec


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise -------------------------------------------------------------

def add(a, b):
    rec = _rec(a, b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return rec._push(a.data + b.data, (a, b), back)


def sub(a, b):
    rec = _rec(a, b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return rec._push(a.data - b.data, (a, b), back)


def mul(a, b):
    """Elementwise product with broadcasting (e.g. an (n,1) column times (n,d))."""
    rec = _rec(a, b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return rec._push(a.data * b.data, (a, b), back)


def scale(a, c):
    c = float(c)
    return a.rec._push(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(a, slope=0.1):
    factor = np.where(a.data > 0, 1.0, slope)
    return a.rec._push(a.data * factor, (a,), lambda g: (g * factor,))


def hinge(x, margin):
    """``max(x + margin, 0)`` elementwise."""
    z = x.data + margin
    active = (z > 0).astype(np.float64)
    return x.rec._push(z * active, (x,), lambda g: (g * active,))


# --- linear algebra ----------------------------------------------------------

def matmul(a, b):
    rec = _rec(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return rec._push(a.data @ b.data, (a, b), back)


def transpose(a):
    return a.rec._push(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(a, b):
    """Side-by-side concatenation: (n, p) and (n, q) -> (n, p + q)."""
    rec = _rec(a, b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError("concat_cols", a.shape, b.shape)
    p = a.shape[1]
    return rec._push(np.hstack([a.data, b.data]), (a, b), lambda g: (g[:, :p], g[:, p:]))


def concat_rows(a, b):
    """Stacked concatenation: (m, d) and (n, d) -> (m + n, d)."""
    rec = _rec(a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("concat_rows", a.shape, b.shape)
    m = a.shape[0]
    return rec._push(np.vstack([a.data, b.data]), (a, b), lambda g: (g[:m], g[m:]))


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    return a.rec._push(a.data[idx], (a,), back)


def scatter_add_rows(a, idx, n):
    """Sum rows of ``a`` into an (n, cols) result at positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError("scatter_add_rows", a.shape, idx.shape)
    out = np.zeros((n, a.shape[1]))
    np.add.at(out, idx, a.data)
    return a.rec._push(out, (a,), lambda g: (g[idx],))


def row_sum(a):
    return a.rec._push(a.data.sum(axis=1, keepdims=True), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_all(a):
    return a.rec._push(a.data.sum().reshape(1, 1), (a,),
                       lambda g: (np.full(a.shape, g[0, 0]),))


def row_dot(a, b):
    """Per-row inner product of two (n, d) values -> (n, 1)."""
    if a.shape != b.shape:
        raise ShapeError("row_dot", a.shape, b.shape)
    return row_sum(mul(a, b))


def row_l2(a):
    """Per-row Euclidean norm -> (n, 1). The subgradient at a zero row is taken as 0."""
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)

    def back(g):
        return (np.where(norms > 0, g * a.data / safe, 0.0),)

    return a.rec._push(norms, (a,), back)


def segment_softmax(logits, segments, n_segments):
    """Softmax of an (E, 1) column within groups given by ``segments``.

    Uses per-group max subtraction; groups with no members are simply absent.
    """
    segments = np.asarray(segments, dtype=np.int64)
    x = logits.data[:, 0]
    if logits.shape[1] != 1 or segments.shape != x.shape:
        raise ShapeError("segment_softmax", logits.shape, segments.shape)
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, segments, x)
    ex = np.exp(x - seg_max[segments])
    denom = np.zeros(n_segments)
    np.add.at(denom, segments, ex)
    p = ex / denom[segments]

    def back(g):
        g = g[:, 0]
        weighted = np.zeros(n_segments)
        np.add.at(weighted, segments, g * p)
        return ((p * (g - weighted[segments]))[:, None],)

    return logits.rec._push(p[:, None], (logits,), back)


# --- scalar conveniences -----------------------------------------------------

def dot(a, b):
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return sum_all(mul(a, b))


def l2_norm_diff(a, b):
    if a.shape != b.shape or a.shape[0] != 1:
        raise ShapeError("l2_norm_diff", a.shape, b.shape)
    return row_l2(sub(a, b))


def cosine(a, b):
    rec = _rec(a, b)
    if a.shape != b.shape:
        raise ShapeError("cosine", a.shape, b.shape)
    na = float(np.sqrt((a.data ** 2).sum()))
    nb = float(np.sqrt((b.data ** 2).sum()))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine of a zero-norm vector is undefined")
    c = float((a.data * b.data).sum()) / (na * nb)

    def back(g):
        g = g[0, 0]
        return (g * (b.data / (na * nb) - c * a.data / na ** 2),
                g * (a.data / (na * nb) - c * b.data / nb ** 2))

    return rec._push(np.array([[c]]), (a, b), back)


def softmax_over(values):
    """Softmax of a list of scalar values; returns a list of scalar values."""
    if not values:
        raise ValueError("softmax_over needs at least one value")
    col = values[0]
    if col.shape != (1, 1):
        raise ShapeError("softmax_over", col.shape)
    for v in values[1:]:
        if v.shape != (1, 1):
            raise ShapeError("softmax_over", v.shape)
        col = concat_rows(col, v)
    probs = segment_softmax(col, np.zeros(len(values), dtype=np.int64), 1)
    return [gather_rows(probs, [i]) for i in range(len(values))]


# --- backward ----------------------------------------------------------------

def backward(loss):
    """Gradients of a scalar ``loss`` for every registered parameter of its recording.

    Parameters the loss does not depend on get zero arrays.
    """
    if loss.shape != (1, 1):
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    rec = loss.rec
    grads = {loss.index: np.ones((1, 1))}
    for node in reversed(rec.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.name is not None:
            grads[node.index] = g  # keep leaf gradients
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    return {name: grads.get(v.index, np.zeros_like(v.data)) for name, v in rec.params.items()}


# --- gradient checking -------------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_error, per_param, checked):
        self.max_rel_error = max_rel_error
        self.per_param = per_param
        self.checked = checked

    def passed(self, tol):
        return self.max_rel_error <= tol

    def __repr__(self):
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, checked={self.checked})"


def finite_diff_check(fn, params, h=1e-5, max_coords=64, seed=0, floor=1e-6):
    """Compare ``backward`` against central differences.

    ``fn(rec, leaves)`` builds a scalar loss from the registered leaves. At most
    ``max_coords`` coordinates per parameter are probed (seeded subsample).
    The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values):
        rec = Recording()
        leaves = {k: rec.param(k, v) for k, v in values.items()}
        return rec, fn(rec, leaves)

    _, loss = run(params)
    analytic = backward(loss)
    rng = np.random.default_rng(seed)
    per_param = {}
    checked = 0
    for name, value in params.items():
        n = value.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        worst = 0.0
        for c in coords:
            flat = value.reshape(-1)
            orig = flat[c]
            flat[c] = orig + h
            up = run(params)[1].item()
            flat[c] = orig - h
            down = run(params)[1].item()
            flat[c] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
        per_param[name] = worst
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, checked)


# --- Adam --------------------------------------------------------------------

class AdamState:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.step = 0


def adam_step(state, params, grads, lr):
    """In-place Adam update of ``params`` (name -> array) for the names in ``grads``.

    A parameter whose gradient is identically zero keeps its value; its moments
    still decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step[{name}]", params[name].shape, g.shape)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if not g.any():
            continue
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# --- checkpoint format -------------------------------------------------------

MAGIC = b"MKGCCKPT"


def save_tensors(path, tensors, meta=None):
    """Write named float64 tensors: magic, u64 header length, JSON header, raw LE data."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_tensors(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise InputDataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[e["name"]] = arr.astype(np.float64)
    return tensors, header["meta"]
