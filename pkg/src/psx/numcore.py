"""Array values with reverse-mode differentiation, parameter storage,
a finite-difference gradient checker, and the binary checkpoint format.

Values are numpy arrays (scalars have shape ()). Each op below returns a
Node that remembers its parents and a backward closure; calling
``backward`` on a scalar node fills the gradient accumulator of every
parameter slot on the path. A recorded graph supports exactly one
forward/backward pass and is then discarded.

Shape conventions: ops act on the last axis, so the same code handles a
single vector (D,), a batch of rows (B, D), or per-position batches
(B, T, D). There is no general broadcasting; the few cross-shape ops
(mul_last, repeat_time, weighted_sum) are listed explicitly.

Precision: gradient checks require float64 stores; training may use
float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12
CKPT_MAGIC = b"PSXCKPT1"

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}
_CODE_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(ValueError):
    """Checkpoint file is missing the magic header or is inconsistent."""


class Node:
    """One value in a recorded computation graph."""

    __slots__ = ("data", "parents", "grad", "requires_grad", "_bwd", "_param")

    def __init__(self, data, parents=(), bwd=None, param=None):
        self.data = data
        self.parents = parents
        self.grad = None
        self._bwd = bwd
        self._param = param
        self.requires_grad = param is not None or any(
            p.requires_grad for p in parents
        )

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Node(shape={self.data.shape}, dtype={self.data.dtype})"


def as_node(x, dtype=None):
    """Wrap a raw array/scalar as a constant leaf; pass Nodes through."""
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind not in "fiu":
        raise ValueError(f"unsupported dtype {arr.dtype}")
    return Node(arr)


def _acc(node, g):
    # `+` (never `+=`) so gradients shared between parents are not mutated.
    if node.requires_grad:
        node.grad = g if node.grad is None else node.grad + g


def _require_finite(name, arr):
    if arr.size == 0:
        raise ValueError(f"{name}: empty input")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite entries in input")


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def affine(w, x, b):
    """w x + b on the last axis: x (..., n), w (m, n), b (m,) -> (..., m)."""
    w, x, b = as_node(w), as_node(x), as_node(b)
    m, n = w.data.shape
    if x.data.shape[-1] != n or b.data.shape != (m,):
        raise ValueError(
            f"affine: shapes w{w.data.shape} x{x.data.shape} b{b.data.shape}"
        )
    out = Node(x.data @ w.data.T + b.data, (w, x, b))

    def bwd(g):
        gm = g.reshape(-1, m)
        _acc(w, gm.T @ x.data.reshape(-1, n))
        _acc(x, (g @ w.data).reshape(x.data.shape))
        _acc(b, gm.sum(axis=0))

    out._bwd = bwd
    return out


def linear(w, x):
    """w x without bias: x (..., n), w (m, n) -> (..., m)."""
    w, x = as_node(w), as_node(x)
    m, n = w.data.shape
    if x.data.shape[-1] != n:
        raise ValueError(f"linear: shapes w{w.data.shape} x{x.data.shape}")
    out = Node(x.data @ w.data.T, (w, x))

    def bwd(g):
        _acc(w, g.reshape(-1, m).T @ x.data.reshape(-1, n))
        _acc(x, (g @ w.data).reshape(x.data.shape))

    out._bwd = bwd
    return out


def matvec(x, v):
    """x . v on the last axis: x (..., n), v (n,) -> (...)."""
    x, v = as_node(x), as_node(v)
    n = v.data.shape[0]
    if v.data.ndim != 1 or x.data.shape[-1] != n:
        raise ValueError(f"matvec: shapes x{x.data.shape} v{v.data.shape}")
    out = Node(x.data @ v.data, (x, v))

    def bwd(g):
        _acc(x, g[..., None] * v.data)
        _acc(v, (g[..., None] * x.data).reshape(-1, n).sum(axis=0))

    out._bwd = bwd
    return out


def _same_shape_op(name, a, b, data, da, db):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{name}: shapes {a.data.shape} vs {b.data.shape}")
    out = Node(data, (a, b))

    def bwd(g):
        _acc(a, da(g))
        _acc(b, db(g))

    out._bwd = bwd
    return out


def add(a, b):
    a, b = as_node(a), as_node(b)
    return _same_shape_op("add", a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _same_shape_op("sub", a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _same_shape_op(
        "mul", a, b, a.data * b.data,
        lambda g: g * b.data, lambda g: g * a.data,
    )


def mul_last(x, s):
    """x scaled along the last axis: x (..., K) * s (..., 1)."""
    x, s = as_node(x), as_node(s)
    if s.data.shape != x.data.shape[:-1] + (1,):
        raise ValueError(f"mul_last: shapes x{x.data.shape} s{s.data.shape}")
    out = Node(x.data * s.data, (x, s))

    def bwd(g):
        _acc(x, g * s.data)
        _acc(s, (g * x.data).sum(axis=-1, keepdims=True))

    out._bwd = bwd
    return out


def scale(x, c):
    """x * c for a python scalar c."""
    x = as_node(x)
    c = float(c)
    out = Node(x.data * np.asarray(c, dtype=x.data.dtype), (x,))
    out._bwd = lambda g: _acc(x, g * c)
    return out


def one_minus(x):
    """1 - x elementwise."""
    x = as_node(x)
    one = np.asarray(1.0, dtype=x.data.dtype)
    out = Node(one - x.data, (x,))
    out._bwd = lambda g: _acc(x, -g)
    return out


def tanh(x):
    x = as_node(x)
    y = np.tanh(x.data)
    out = Node(y, (x,))
    out._bwd = lambda g: _acc(x, g * (1.0 - y * y))
    return out


def sigmoid(x):
    """1 / (1 + exp(-x)) as exp(-log(1 + exp(-x))); no overflow on either tail."""
    x = as_node(x)
    y = np.exp(-np.logaddexp(0.0, -x.data))
    out = Node(y, (x,))
    out._bwd = lambda g: _acc(x, g * y * (1.0 - y))
    return out


def relu(x):
    x = as_node(x)
    out = Node(np.maximum(x.data, 0), (x,))
    out._bwd = lambda g: _acc(x, g * (x.data > 0))
    return out


def log_floor(x, floor=PROB_FLOOR):
    """log(max(x, floor)); gradient is zero where the floor is active."""
    x = as_node(x)
    clipped = np.maximum(x.data, floor)
    out = Node(np.log(clipped), (x,))
    out._bwd = lambda g: _acc(x, g * (x.data > floor) / clipped)
    return out


def softmax(x):
    """Distribution over the last axis, max-subtracted for stability.

    Rejects empty or non-finite input; every output slice sums to 1
    within 1e-12 at float64 (1e-6 at float32).
    """
    x = as_node(x)
    _require_finite("softmax", x.data)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Node(y, (x,))

    def bwd(g):
        _acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._bwd = bwd
    return out


def concat(xs):
    """Concatenate along the last axis."""
    xs = [as_node(x) for x in xs]
    if not xs:
        raise ValueError("concat: no inputs")
    widths = [x.data.shape[-1] for x in xs]
    out = Node(np.concatenate([x.data for x in xs], axis=-1), tuple(xs))
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        for x, piece in zip(xs, np.split(g, splits, axis=-1)):
            _acc(x, piece)

    out._bwd = bwd
    return out


def stack_time(xs):
    """Stack T tensors of shape (B, D) into (B, T, D)."""
    xs = [as_node(x) for x in xs]
    out = Node(np.stack([x.data for x in xs], axis=1), tuple(xs))

    def bwd(g):
        for t, x in enumerate(xs):
            _acc(x, g[:, t, :])

    out._bwd = bwd
    return out


def repeat_time(q, t):
    """Tile (B, D) to (B, T, D); backward sums over the tiled axis."""
    q = as_node(q)
    b, d = q.data.shape
    out = Node(np.broadcast_to(q.data[:, None, :], (b, t, d)), (q,))
    out._bwd = lambda g: _acc(q, g.sum(axis=1))
    return out


def weighted_sum(w, a):
    """Mix positions: w (B, T), a (B, T, D) -> sum_t w[b,t] a[b,t] (B, D)."""
    w, a = as_node(w), as_node(a)
    if w.data.shape != a.data.shape[:2]:
        raise ValueError(f"weighted_sum: shapes w{w.data.shape} a{a.data.shape}")
    out = Node(np.einsum("bt,btd->bd", w.data, a.data), (w, a))

    def bwd(g):
        _acc(w, np.einsum("bd,btd->bt", g, a.data))
        _acc(a, w.data[:, :, None] * g[:, None, :])

    out._bwd = bwd
    return out


def embed(table, ids):
    """Row lookup: table (V, E), integer ids (...,) -> (..., E)."""
    table = as_node(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError("embed: ids must be integers")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"embed: id out of range [0, {v})")
    out = Node(table.data[ids], (table,))

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _acc(table, dt)

    out._bwd = bwd
    return out


def pick(x, ids):
    """Select one entry per last-axis slice: x (..., K), ids (...) -> (...)."""
    x = as_node(x)
    ids = np.asarray(ids)
    if ids.shape != x.data.shape[:-1]:
        raise ValueError(f"pick: ids shape {ids.shape} vs x {x.data.shape}")
    k = x.data.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise ValueError(f"pick: index out of range [0, {k})")
    out = Node(np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0], (x,))

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, ids[..., None], g[..., None], axis=-1)
        _acc(x, dx)

    out._bwd = bwd
    return out


def cross_entropy(logits, ids):
    """-log softmax(logits)[id] per slice, via a stable log-sum-exp."""
    logits = as_node(logits)
    ids = np.asarray(ids)
    if ids.shape != logits.data.shape[:-1]:
        raise ValueError("cross_entropy: ids shape mismatch")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[..., 0] + np.log(e.sum(axis=-1))
    picked = np.take_along_axis(logits.data, ids[..., None], axis=-1)[..., 0]
    out = Node(lse - picked, (logits,))

    def bwd(g):
        p = e / e.sum(axis=-1, keepdims=True)
        np.put_along_axis(
            p, ids[..., None],
            np.take_along_axis(p, ids[..., None], axis=-1) - 1.0, axis=-1,
        )
        _acc(logits, p * g[..., None])

    out._bwd = bwd
    return out


def sum_all(x):
    """Sum every element down to a scalar ()."""
    x = as_node(x)
    out = Node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))
    out._bwd = lambda g: _acc(x, np.full(x.data.shape, g, dtype=x.data.dtype))
    return out


def mean_all(x):
    x = as_node(x)
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Reverse-sweep from a scalar node; adds into ParamStore accumulators.

    Repeated calls on separately recorded graphs accumulate additively.
    """
    if not isinstance(loss, Node) or loss.data.size != 1:
        raise ValueError("backward: loss must be a scalar node")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is None:
            continue
        if node._bwd is not None:
            node._bwd(node.grad)
        if node._param is not None:
            store, name = node._param
            store.grads[name] += node.grad


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter slots, each paired with a same-shape gradient buffer.

    Mutation (gradient accumulation, optimizer steps) is single-writer;
    concurrent read-only forward passes are safe.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self.values:
            raise ValueError(f"duplicate parameter slot {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def node(self, name):
        return Node(self.values[name], param=(self, name))

    def nodes(self):
        """Fresh leaf nodes for one recorded graph."""
        return {name: self.node(name) for name in self.values}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def names(self):
        return sorted(self.values)

    def num_params(self):
        return sum(v.size for v in self.values.values())

    def copy_values(self):
        return {k: v.copy() for k, v in self.values.items()}

    def load_values(self, values):
        for k, v in values.items():
            if k not in self.values or self.values[k].shape != v.shape:
                raise ValueError(f"slot mismatch loading {k!r}")
            self.values[k][...] = v

    def astype(self, dtype):
        out = ParamStore(dtype)
        for k, v in self.values.items():
            out.add(k, v)
        return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst_slot(self):
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def worst_error(self):
        return self.errors.get(self.worst_slot, 0.0)

    @property
    def failures(self):
        return sorted(k for k, v in self.errors.items() if v > self.tolerance)

    @property
    def passed(self):
        return not self.failures

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: worst slot {self.worst_slot!r} "
            f"rel err {self.worst_error:.3e} (tol {self.tolerance:g})"
        )


def grad_check(loss_fn, store, tolerance=1e-4, eps=1e-5):
    """Compare analytic gradients with central finite differences.

    loss_fn(store) must rebuild the graph from current parameter values and
    return a scalar node, deterministically. Per element i the numeric
    gradient is (f(p + eps e_i) - f(p - eps e_i)) / 2 eps; the report holds
    each slot's worst relative error |a - n| / max(|a|, |n|, 1e-8). Never
    raises on tolerance failures; the report names the offending slots.
    """
    if store.dtype != np.float64:
        raise ValueError("grad_check requires a float64 ParamStore")
    store.zero_grads()
    loss = loss_fn(store)
    backward(loss)
    analytic = {k: store.grads[k].copy() for k in store.values}
    report = GradCheckReport(tolerance=tolerance)
    for name in store.names():
        flat = store.values[name].reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn(store).data)
            flat[i] = orig - eps
            fm = float(loss_fn(store).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.errors[name] = worst
    return report


# ---------------------------------------------------------------------------
# Checkpoint format: magic, little-endian uint64 header length, JSON header
# {"meta": ..., "slots": [{name, shape, dtype, offset}]}, raw slot bytes.
# ---------------------------------------------------------------------------


def save_checkpoint(path, store, meta=None):
    slots = []
    blobs = []
    offset = 0
    for name in store.names():
        arr = np.ascontiguousarray(store.values[name])
        code = _DTYPE_CODES[arr.dtype.name]
        raw = arr.astype(code, copy=False).tobytes()
        slots.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "slots": slots}, sort_keys=True)
    payload = header.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (ParamStore, meta). Raises CheckpointError on a bad file."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(
                f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC.decode()}"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    slots = header["slots"]
    if slots:
        dtypes = {s["dtype"] for s in slots}
        if len(dtypes) > 1:
            raise CheckpointError(f"{path}: mixed slot dtypes {sorted(dtypes)}")
        store = ParamStore(_CODE_DTYPES[slots[0]["dtype"]])
    else:
        store = ParamStore()
    for s in slots:
        shape = tuple(s["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            body, dtype=s["dtype"], count=count, offset=s["offset"]
        ).reshape(shape)
        store.add(s["name"], arr)
    return store, header["meta"]
