"""Minimal reverse-mode array engine.

A `Tensor` wraps a numpy array and, while gradient recording is enabled,
remembers its parents plus a vector-Jacobian closure. `backward` walks the
graph in reverse topological order. Only the operations the layers actually
need exist; there is no general broadcasting beyond what those need.
"""

from __future__ import annotations

import struct

import numpy as np

from .clifford import GRADE_OF_SLOT, STRUCTURE_TABLE
from .errors import ContractError, FormatError, IndexRangeError, ShapeError

_GRAD_ENABLED = True
_ALLOC_BYTES = 0
_ALLOC_TRACKING = False
_DEFAULT_DTYPE = np.float64


class precision:
    """Run tensor creation in f32 or f64 inside the with-block.

    Single precision exists for benchmarking; training and audits default to
    double precision.
    """

    def __init__(self, mode="f64"):
        if mode not in ("f32", "f64"):
            raise ContractError(f"precision must be 'f32' or 'f64', got {mode!r}")
        self._dtype = np.float32 if mode == "f32" else np.float64

    def __enter__(self):
        global _DEFAULT_DTYPE
        self._prev = _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._dtype
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._prev
        return False


class no_grad:
    """Disable tape recording inside the with-block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class track_allocations:
    """Count bytes of tensor data created inside the with-block."""

    def __enter__(self):
        global _ALLOC_BYTES, _ALLOC_TRACKING
        _ALLOC_BYTES = 0
        _ALLOC_TRACKING = True
        return self

    def __exit__(self, *exc):
        global _ALLOC_TRACKING
        _ALLOC_TRACKING = False
        self.bytes = _ALLOC_BYTES
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def _result(data, parents, vjp):
    global _ALLOC_BYTES
    out = Tensor(data)
    if _ALLOC_TRACKING:
        _ALLOC_BYTES += out.data.nbytes
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a):
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _result(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def sigmoid(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _result(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _result(out, (a,), vjp)


def mean(a):
    a = _as_tensor(a)
    n = a.data.size
    return _result(a.data.mean(), (a,), lambda g: (np.full(a.data.shape, g / n),))


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].data
    for t in tensors[1:]:
        if t.data.ndim != ref.ndim:
            raise ShapeError("concat", f"rank mismatch {ref.shape} vs {t.data.shape}")
        for ax in range(ref.ndim):
            if ax != axis % ref.ndim and t.data.shape[ax] != ref.shape[ax]:
                raise ShapeError("concat", f"extent mismatch {ref.shape} vs {t.data.shape}")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError("narrow", f"slice [{start},{start + length}) exceeds extent {a.data.shape[axis]}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _result(a.data[sl], (a,), vjp)


def reshape(a, shape):
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def linear(x, w, b=None):
    """x @ w.T (+ b) with x (N, in), w (out, in), b (out,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("linear", f"x {x.data.shape} incompatible with w {w.data.shape}")
    out = x.data @ w.data.T
    if b is None:
        return _result(out, (x, w), lambda g: (g @ w.data, g.T @ x.data))
    b = _as_tensor(b)
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError("linear", f"bias {b.data.shape} incompatible with w {w.data.shape}")
    return _result(
        out + b.data,
        (x, w, b),
        lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)),
    )


def gather(values, index):
    """values[index] along axis 0."""
    values = _as_tensor(values)
    index = np.asarray(index)
    n = values.data.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexRangeError(f"gather: index outside [0, {n})")

    def vjp(g):
        out = np.zeros_like(values.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(values.data[index], (values,), vjp)


def scatter_sum(values, index, n_targets):
    """Sum rows of `values` into `n_targets` buckets given by `index`."""
    values = _as_tensor(values)
    index = np.asarray(index)
    if index.shape != (values.data.shape[0],):
        raise ShapeError("scatter_sum", f"index shape {index.shape} vs values {values.data.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_targets):
        raise IndexRangeError(f"scatter_sum: index outside [0, {n_targets})")
    out = np.zeros((n_targets,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out, index, values.data)
    return _result(out, (values,), lambda g: (g[index],))


def mse(pred, target):
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError("mse", f"pred {pred.data.shape} vs target {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _result(
        np.asarray((diff * diff).mean()),
        (pred, target),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
    )


def grade_mix(v, w):
    """Grade-wise channel mixing: out[n,i,s] = sum_j w[grade(s),i,j] v[n,j,s].

    v: (N, c_in, 8), w: (4, c_out, c_in).
    """
    v, w = _as_tensor(v), _as_tensor(w)
    if v.data.ndim != 3 or v.data.shape[2] != 8:
        raise ShapeError("grade_mix", f"expected (N, c, 8) multivector array, got {v.data.shape}")
    if w.data.ndim != 3 or w.data.shape[0] != 4 or w.data.shape[2] != v.data.shape[1]:
        raise ShapeError("grade_mix", f"weights {w.data.shape} incompatible with input {v.data.shape}")
    w8 = w.data[GRADE_OF_SLOT]  # (8, c_out, c_in)
    out = np.einsum("sij,njs->nis", w8, v.data, optimize=True)

    def vjp(g):
        gv = np.einsum("sij,nis->njs", w8, g, optimize=True)
        gw8 = np.einsum("nis,njs->sij", g, v.data, optimize=True)
        gw = np.zeros_like(w.data)
        np.add.at(gw, GRADE_OF_SLOT, gw8)
        return (gv, gw)

    return _result(out, (v, w), vjp)


def geom_prod(a, b):
    """Channel-wise geometric product of two (N, c, 8) arrays."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 3 or a.data.shape[2] != 8:
        raise ShapeError("geom_prod", f"need matching (N, c, 8) arrays, got {a.data.shape} and {b.data.shape}")
    t = STRUCTURE_TABLE
    out = np.einsum("ijk,nci,ncj->nck", t, a.data, b.data, optimize=True)

    def vjp(g):
        ga = np.einsum("ijk,nck,ncj->nci", t, g, b.data, optimize=True)
        gb = np.einsum("ijk,nck,nci->ncj", t, g, a.data, optimize=True)
        return (ga, gb)

    return _result(out, (a, b), vjp)


def mv_norm(v):
    """Per-channel sqrt(quadratic form): (N, c, 8) -> (N, c).

    Gradient is defined as 0 at exactly 0 (subgradient choice).
    """
    v = _as_tensor(v)
    if v.data.ndim != 3 or v.data.shape[2] != 8:
        raise ShapeError("mv_norm", f"expected (N, c, 8), got {v.data.shape}")
    norm = np.sqrt((v.data * v.data).sum(axis=-1))

    def vjp(g):
        denom = np.where(norm > 0, norm, 1.0)
        return (g[..., None] * v.data / denom[..., None],)

    return _result(norm, (v,), vjp)


def backward(loss: Tensor):
    """Reverse accumulation from a scalar loss; fills .grad on reachable tensors."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward expects a scalar Tensor loss")
    topo, visited = [], set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


class ParameterStore:
    """Named trainable tensors with deterministic (sorted) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name, data, trainable=True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def trainable_items(self):
        return [(n, t) for n, t in self.items() if self._trainable[n]]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def n_values(self):
        return sum(t.data.size for _, t in self.items())


def adam_step(params: ParameterStore, grads=None, lr=1e-3, weight_decay=0.0,
              beta1=0.9, beta2=0.999, eps=1e-8, t=1, state=None):
    """One Adam step with decoupled weight decay. `state` holds (m, v) per name."""
    if state is None:
        state = {}
    for name, p in params.trainable_items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        g = np.asarray(g)
        if name not in state:
            state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[name] = (m, v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


CHECKPOINT_MAGIC = b"MVGN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterStore):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            for extent in t.data.shape:
                f.write(struct.pack("<Q", extent))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", offset=f.tell())
    return buf


def load_checkpoint(path):
    """Read a checkpoint into a name -> array dict."""
    out = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8, "extent"))[0] for _ in range(rank)
            )
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(f, 8 * n, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out


def load_into(path, params: ParameterStore):
    data = load_checkpoint(path)
    if set(data) != set(params.names()):
        missing = set(params.names()) ^ set(data)
        raise ContractError(f"checkpoint parameters do not match store: {sorted(missing)}")
    for name, arr in data.items():
        t = params[name]
        if t.data.shape != arr.shape:
            raise ContractError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
        t.data = arr.astype(np.float64)
