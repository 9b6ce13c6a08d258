"""Dense tanh networks on numpy with a small tape-free reverse-mode autodiff.

Graph nodes (:class:`Node`) wrap float64 arrays; every primitive records its
parents and a backward closure. :func:`value_and_grad` topologically sorts the
graph hanging off a scalar loss and accumulates gradients into a flat vector
laid out exactly like the :class:`ParamStore` it was called with.

All network code is written against the dispatching helpers below (``tanh``,
``exp``, ``concat``...), so the same forward function runs on plain arrays for
fast evaluation and on nodes when a gradient is needed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError

# ---------------------------------------------------------------------------
# autodiff core
# ---------------------------------------------------------------------------


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("value", "parents", "backward", "grad", "segment")
    # numpy must defer to our reflected operators (ndarray @ Node etc.)
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None, segment=None):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.grad = None
        self.segment = segment

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _val(x):
    return x.value if isinstance(x, Node) else x


def _accum(node, g):
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def add(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a + b
    va, vb = _val(a), _val(b)
    out = va + vb

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g, np.shape(va)))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g, np.shape(vb)))

    return Node(out, tuple(x for x in (a, b) if isinstance(x, Node)), backward)


def neg(a):
    if not isinstance(a, Node):
        return -a

    def backward(g):
        _accum(a, -g)

    return Node(-a.value, (a,), backward)


def mul(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a * b
    va, vb = _val(a), _val(b)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g * vb, np.shape(va)))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g * va, np.shape(vb)))

    return Node(va * vb, tuple(x for x in (a, b) if isinstance(x, Node)), backward)


def reciprocal(a):
    if not isinstance(a, Node):
        return 1.0 / a
    out = 1.0 / a.value

    def backward(g):
        _accum(a, -g * out * out)

    return Node(out, (a,), backward)


def matmul(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a @ b
    va, vb = _val(a), _val(b)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, g @ vb.T)
        if isinstance(b, Node):
            _accum(b, va.T @ g)

    return Node(va @ vb, tuple(x for x in (a, b) if isinstance(x, Node)), backward)


def affine(x, w, b):
    """``x @ w + b`` as a single graph node."""
    return dense(x, w, b)


def dense(x, w, b, scale=None):
    """Fused layer ``x @ w + b``, followed by ``scale * tanh`` when ``scale`` is set.

    The hot path of every MLP, so forward and backward avoid extra temporaries.
    """
    vx, vw, vb = _val(x), _val(w), _val(b)
    z = vx @ vw
    z += vb
    if scale is not None:
        np.tanh(z, out=z)
        if scale != 1.0:
            z *= scale
    if not any(isinstance(v, Node) for v in (x, w, b)):
        return z

    def backward(g):
        if scale is None:
            gz = g
        elif scale == 0.0:
            gz = np.zeros_like(z)
        else:
            # d/dz [c tanh z] = c (1 - tanh^2) = c - out^2 / c
            gz = z * z
            gz *= -1.0 / scale
            gz += scale
            gz *= g
        if isinstance(x, Node):
            _accum(x, gz @ vw.T)
        if isinstance(w, Node):
            _accum(w, vx.T @ gz)
        if isinstance(b, Node):
            _accum(b, np.ones(gz.shape[0]) @ gz)

    parents = tuple(v for v in (x, w, b) if isinstance(v, Node))
    return Node(z, parents, backward)


def tanh(a):
    if not isinstance(a, Node):
        return np.tanh(a)
    out = np.tanh(a.value)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return Node(out, (a,), backward)


def scaled_tanh(a, scale):
    """``scale * tanh(a)``; bounded output used for the coupling clamps."""
    if not isinstance(a, Node):
        return scale * np.tanh(a)
    th = np.tanh(a.value)

    def backward(g):
        _accum(a, g * scale * (1.0 - th * th))

    return Node(scale * th, (a,), backward)


def exp(a):
    if not isinstance(a, Node):
        return np.exp(a)
    out = np.exp(a.value)

    def backward(g):
        _accum(a, g * out)

    return Node(out, (a,), backward)


def log(a):
    if not isinstance(a, Node):
        return np.log(a)

    def backward(g):
        _accum(a, g / a.value)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.value)
    return Node(out, (a,), backward)


def square(a):
    if not isinstance(a, Node):
        return a * a

    def backward(g):
        _accum(a, 2.0 * g * a.value)

    return Node(a.value * a.value, (a,), backward)


def sum_(a, axis=None):
    if not isinstance(a, Node):
        return np.sum(a, axis=axis)
    shape = a.value.shape

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

    return Node(np.sum(a.value, axis=axis), (a,), backward)


def mean(a, axis=None):
    n = a.shape[axis] if axis is not None else np.size(_val(a))
    return sum_(a, axis=axis) * (1.0 / n)


def getitem(a, idx):
    if not isinstance(a, Node):
        return a[idx]
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Node(a.value[idx], (a,), backward)


def take_cols(a, cols):
    """Select columns ``cols`` (integer array) of a 2-D array or node."""
    if not isinstance(a, Node):
        return a[:, cols]
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, cols] = g
        _accum(a, full)

    return Node(a.value[:, cols], (a,), backward)


def scatter_cols(parts, n_cols):
    """Inverse of :func:`take_cols`: ``parts`` is a list of (cols, block) pairs
    that together cover ``range(n_cols)`` exactly once."""
    if not any(isinstance(block, Node) for _, block in parts):
        n = parts[0][1].shape[0]
        out = np.empty((n, n_cols))
        for cols, block in parts:
            out[:, cols] = block
        return out
    n = _val(parts[0][1]).shape[0]
    out = np.empty((n, n_cols))
    for cols, block in parts:
        out[:, cols] = _val(block)

    def backward(g):
        for cols, block in parts:
            if isinstance(block, Node):
                _accum(block, g[:, cols])

    return Node(out, tuple(b for _, b in parts if isinstance(b, Node)), backward)


def concat(items, axis=-1):
    if not any(isinstance(x, Node) for x in items):
        return np.concatenate(items, axis=axis)
    vals = [_val(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        for x, piece in zip(items, np.split(g, bounds, axis=axis)):
            if isinstance(x, Node):
                _accum(x, piece)

    return Node(out, tuple(x for x in items if isinstance(x, Node)), backward)


def stop_gradient(a):
    return _val(a)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root):
    """Run reverse-mode accumulation from the scalar ``root``."""
    root.grad = np.ones_like(root.value)
    for node in reversed(_toposort(root)):
        if node.backward is not None and node.grad is not None:
            node.backward(node.grad)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class _Segment:
    name: str
    shape: tuple
    offset: int
    size: int


class ParamStore:
    """Flat float64 vector partitioned into named, shaped segments."""

    def __init__(self):
        self._segments: dict[str, _Segment] = {}
        self.values = np.zeros(0)
        self.version = 0

    def add(self, name, shape, values=None):
        if name in self._segments:
            raise ConfigError(f"duplicate segment {name!r}")
        if any(c.isspace() for c in name) or not name:
            raise ConfigError(f"invalid segment name {name!r}")
        shape = tuple(int(s) for s in shape)
        size = math.prod(shape)
        seg = _Segment(name, shape, self.values.size, size)
        new = np.zeros(size) if values is None else np.asarray(values, dtype=np.float64).reshape(size)
        self.values = np.concatenate([self.values, new])
        self._segments[name] = seg
        return self.view(name)

    def __contains__(self, name):
        return name in self._segments

    def __len__(self):
        return self.values.size

    @property
    def names(self):
        return list(self._segments)

    def layout(self):
        return [(s.name, s.shape) for s in self._segments.values()]

    def view(self, name):
        s = self._segments[name]
        return self.values[s.offset : s.offset + s.size].reshape(s.shape)

    def __getitem__(self, name):
        return self.view(name)

    def __setitem__(self, name, value):
        self.view(name)[...] = value

    def segment_of(self, index):
        for s in self._segments.values():
            if s.offset <= index < s.offset + s.size:
                return s.name
        raise IndexError(index)

    def copy(self):
        other = ParamStore()
        other._segments = dict(self._segments)
        other.values = self.values.copy()
        other.version = self.version
        return other

    def subset(self, prefix):
        """New store holding copies of the segments whose name starts with ``prefix``."""
        out = ParamStore()
        for name, shape in self.layout():
            if name.startswith(prefix):
                out.add(name[len(prefix):], shape, self.view(name))
        return out

    def merge(self, prefix, other):
        for name, shape in other.layout():
            self.add(prefix + name, shape, other.view(name))

    def check_layout(self, other):
        if self.layout() != other.layout():
            raise ConfigError("parameter layouts differ")

    def leaves(self):
        return {name: Node(self.view(name), segment=name) for name in self._segments}


def value_and_grad(loss_fn, params: ParamStore):
    """Evaluate ``loss_fn(leaves)`` and its gradient w.r.t. every segment.

    ``leaves`` maps segment names to graph nodes. Returns ``(loss, grad)`` where
    ``grad`` is a flat array aligned with ``params.values``.
    """
    leaves = params.leaves()
    out = loss_fn(leaves)
    grad = np.zeros(len(params))
    if not isinstance(out, Node):
        loss = float(out)
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        return loss, grad
    loss = float(out.value)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", _first_nonfinite_leaf(out))
    backprop(out)
    for name, leaf in leaves.items():
        if leaf.grad is None:
            continue
        s = params._segments[name]
        g = np.asarray(leaf.grad).reshape(s.size)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", name)
        grad[s.offset : s.offset + s.size] = g
    return loss, grad


def _first_nonfinite_leaf(root):
    for node in _toposort(root):
        if node.segment is not None and not np.all(np.isfinite(node.value)):
            return node.segment
    for node in _toposort(root):
        if node.segment is not None:
            return node.segment
    return None


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """tanh MLP; ``out_scale`` set means the output is ``out_scale * tanh(.)``."""

    sizes: list
    prefix: str
    out_scale: float | None = None

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ConfigError("an Mlp needs at least input and output sizes")
        self.sizes = [int(s) for s in self.sizes]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def segment_names(self):
        out = []
        for i in range(self.n_layers):
            out += [f"{self.prefix}.w{i}", f"{self.prefix}.b{i}"]
        return out

    def register(self, params: ParamStore, rng, zero_last=False):
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = math.sqrt(3.0 / n_in)
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
            if zero_last and i == self.n_layers - 1:
                w = np.zeros((n_in, n_out))
            params.add(f"{self.prefix}.w{i}", (n_in, n_out), w)
            params.add(f"{self.prefix}.b{i}", (n_out,), np.zeros(n_out))


def mlp_forward(net: Mlp, params, x):
    """Apply ``net``. ``params`` is a ParamStore (plain arrays) or a leaf mapping."""
    if np.shape(_val(x))[-1] != net.sizes[0]:
        raise ConfigError(f"{net.prefix}: expected input width {net.sizes[0]}, got {np.shape(_val(x))[-1]}")
    squeeze = np.ndim(_val(x)) == 1
    h = x[None, :] if squeeze else x
    for i in range(net.n_layers):
        scale = 1.0 if i < net.n_layers - 1 else net.out_scale
        h = dense(h, params[f"{net.prefix}.w{i}"], params[f"{net.prefix}.b{i}"], scale)
    return h[0] if squeeze else h


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr=3e-4, **kw):
        return cls(np.zeros(len(params)), np.zeros(len(params)), lr=lr, **kw)


def clip_by_global_norm(grad, max_norm):
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def adam_step(state: AdamState, params: ParamStore, grad):
    """One bias-corrected Adam step, in place on both ``state`` and ``params``."""
    if grad.shape != params.values.shape or state.m.shape != grad.shape:
        raise ConfigError("Adam state, parameters and gradient lengths disagree")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError("non-finite gradient rejected", params.segment_of(bad))
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new_values)):
        raise NumericError("optimizer produced non-finite parameters")
    state.m, state.v, state.step = m, v, step
    params.values[...] = new_values
    params.version += 1
    return state, params


def polyak_update(target: ParamStore, online: ParamStore, rate):
    if not 0 < rate <= 1:
        raise ConfigError(f"polyak rate must be in (0, 1], got {rate}")
    target.check_layout(online)
    target.values[...] = (1 - rate) * target.values + rate * online.values
    target.version += 1
    return target


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------
#
# Layout (all text lines are ASCII, '\n' terminated):
#   line 0: "FLOWHIQL-PARAMS 1 <n_segments> <version> <sha256 of the payload>"
#   next n lines: "<name> <shape>"  where shape is comma separated ints, "-" for 0-d
#   then "END"
#   then sum(prod(shape)) little-endian float64 values, segments in header order.

MAGIC = "FLOWHIQL-PARAMS"


def params_to_bytes(params: ParamStore) -> bytes:
    payload = params.values.astype("<f8").tobytes()
    digest = hashlib.sha256(payload).hexdigest()
    lines = [f"{MAGIC} 1 {len(params.layout())} {params.version} {digest}"]
    for name, shape in params.layout():
        lines.append(f"{name} {','.join(map(str, shape)) if shape else '-'}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    return header + payload


def params_from_bytes(blob: bytes) -> ParamStore:
    try:
        first_nl = blob.index(b"\n")
        magic, fmt, n, version, digest = blob[:first_nl].decode("ascii").split()
        if magic != MAGIC or fmt != "1":
            raise ValueError("bad magic")
        n = int(n)
        pos = first_nl + 1
        layout = []
        for _ in range(n):
            nl = blob.index(b"\n", pos)
            name, shape_txt = blob[pos:nl].decode("ascii").split()
            shape = () if shape_txt == "-" else tuple(int(s) for s in shape_txt.split(","))
            layout.append((name, shape))
            pos = nl + 1
        nl = blob.index(b"\n", pos)
        if blob[pos:nl] != b"END":
            raise ValueError("missing END marker")
        pos = nl + 1
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed parameter header: {exc}") from exc
    total = sum(math.prod(s) for _, s in layout)
    body = blob[pos:]
    if len(body) != 8 * total:
        raise CheckpointError(f"expected {8 * total} payload bytes, found {len(body)}")
    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointError("parameter payload does not match its checksum")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = ParamStore()
    off = 0
    for name, shape in layout:
        size = math.prod(shape)
        params.add(name, shape, flat[off : off + size])
        off += size
    params.version = int(version)
    return params


def save_params(params: ParamStore, path):
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParamStore:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return params_from_bytes(blob)
