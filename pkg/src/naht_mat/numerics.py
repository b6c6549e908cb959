"""Small reverse-mode autodiff over float64 numpy arrays.

Arrays are plain ``np.ndarray`` (float64, row-major). A :class:`Node` wraps an
array together with the vector-Jacobian closures needed to push gradients
back to its parents. Only the operations the model and trainer need exist.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

CKPT_HEADER = "naht-mat-ckpt-v1"
MASK_FILL = -1e30
LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (rollouts, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"

    # sugar, so loss expressions read naturally
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name=None) -> Node:
    """A leaf that accumulates gradients."""
    node = Node(value, requires_grad=True, name=name)
    node.zero_grad()
    return node


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents) -> Node:
    """Attach ``parents`` (node, vjp) pairs only when a gradient can flow."""
    if not _grad_enabled:
        return Node(value)
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    if not live:
        return Node(value)
    return Node(value, live, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, ((a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, ((a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make(av * bv, ((a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    av = a.value
    return _make(np.log(av), ((a, lambda g: g / av),))


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, ((a, lambda g: 2.0 * g * av),))


def clip(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), ((a, lambda g: g * inside),))


def minimum(a, b) -> Node:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_node(a), as_node(b)
    pick_a = a.value <= b.value
    return _make(
        np.where(pick_a, a.value, b.value),
        ((a, lambda g: _unbroadcast(g * pick_a, a.value.shape)), (b, lambda g: _unbroadcast(g * ~pick_a, b.value.shape))),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """tanh-approximate GELU."""
    x = a.value
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _make(out, ((a, vjp),))


# ---------------------------------------------------------------- reductions / shape


def sum_(a: Node, axis=None, keepdims=False) -> Node:
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), ((a, vjp),))


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return _make(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),))


def transpose(a: Node, axes) -> Node:
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), ((a, lambda g: np.transpose(g, inv)),))


def take(a: Node, index, axis: int) -> Node:
    """Select entries along ``axis`` with an integer index array (gather)."""
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        np.add.at(out, tuple(sl), g)
        return out

    return _make(np.take(a.value, index, axis=axis), ((a, vjp),))


def concat(nodes, axis: int) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def piece(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple((n, piece(i)) for i, n in enumerate(nodes)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")

    flat = bv.ndim == 2

    def ga(g):
        if flat:
            return _mm2(g, bv.T)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def gb(g):
        if flat:
            return av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _make(_mm2(av, bv) if flat else av @ bv, ((a, ga), (b, gb)))


def _mm2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x[..., k] @ w[k, n]`` as one 2-D GEMM."""
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def linear(x, w: Node, b: Node | None = None) -> Node:
    """Fused ``x @ w + b`` over leading batch dims."""
    x = as_node(x)
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ValueError(f"linear dimension mismatch: {xv.shape} @ {wv.shape}")
    out = _mm2(xv, wv)
    parents = [
        (x, lambda g: _mm2(g, wv.T)),
        (w, lambda g: xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])),
    ]
    if b is not None:
        out += b.value
        parents.append((b, lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)))
    return _make(out, parents)


# ---------------------------------------------------------------- normalisation


def softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _make(p, ((x, lambda g: p * (g - (g * p).sum(axis=axis, keepdims=True))),))


def log_softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, ((x, lambda g: g - p * g.sum(axis=axis, keepdims=True)),))


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
    xv = x.value
    d = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def gx(g):
        gh = g * gv
        return inv / d * (d * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))

    def lead(g):
        return g.reshape(-1, d)

    return _make(
        xhat * gv + bias.value,
        ((x, gx), (gain, lambda g: lead(g * xhat).sum(axis=0)), (bias, lambda g: lead(g).sum(axis=0))),
    )


# ---------------------------------------------------------------- attention


def scaled_dot_attention(q: Node, k: Node, v: Node, mask: np.ndarray) -> Node:
    """Masked softmax(q kᵀ/√d) v over ``[..., L, d]`` inputs.

    ``mask[..., i, j] == 1`` lets query i see key j. Masked logits are set to
    ``MASK_FILL`` so their probabilities underflow to exactly zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask leaves a query row with no visible key")
    qv, kv, vv = q.value, k.value, v.value
    scale = 1.0 / math.sqrt(qv.shape[-1])
    s = np.where(mask, (qv @ np.swapaxes(kv, -1, -2)) * scale, MASK_FILL)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vv
    cache = {}

    def ds(g):
        if "ds" not in cache:
            dp = g @ np.swapaxes(vv, -1, -2)
            cache["ds"] = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        return cache["ds"]

    return _make(
        out,
        (
            (q, lambda g: _unbroadcast(ds(g) @ kv, qv.shape)),
            (k, lambda g: _unbroadcast(np.swapaxes(ds(g), -1, -2) @ qv, kv.shape)),
            (v, lambda g: _unbroadcast(np.swapaxes(p, -1, -2) @ g, vv.shape)),
        ),
    )


def multi_head_attention(q_in, kv_in, mask, params: dict, n_heads: int) -> Node:
    """Multi-head attention over ``[..., Lq, d]`` queries and ``[..., Lk, d]`` keys.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``.
    """
    q_in, kv_in = as_node(q_in), as_node(kv_in)
    d = q_in.value.shape[-1]
    if d % n_heads:
        raise ValueError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(x: Node) -> Node:
        lead = x.value.shape[:-1]
        x = reshape(x, lead + (n_heads, dh))
        nd = x.value.ndim
        # [..., L, h, dh] -> [..., h, L, dh]
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(x, axes)

    q = heads(linear(q_in, params["wq"], params["bq"]))
    k = heads(linear(kv_in, params["wk"], params["bk"]))
    v = heads(linear(kv_in, params["wv"], params["bv"]))
    mask = np.asarray(mask, dtype=bool)
    o = scaled_dot_attention(q, k, v, np.expand_dims(mask, -3))
    nd = o.value.ndim
    o = transpose(o, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    o = reshape(o, o.value.shape[:-2] + (d,))
    return linear(o, params["wo"], params["bo"])


# ---------------------------------------------------------------- backward


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


# ---------------------------------------------------------------- parameters


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamStore:
    """Named parameter leaves plus Adam moments; iteration is sorted by name."""

    params: dict[str, Node] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = param(np.array(value, dtype=np.float64), name=name)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return sorted(self.params.items())

    def names(self) -> list[str]:
        return sorted(self.params)

    def num_values(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in self.items()))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params.values():
                p.grad *= scale
        return norm

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.items():
            if values[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {values[name].shape} vs {p.value.shape}")
            p.value[...] = values[name]


def adam_step(store: ParamStore, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are left untouched."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.items():
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = AdamState(np.zeros_like(p.value), np.zeros_like(p.value))
        st.m *= beta1
        st.m += (1.0 - beta1) * p.grad
        st.v *= beta2
        st.v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (st.m / c1) / (np.sqrt(st.v / c2) + eps)


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    worst: tuple[str, int] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def rel_err(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    f: Callable[[], Node],
    store: ParamStore,
    n_coords: int = 200,
    h: float = 1e-5,
    tol: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``n_coords`` coordinates are drawn uniformly over all parameter entries.
    Relative error uses ``max(|a|, |n|, 1e-7)`` as denominator.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-4]")
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    backward(f())
    analytic = {name: p.grad.copy() for name, p in store.items()}
    flat = [(name, i) for name, p in store.items() for i in range(p.value.size)]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    worst, worst_err = None, 0.0
    for j in sorted(picks):
        name, i = flat[j]
        buf = store[name].value.reshape(-1)
        orig = buf[i]
        buf[i] = orig + h
        fp = float(f().value.sum())
        buf[i] = orig - h
        fm = float(f().value.sum())
        buf[i] = orig
        numeric = (fp - fm) / (2 * h)
        err = rel_err(float(analytic[name].reshape(-1)[i]), numeric)
        if err >= worst_err:
            worst, worst_err = (name, i), err
    store.zero_grad()
    return GradCheckReport(worst_err, len(picks), tol, worst)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Header line, JSON index line, then little-endian f64 blobs.

    Blobs per parameter in name order: value, then Adam m and v when present.
    """
    index, blobs, offset = [], [], 0
    for name, p in store.items():
        entry = {"name": name, "shape": list(p.value.shape), "offset": offset, "adam": name in store.state}
        arrays = [p.value]
        if entry["adam"]:
            arrays += [store.state[name].m, store.state[name].v]
        for a in arrays:
            raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
            blobs.append(raw)
            offset += len(raw)
        index.append(entry)
    head = {"step": store.step, "params": index, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write((CKPT_HEADER + "\n").encode())
        fh.write((json.dumps(head, sort_keys=True) + "\n").encode())
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, store: ParamStore) -> dict:
    """Restore values and optimizer state into ``store``; returns the meta dict."""
    data = Path(path).read_bytes()
    first = data.index(b"\n")
    if data[:first].decode() != CKPT_HEADER:
        raise ValueError(f"{path}: not a {CKPT_HEADER} checkpoint")
    second = data.index(b"\n", first + 1)
    head = json.loads(data[first + 1 : second])
    body = memoryview(data)[second + 1 :]
    by_name = {e["name"]: e for e in head["params"]}
    if sorted(by_name) != store.names():
        raise ValueError(f"{path}: parameter names do not match the model")
    for name, p in store.items():
        e = by_name[name]
        shape = tuple(e["shape"])
        if shape != p.value.shape:
            raise ValueError(f"{path}: {name} has shape {shape}, model expects {p.value.shape}")
        size = 8 * int(np.prod(shape, dtype=np.int64))
        off = e["offset"]

        def read(k):
            return np.frombuffer(body[off + k * size : off + (k + 1) * size], dtype="<f8").reshape(shape).astype(np.float64)

        p.value[...] = read(0)
        if e["adam"]:
            store.state[name] = AdamState(read(1), read(2))
        else:
            store.state.pop(name, None)
    store.step = int(head["step"])
    return head["meta"]
