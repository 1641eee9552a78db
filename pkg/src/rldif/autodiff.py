"""Minimal reverse-mode automatic differentiation over dense 2-D tensors.

A Tape records ops in execution order (which is already a topological
order); backward walks the record in reverse, accumulating gradients
additively into every input. Parameters are named leaves; `backward`
returns a gradient per parameter name.

Design constraints:
  * tensors are 2-D numpy arrays (row vectors for biases, [1, 1] scalars);
  * float64 by default, float32 via Tape(dtype=...);
  * the only broadcasting is row-vector bias addition in `add`;
  * a tape is single-threaded; independent tapes may run concurrently.

With Tape(grad=False) ops execute the identical numeric kernels without
recording, so sampling-time values match training-time values bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Tensor:
    """A 2-D value living on a tape."""

    __slots__ = ("data", "tape", "param", "name")

    def __init__(self, data: np.ndarray, tape: "Tape", param: bool = False, name: str | None = None):
        self.data = data
        self.tape = tape
        self.param = param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        tag = f" param={self.name!r}" if self.param else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered op record plus the parameter registry."""

    def __init__(self, dtype=np.float64, grad: bool = True, debug: bool = False):
        self.dtype = dtype
        self.grad_enabled = grad
        self.debug = debug
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def leaf(self, value, param: bool = False, name: str | None = None) -> Tensor:
        data = np.ascontiguousarray(np.asarray(value, dtype=self.dtype))
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {data.shape}")
        t = Tensor(data, self, param=param, name=name)
        if param:
            if name is None:
                raise ValueError("parameter leaves need a name")
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = t
        return t

    def param(self, name: str, value) -> Tensor:
        return self.leaf(value, param=True, name=name)

    def const(self, value) -> Tensor:
        return self.leaf(value, param=False)

    def lift(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """Register a whole parameter dict as named leaves."""
        return {name: self.param(name, value) for name, value in params.items()}


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return like.tape.const(np.asarray(x, dtype=like.tape.dtype))


def _record(name: str, tape: Tape, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    out_data = out_data.astype(tape.dtype, copy=False)
    if tape.debug and not np.all(np.isfinite(out_data)):
        raise NonFiniteValue(f"op {name} produced non-finite values")
    out = Tensor(out_data, tape)
    if tape.grad_enabled:
        tape.nodes.append(_Node(name, inputs, out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", a.tape, ad @ bd, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may also be a [1, D] row vector (bias)."""
    b = _as_tensor(b, a)
    bias = b.data.shape != a.data.shape
    if bias and b.data.shape != (1, a.data.shape[1]):
        raise ShapeMismatch(f"add {a.data.shape} + {b.data.shape}")

    def bwd(g):
        return g, g.sum(axis=0, keepdims=True) if bias else g

    return _record("add", a.tape, a.data + b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record("scale", a.tape, a.data * c, (a,), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(_as_tensor(b, a), -1.0))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Strict same-shape elementwise product."""
    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"multiply {a.data.shape} * {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _record("multiply", a.tape, ad * bd, (a, b), bwd)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise ShapeMismatch(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    extents = {t.data.shape[other] for t in tensors}
    if len(extents) != 1:
        raise ShapeMismatch(f"concat shapes {[t.data.shape for t in tensors]}")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 1:
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", tensors[0].tape, out, tuple(tensors), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] of {a.data.shape}")

    def bwd(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return _record("slice_rows", a.tape, a.data[start:stop].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    m = a.data.shape[1]
    if not (0 <= start <= stop <= m):
        raise ShapeMismatch(f"slice [:, {start}:{stop}] of {a.data.shape}")

    def bwd(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return _record("slice_cols", a.tape, a.data[:, start:stop].copy(), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", a.tape, a.data * mask, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-unit: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _record("gelu", a.tape, x * phi, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g):
        return (g * y,)

    return _record("exp", a.tape, y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    x = a.data

    def bwd(g):
        return (g / x,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _record("log", a.tape, out, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * mask,)

    return _record("clip", a.tape, np.clip(a.data, lo, hi), (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; at ties the gradient routes to `a`."""
    b = _as_tensor(b, a)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"minimum {a.data.shape} vs {b.data.shape}")
    take_a = a.data <= b.data

    def bwd(g):
        return g * take_a, g * ~take_a

    return _record("minimum", a.tape, np.where(take_a, a.data, b.data), (a, b), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with affine parameters ([1, D] each)."""
    d = a.data.shape[1]
    for p in (gain, bias):
        if p.data.shape != (1, d):
            raise ShapeMismatch(f"layer_norm affine {p.data.shape} for width {d}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gd = gain.data

    def bwd(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record("layer_norm", a.tape, xhat * gd + bias.data, (a, gain, bias), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return _record("softmax", a.tape, y, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    """Mean over all entries, as a [1, 1] scalar."""
    size = a.data.size

    def bwd(g):
        return (np.full_like(a.data, g[0, 0] / size),)

    return _record("mean", a.tape, np.array([[a.data.mean()]], dtype=a.tape.dtype), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum over all entries, as a [1, 1] scalar."""

    def bwd(g):
        return (np.full_like(a.data, g[0, 0]),)

    return _record("sum", a.tape, np.array([[a.data.sum()]], dtype=a.tape.dtype), (a,), bwd)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by index (duplicates allowed; gradients scatter-add)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather", a.tape, a.data[idx], (a,), bwd)


def segment_mean(a: Tensor, seg_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean of rows grouped by segment id; empty segments yield zero rows."""
    seg = np.asarray(seg_ids, dtype=np.int64)
    if seg.shape != (a.data.shape[0],):
        raise ShapeMismatch(f"segment ids {seg.shape} for {a.data.shape}")
    counts = np.bincount(seg, minlength=num_segments)
    sums = np.zeros((num_segments, a.data.shape[1]), dtype=a.tape.dtype)
    sorted_ids = np.all(seg[1:] >= seg[:-1]) if seg.size > 1 else True
    if sorted_ids and np.all(counts > 0):
        starts = np.searchsorted(seg, np.arange(num_segments))
        sums = np.add.reduceat(a.data, starts, axis=0)
    else:
        np.add.at(sums, seg, a.data)
    denom = np.maximum(counts, 1).astype(a.tape.dtype)
    out = sums / denom[:, None]

    def bwd(g):
        return (g[seg] / denom[seg][:, None],)

    return _record("segment_mean", a.tape, out, (a,), bwd)


def rows_matmul(a: Tensor, mats: np.ndarray) -> Tensor:
    """Per-row linear map: out[n] = a[n] @ mats[n], mats a constant [N, K, M]."""
    mats = np.asarray(mats, dtype=a.tape.dtype)
    if mats.ndim != 3 or mats.shape[0] != a.data.shape[0] or mats.shape[1] != a.data.shape[1]:
        raise ShapeMismatch(f"rows_matmul {a.data.shape} with {mats.shape}")

    def bwd(g):
        return (np.einsum("nm,nkm->nk", g, mats),)

    out = np.einsum("nk,nkm->nm", a.data, mats)
    return _record("rows_matmul", a.tape, out, (a,), bwd)


def cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits) at the one-hot target."""
    oh = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=logits.tape.dtype)
    if oh.shape != logits.data.shape:
        raise ShapeMismatch(f"cross_entropy logits {logits.data.shape} targets {oh.shape}")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + x.max(axis=1, keepdims=True)
    n = x.shape[0]
    loss = float((lse - (oh * x).sum(axis=1, keepdims=True)).sum() / n)

    def bwd(g):
        probs = np.exp(x - lse)
        return ((probs - oh) * (g[0, 0] / n),)

    return _record(
        "cross_entropy", logits.tape,
        np.array([[loss]], dtype=logits.tape.dtype), (logits,), bwd,
    )


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, free_tape: bool = True) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every named parameter on its tape.

    Non-parameter leaves are skipped; parameters that the loss does not
    depend on get zero gradients. By default the op record is cleared
    afterwards: node/closure reference cycles otherwise keep every saved
    activation alive until the garbage collector runs, which wrecks
    allocator reuse in training loops. Pass free_tape=False to keep the
    record (e.g. to call backward twice on one graph).
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
    out = {
        name: grads.get(id(t), np.zeros_like(t.data))
        for name, t in tape.params.items()
    }
    if free_tape:
        tape.nodes.clear()
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint container
#
# Byte layout (little endian):
#   bytes 0..7    magic b"RLDFCKP1"
#   bytes 8..15   uint64 header length H
#   bytes 16..16+H  UTF-8 JSON header:
#       {"meta": {...},
#        "tensors": [{"name": str, "dtype": str, "shape": [..],
#                     "offset": int, "nbytes": int}, ...]}
#   then the concatenated raw little-endian tensor bytes; each tensor's
#   `offset` is relative to the start of the data section.

_MAGIC = b"RLDFCKP1"


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        data = fh.read()
    params = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        raw = data[ent["offset"] : ent["offset"] + ent["nbytes"]]
        params[ent["name"]] = (
            np.frombuffer(raw, dtype=dt).astype(ent["dtype"]).reshape(ent["shape"]).copy()
        )
    return params, header["meta"]
