"""Reverse-mode automatic differentiation over dense float64 tensors.

Small, deliberately simple engine: every op builds a closure-based backward
graph, all storage is numpy float64, and every forward output is checked for
NaN/Inf (non-finite values are an error state, not a silent result).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # Single-pass check: the sum is NaN/Inf iff some element is (magnitudes
    # here are far below overflow range).
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"{op}: non-finite values in output of shape {data.shape}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward: output must be scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions hold the actual forward/backward logic.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, parents, backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast during the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape_ok(a: Tensor, b: Tensor) -> bool:
    # Exact match, scalar, or suffix broadcast (trailing dims align).
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return True
    short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return long[len(long) - len(short):] == short


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shape_ok(a, b):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(g, b.shape))

    return _make(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shape_ok(a, b):
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(-g, b.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shape_ok(a, b):
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (..., M, K) @ (..., K, N).

    Leading dims must match exactly, or one operand may be a plain 2-D matrix
    (the shared-weight case); full broadcasting is out of scope.
    """
    sa, sb = a.shape, b.shape
    ok = (
        len(sa) >= 2
        and len(sb) >= 2
        and sa[-1] == sb[-2]
        and (sa[:-2] == sb[:-2] or len(sa) == 2 or len(sb) == 2)
    )
    if not ok:
        raise ValueError(f"matmul: incompatible shapes {sa} and {sb}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != a.shape:
                ga = ga.reshape(-1, *a.shape[-2:]).sum(axis=0) if len(sa) == 2 else ga
            a._accumulate(ga)
        if b.requires_grad:
            if len(sb) == 2 and len(sa) > 2:
                gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(gb)

    return _make(data, "matmul", (a, b), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _make(data, "transpose", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(data, "reshape", (x,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(data, "concat", tuple(parts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ValueError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _make(data, "slice", (x,), backward)


def repeat0(x: Tensor, n: int) -> Tensor:
    """Stack n copies of x along a new leading axis."""
    data = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def backward(g):
        x._accumulate(g.sum(axis=0))

    return _make(data, "repeat0", (x,), backward)


# ---------------------------------------------------------------------------
# nonlinear primitives


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis.

    -Inf entries (from masked_fill) get exactly zero probability; a fully
    masked row yields NaN and is reported as a non-finite error.
    """
    with np.errstate(invalid="ignore"):
        m = np.max(x.data, axis=-1, keepdims=True)
        # A fully -inf row would give exp(-inf - -inf) = NaN; keep the NaN so
        # the finite check reports it rather than masking the bug.
        z = np.exp(x.data - np.where(np.isfinite(m), m, 0.0))
        p = z / np.sum(z, axis=-1, keepdims=True)

    def backward(g):
        inner = np.sum(g * p, axis=-1, keepdims=True)
        x._accumulate(p * (g - inner))

    return _make(p, "softmax", (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Set entries where mask is True to `value` (additive -inf convention).

    The only primitive allowed to emit non-finite values; the finite check
    runs on the kept entries only.
    """
    mask = np.asarray(mask, dtype=bool)
    if not _binary_shape_ok(x, Tensor(np.empty(mask.shape))):
        raise ValueError(f"masked_fill: incompatible shapes {x.shape} and {mask.shape}")
    bmask = np.broadcast_to(mask, x.shape)
    data = np.where(bmask, value, x.data)
    if not np.isfinite(np.sum(data[~bmask])):
        raise NonFiniteError(f"masked_fill: non-finite values in unmasked output of shape {data.shape}")

    def backward(g):
        x._accumulate(np.where(bmask, 0.0, g))

    out = Tensor(data)
    out._op = "masked_fill"
    if _grad_enabled and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = backward
    return out


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gmean = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gmean - xhat * gx))
        del n  # n is folded into the means above

    return _make(xhat, "layer_norm", (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(data, "gelu", (x,), backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup: table (V, d), integer indices (...,) -> (..., d)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError(f"embedding: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"embedding: index out of range for table of shape {table.shape}")
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accumulate(gt)

    return _make(data, "embedding", (table,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    data = x.data * keep

    def backward(g):
        x._accumulate(g * keep)

    return _make(data, "dropout", (x,), backward)


# ---------------------------------------------------------------------------
# losses and reductions


def _weighted_mean_setup(pred: Tensor, target: Tensor, weights):
    if pred.shape != target.shape:
        raise ValueError(f"loss: pred shape {pred.shape} != target shape {target.shape}")
    if weights is None:
        w = np.ones_like(pred.data)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), pred.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("loss: weights sum to zero (all-masked target)")
    return w, total


def l1_loss(pred: Tensor, target: Tensor, weights=None) -> Tensor:
    w, total = _weighted_mean_setup(pred, target, weights)
    diff = pred.data - target.data
    data = np.array(np.sum(w * np.abs(diff)) / total)

    def backward(g):
        gd = g * w * np.sign(diff) / total
        if pred.requires_grad:
            pred._accumulate(gd)
        if target.requires_grad:
            target._accumulate(-gd)

    return _make(data, "l1_loss", (pred, target), backward)


def mse_loss(pred: Tensor, target: Tensor, weights=None) -> Tensor:
    w, total = _weighted_mean_setup(pred, target, weights)
    diff = pred.data - target.data
    data = np.array(np.sum(w * diff * diff) / total)

    def backward(g):
        gd = g * w * 2.0 * diff / total
        if pred.requires_grad:
            pred._accumulate(gd)
        if target.requires_grad:
            target._accumulate(-gd)

    return _make(data, "mse_loss", (pred, target), backward)


def bce_with_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Binary cross-entropy on logits, numerically stable.

    Infinite logits with the matching label contribute exactly zero loss.
    """
    y = np.asarray(labels, dtype=np.float64)
    w, total = _weighted_mean_setup(logits, Tensor(y), weights)
    z = logits.data
    with np.errstate(invalid="ignore", over="ignore"):
        loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    inf = np.isinf(z)
    if inf.any():
        agrees = (z > 0) == (y > 0.5)
        loss = np.where(inf, np.where(agrees, 0.0, np.inf), loss)
    data = np.array(np.sum(w * loss) / total)

    def backward(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        logits._accumulate(g * w * (sig - y) / total)

    return _make(data, "bce_with_logits", (logits,), backward)


def tsum(x: Tensor) -> Tensor:
    data = np.array(x.data.sum())

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _make(data, "sum", (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    data = np.array(x.data.mean())

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape).copy())

    return _make(data, "mean", (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradient of f at x and central differences.

    f must map a Tensor to a scalar Tensor deterministically.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f returned non-finite value")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named parameter container with deterministic (sorted) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"ParamStore: duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in sorted(self._params)]

    def zero_grad(self) -> None:
        for _, p in self.items():
            p.grad = None

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "AdamWState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: ParamStore, state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"adamw_step: missing gradient for parameter {name!r}")
        if state.m[name].shape != p.data.shape:
            raise ValueError(f"adamw_step: moment shape mismatch for {name!r}")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    state.step = t


# ---------------------------------------------------------------------------
# deterministic RNG helpers


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (standard transformer init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def site_rng(seed: int, step: int, site_id: int) -> np.random.Generator:
    """Counter-based dropout stream keyed by (global seed, step, site)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(step, site_id))
    return np.random.Generator(np.random.Philox(ss))
