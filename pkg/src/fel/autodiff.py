"""Minimal reverse-mode autodiff over dense numpy arrays.

The substrate is deliberately small: 2-D (and 1-D / scalar) tensors, a fixed
primitive set, and a tape built from parent links plus per-node backward
closures. Two precision modes exist as a global run setting:

* ``f32``      -- 32-bit storage, used for training and benchmarks.
* ``f64check`` -- 64-bit storage with hard NaN/Inf checks after every
  primitive, used for gradient checking.

All tensor payload allocations are counted against a high-water mark so the
benchmark harness can report a memory proxy without touching the OS.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, UnimplementedPrimitiveError

_PRECISION_MODES = ("f32", "f64check")
_precision = os.environ.get("FEL_PRECISION", "f32")
if _precision not in _PRECISION_MODES:
    raise ValueError(f"FEL_PRECISION must be one of {_PRECISION_MODES}, got {_precision!r}")

_grad_enabled = True

_alloc_current = 0
_alloc_peak = 0

_RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _PRECISION_MODES:
        raise ValueError(f"precision mode must be one of {_PRECISION_MODES}, got {mode!r}")
    _precision = mode


def precision() -> str:
    return _precision


def active_dtype() -> np.dtype:
    return np.dtype(np.float64 if _precision == "f64check" else np.float32)


@contextlib.contextmanager
def precision_mode(mode: str):
    prev = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (inference / finite-difference probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def reset_alloc_stats() -> None:
    global _alloc_current, _alloc_peak
    _alloc_current = 0
    _alloc_peak = 0


def alloc_peak_bytes() -> int:
    return _alloc_peak


def alloc_current_bytes() -> int:
    return _alloc_current


def _alloc_add(nbytes: int) -> None:
    global _alloc_current, _alloc_peak
    _alloc_current += nbytes
    if _alloc_current > _alloc_peak:
        _alloc_peak = _alloc_current


def _alloc_sub(nbytes: int) -> None:
    global _alloc_current
    _alloc_current -= nbytes


class DTensor:
    """Dense real tensor with optional gradient tracking.

    ``data`` is a row-major numpy array in the active precision. ``grad``
    is populated by :func:`backward` with an array of identical shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=active_dtype())
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[DTensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._nbytes = arr.nbytes
        _alloc_add(self._nbytes)

    def __del__(self):
        try:
            _alloc_sub(self._nbytes)
        except Exception:
            pass

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DTensor":
        return DTensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_dtensor(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _precision == "f64check" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by primitive '{op}'")


def _make(op: str, out_data: np.ndarray, parents: tuple[DTensor, ...],
          vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> DTensor:
    _check_finite(out_data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = DTensor(out_data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make("matmul", ad @ bd, (a, b), vjp)


def transpose(a) -> DTensor:
    a = as_dtensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), vjp)


def _bias_like(a: np.ndarray, b: np.ndarray) -> bool:
    # (n, d) combined with (d,) per-row vector
    return a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]


def add(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    if a.data.shape == b.data.shape:
        def vjp(g):
            return g, g
    elif _bias_like(a.data, b.data):
        def vjp(g):
            return g, g.sum(axis=0)
    else:
        raise ValueError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch: {a.data.shape} - {b.data.shape}")

    def vjp(g):
        return g, -g

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def vjp(g):
            return g * bd, g * ad
    elif _bias_like(ad, bd):
        def vjp(g):
            return g * bd, (g * ad).sum(axis=0)
    else:
        raise ValueError(f"mul shape mismatch: {ad.shape} * {bd.shape}")
    return _make("mul", ad * bd, (a, b), vjp)


def scale(a, s: float) -> DTensor:
    a = as_dtensor(a)
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _make("scale", a.data * s, (a,), vjp)


def broadcast_rows(v, n: int) -> DTensor:
    """Tile a (d,) or (1, d) vector to (n, d); gradient sums over rows."""
    v = as_dtensor(v)
    vd = v.data.reshape(-1)
    out = np.tile(vd, (n, 1))

    def vjp(g):
        return (g.sum(axis=0).reshape(v.data.shape),)

    return _make("broadcast_rows", out, (v,), vjp)


def concat_rows(parts: Sequence) -> DTensor:
    parts = [as_dtensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    widths = {p.data.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ValueError(f"concat_rows width mismatch: {sorted(widths)}")
    sizes = [p.data.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(parts)))

    return _make("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def slice_rows(a, start: int, length: int) -> DTensor:
    a = as_dtensor(a)
    n = a.data.shape[0]
    if start < 0 or length < 0 or start + length > n:
        raise ValueError(f"slice_rows [{start}:{start + length}] out of range for {n} rows")
    ashape = a.data.shape

    def vjp(g):
        full = np.zeros(ashape, dtype=g.dtype)
        full[start:start + length] = g
        return (full,)

    return _make("slice_rows", a.data[start:start + length].copy(), (a,), vjp)


def masked_softmax(a, allow: np.ndarray | None = None) -> DTensor:
    """Row-wise softmax over the last axis, with an optional boolean mask.

    Disallowed logits are treated as -inf: they get exactly zero weight and
    zero gradient. A row with no allowed entries is an error.
    """
    a = as_dtensor(a)
    x = a.data
    if allow is not None:
        allow = np.asarray(allow, dtype=bool)
        if allow.shape != x.shape:
            raise ValueError(f"mask shape {allow.shape} != logits shape {x.shape}")
        if not allow.any(axis=-1).all():
            raise ValueError("softmax row with zero allowed columns")
        x = np.where(allow, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    out = _make("softmax", y, (a,), vjp)
    return out


def softmax(a) -> DTensor:
    return masked_softmax(a, None)


def rms_norm(x, gain) -> DTensor:
    """Root-mean-square normalization over the last axis with per-channel gain."""
    x, gain = as_dtensor(x), as_dtensor(gain)
    xd, gd = x.data, gain.data
    if xd.ndim != 2 or gd.ndim != 1 or gd.shape[0] != xd.shape[1]:
        raise ValueError(f"rms_norm shapes: x {xd.shape}, gain {gd.shape}")
    d = xd.shape[1]
    s = (xd * xd).mean(axis=1, keepdims=True) + _RMS_EPS
    r = np.sqrt(s)
    xn = xd / r
    out = xn * gd

    def vjp(g):
        gg = g * gd
        inner = (gg * xd).sum(axis=1, keepdims=True)
        dx = gg / r - xd * inner / (d * r * s)
        dgain = (g * xn).sum(axis=0)
        return dx, dgain

    return _make("rms_norm", out, (x, gain), vjp)


def gelu(a) -> DTensor:
    """GELU, tanh approximation."""
    a = as_dtensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dy,)

    return _make("gelu", y, (a,), vjp)


def mse(a, b) -> DTensor:
    """Mean of squared elementwise differences, as a scalar tensor."""
    a, b = as_dtensor(a), as_dtensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def vjp(g):
        c = 2.0 * float(g) / n
        return c * diff, -c * diff

    return _make("mse", out, (a, b), vjp)


def rotate_pairs(a, cos: np.ndarray, sin: np.ndarray) -> DTensor:
    """Rotate interleaved channel pairs by per-position angles.

    ``cos``/``sin`` are constant arrays of shape (n, d/2); gradients flow
    through the tensor only (positions are not differentiated).
    """
    a = as_dtensor(a)
    x = a.data
    if x.ndim != 2 or x.shape[1] % 2 != 0:
        raise ValueError(f"rotate_pairs needs an even channel count, got shape {x.shape}")
    if cos.shape != (x.shape[0], x.shape[1] // 2) or sin.shape != cos.shape:
        raise ValueError(f"angle shape {cos.shape} does not match tensor shape {x.shape}")
    xe, xo = x[:, ::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, ::2] = xe * cos - xo * sin
    out[:, 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge, go = g[:, ::2], g[:, 1::2]
        dx = np.empty_like(g)
        dx[:, ::2] = ge * cos + go * sin
        dx[:, 1::2] = -ge * sin + go * cos
        return (dx,)

    return _make("rotate_pairs", out, (a,), vjp)


_PRIMITIVES = {
    "matmul": matmul,
    "transpose": transpose,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "broadcast_rows": broadcast_rows,
    "concat_rows": concat_rows,
    "slice_rows": slice_rows,
    "softmax": softmax,
    "masked_softmax": masked_softmax,
    "rms_norm": rms_norm,
    "gelu": gelu,
    "mse": mse,
    "rotate_pairs": rotate_pairs,
}


def primitive_set() -> tuple[str, ...]:
    """Names of the primitives the substrate provides with gradients."""
    return tuple(sorted(_PRIMITIVES))


def get_primitive(name: str):
    try:
        return _PRIMITIVES[name]
    except KeyError:
        raise UnimplementedPrimitiveError(f"primitive '{name}' is not provided by this substrate") from None


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(t: DTensor, seed_grad: np.ndarray | None = None) -> None:
    """Reverse-mode sweep from ``t``, accumulating into ``.grad`` fields."""
    if not t.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    if seed_grad is None:
        if t.data.size != 1:
            raise ValueError("backward without seed gradient requires a scalar output")
        seed_grad = np.ones_like(t.data)

    topo: list[DTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DTensor, bool]] = [(t, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(t): np.asarray(seed_grad, dtype=t.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._vjp is None:
            # leaf: accumulate into .grad
            _check_finite(g, "grad")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, x: DTensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Requires f64check mode; ``f`` must map ``x`` to a finite scalar DTensor.
    """
    if precision() != "f64check":
        raise ValueError("grad_check requires the f64check precision mode")
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")

    x.zero_grad()
    y = f(x)
    y_val = float(y.data)
    if not math.isfinite(y_val):
        raise NonFiniteError("f(x) is non-finite at the probe point")
    backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
