"""Dense multi-axis arrays with hand-written reverse-mode gradients.

This is the minimal operation set the architecture needs, not a general
autodiff system: every op pairs a forward computation with an explicit
vector-Jacobian product, and :meth:`Tensor.backward` replays them over the
recorded tape.  Data lives in contiguous numpy arrays (float32 for
training, float64 for gradient verification); the hot kernels (conv3d,
grid_sample) dispatch through :mod:`voxseg.kernels`.

Reduction order is fixed per backend (sequential in the compiled kernels,
numpy's deterministic order elsewhere), so repeated runs with the same
seed are bit-identical.  No operation mutates its inputs; tensors are safe
to share across threads for independent forward passes.

Finite-math contract: all ops are numerically stabilized so finite inputs
produce finite outputs.  Detected non-finite states (NaN sampling
coordinates, non-finite gradients in gradcheck) raise
:class:`~voxseg.errors.NumericError` rather than propagating silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy-backed array plus an optional gradient buffer.

    ``_parents``/``_backward`` form the tape: ``_backward(g)`` returns one
    gradient array (or None) per parent, in parent order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- autograd ----------------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of a scalar (or explicitly seeded) output."""
        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() without seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- sugar ---------------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(np.ascontiguousarray(arr), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = backward
    return out


def _check_same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d0:
            raise TypeError(f"mixed dtypes {d0} vs {t.dtype}; cast explicitly")


# ---------------------------------------------------------------------------
# matmul (shared gemm entry so conv3d k=1 is bit-identical to it)
# ---------------------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    out = _mm(a.data, b.data)

    def backward(g):
        ga = _mm(g, np.ascontiguousarray(b.data.T)) if a.requires_grad else None
        gb = _mm(np.ascontiguousarray(a.data.T), g) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise family (scalar-or-equal broadcasting only)
# ---------------------------------------------------------------------------

def _bcast_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if b.size == 1:
        return "b_scalar"
    if a.size == 1:
        return "a_scalar"
    raise DimensionError(
        f"only scalar-or-equal broadcasting is supported, got {a.shape} vs {b.shape}")


def _reduce_scalar(g: np.ndarray, shape) -> np.ndarray:
    return g.sum().reshape(shape) if g.shape != tuple(shape) else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    mode = _bcast_mode(a, b)
    out = a.data + b.data

    def backward(g):
        ga = _reduce_scalar(g, a.shape) if a.requires_grad else None
        gb = _reduce_scalar(g, b.shape) if b.requires_grad else None
        return ga, gb

    del mode
    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _bcast_mode(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _reduce_scalar(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_scalar(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * np.asarray(s, dtype=x.dtype)
    return _make(out, (x,), lambda g: (g * np.asarray(s, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exp only on the non-positive side, so large |x| cannot overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = (0.5 * xd * (1.0 + th)).astype(x.dtype)

    def backward(g):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * d.astype(x.dtype),)

    return _make(out, (x,), backward)


_ELEMENTWISE_KINDS = ("add", "mul", "relu", "gelu", "sigmoid", "scale")


def elementwise(a: Tensor, b: Tensor | None = None, kind: str = "add",
                factor: float | None = None) -> Tensor:
    """Uniform entry point over the elementwise kinds (see module tests)."""
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "mul"):
        if b is None:
            raise DimensionError(f"{kind} needs two operands")
        return add(a, b) if kind == "add" else mul(a, b)
    if kind == "scale":
        if factor is None:
            raise DimensionError("scale needs a factor")
        return scale(a, factor)
    if b is not None:
        raise DimensionError(f"{kind} is unary")
    return {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[kind](a)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    m = np.max(x.data, axis=axis, keepdims=True)
    # all -inf slices are a caller error; keep the max finite so exp stays defined
    m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# conv3d / avg_pool3d
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 3-D convolution over (B, C, D, H, W).

    The pointwise case (1x1x1 kernel, stride 1, no padding) routes through
    the same gemm as :func:`matmul`, making the channel-matmul equivalence
    exact, not approximate.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d needs 5-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"in-channels differ: x has {x.shape[1]}, w has {w.shape[1]}")
    _check_same_dtype(x, w)
    b_n, ci, d, h, wd = x.shape
    co = w.shape[0]
    kd, kh, kw = w.shape[2:]
    stride = int(stride)
    padding = int(padding)
    outs = tuple((n + 2 * padding - k) // stride + 1 for n, k in ((d, kd), (h, kh), (wd, kw)))
    if any(o <= 0 for o in outs) or any(
            n + 2 * padding < k for n, k in ((d, kd), (h, kh), (wd, kw))):
        raise DimensionError(
            f"non-positive output extent for input {x.shape[2:]}, kernel {(kd, kh, kw)}, "
            f"stride {stride}, pad {padding}")

    pointwise = (kd, kh, kw) == (1, 1, 1) and stride == 1 and padding == 0
    if pointwise:
        xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1)).reshape(-1, ci)
        wm = np.ascontiguousarray(w.data.reshape(co, ci).T)
        ym = _mm(xm, wm)
        out = np.ascontiguousarray(
            ym.reshape(b_n, d, h, wd, co).transpose(0, 4, 1, 2, 3))
    else:
        out = kernels.conv3d_forward(x.data, w.data, stride, padding)
    if bias is not None:
        if bias.shape != (co,):
            raise DimensionError(f"bias shape {bias.shape} != ({co},)")
        _check_same_dtype(x, bias)
        out = out + bias.data.reshape(1, co, 1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if pointwise:
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, co)
            if x.requires_grad:
                gx = np.ascontiguousarray(
                    _mm(gm, np.ascontiguousarray(wm.T)).reshape(b_n, d, h, wd, ci)
                    .transpose(0, 4, 1, 2, 3))
            if w.requires_grad:
                xm_ = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1)).reshape(-1, ci)
                gw = np.ascontiguousarray(
                    _mm(np.ascontiguousarray(xm_.T), gm).T).reshape(co, ci, 1, 1, 1)
        elif x.requires_grad or w.requires_grad:
            gx, gw = kernels.conv3d_backward(x.data, w.data, stride, padding,
                                             np.ascontiguousarray(g))
            if not x.requires_grad:
                gx = None
            if not w.requires_grad:
                gw = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return _make(out, parents, backward)


def avg_pool3d(x: Tensor, factor) -> Tensor:
    """Mean over non-overlapping factor^3 blocks; extents must divide."""
    if x.ndim != 5:
        raise DimensionError(f"avg_pool3d needs (B,C,D,H,W), got {x.shape}")
    f = (factor, factor, factor) if isinstance(factor, int) else tuple(int(v) for v in factor)
    if len(f) != 3 or any(v < 1 for v in f):
        raise DimensionError(f"bad pooling factor {factor!r}")
    b_n, c, d, h, w = x.shape
    if d % f[0] or h % f[1] or w % f[2]:
        raise DimensionError(f"extents {(d, h, w)} not divisible by factor {f}")
    do, ho, wo = d // f[0], h // f[1], w // f[2]
    blocks = x.data.reshape(b_n, c, do, f[0], ho, f[1], wo, f[2])
    out = blocks.mean(axis=(3, 5, 7))

    def backward(g):
        inv = np.asarray(1.0 / (f[0] * f[1] * f[2]), dtype=x.dtype)
        gx = np.broadcast_to((g * inv)[:, :, :, None, :, None, :, None],
                             (b_n, c, do, f[0], ho, f[1], wo, f[2]))
        return (np.ascontiguousarray(gx).reshape(x.shape),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# grid sampling
# ---------------------------------------------------------------------------

def grid_sample_trilinear(value: Tensor, coords: Tensor) -> Tensor:
    """Sample (C,D,H,W) at P normalized points, returning (P,C).

    Voxel-center convention: 0.0 and 1.0 are the centers of the first/last
    voxel on each axis.  Out-of-range coordinates clamp to the border (and
    receive zero coordinate-gradient there).
    """
    if value.ndim != 4:
        raise DimensionError(f"value must be (C,D,H,W), got {value.shape}")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"coords must be (P,3), got {coords.shape}")
    _check_same_dtype(value, coords)
    if not np.isfinite(coords.data).all():
        raise NumericError("non-finite sampling coordinate")
    out = kernels.grid_sample_forward(value.data, coords.data)

    def backward(g):
        gv, gc = kernels.grid_sample_backward(value.data, coords.data,
                                              np.ascontiguousarray(g))
        return (gv if value.requires_grad else None,
                gc if coords.requires_grad else None)

    return _make(out, (value, coords), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _norm_core(xd: np.ndarray, axes: tuple[int, ...]):
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    ivar = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    return xc * ivar, ivar


def _norm_input_grad(g_hat: np.ndarray, xhat: np.ndarray, ivar: np.ndarray,
                     axes: tuple[int, ...], n: int) -> np.ndarray:
    # d/dx of xhat = (x - mu) * ivar with mu/var internal to the slice
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return ivar * (g_hat - s1 / n - xhat * s2 / n)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"gamma/beta must have shape ({n},), got {gamma.shape}/{beta.shape}")
    _check_same_dtype(x, gamma, beta)
    bshape = [1] * x.ndim
    bshape[axis] = n
    xhat, ivar = _norm_core(x.data, (axis,))
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        other = tuple(i for i in range(x.ndim) if i != axis)
        gx = gg = gb = None
        if x.requires_grad:
            g_hat = g * gamma.data.reshape(bshape)
            gx = _norm_input_grad(g_hat, xhat, ivar, (axis,), n)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=other)
        if beta.requires_grad:
            gb = g.sum(axis=other)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-(batch, channel) normalization over the spatial axes."""
    if x.ndim != 5:
        raise DimensionError(f"instance_norm3d needs (B,C,D,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    _check_same_dtype(x, gamma, beta)
    axes = (2, 3, 4)
    n = x.shape[2] * x.shape[3] * x.shape[4]
    bshape = (1, c, 1, 1, 1)
    xhat, ivar = _norm_core(x.data, axes)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            g_hat = g * gamma.data.reshape(bshape)
            gx = _norm_input_grad(g_hat, xhat, ivar, axes, n)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3, 4))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, (x,),
                 lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise DimensionError("concat of zero tensors")
    _check_same_dtype(*ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g):
        grads = []
        start = 0
        for t, s in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            grads.append(np.ascontiguousarray(g[tuple(sl)]) if t.requires_grad else None)
            start += s
        return tuple(grads)

    return _make(out, tuple(ts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    out = np.ascontiguousarray(x.data[tuple(sl)])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[tuple(sl)] = g
        return (gx,)

    return _make(out, (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    lead = len(shape) - x.ndim
    expanded = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(x.shape) if s == 1 and shape[lead + i] != 1)

    def backward(g):
        gx = g.sum(axis=expanded, keepdims=False) if expanded else g
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward)


def sum_axes(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = tuple(axes)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(gk, x.shape)),)

    return _make(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    inv = 1.0 / x.size
    return _make(out, (x,),
                 lambda g: ((np.broadcast_to(g, x.shape) * np.asarray(inv, x.dtype)).astype(x.dtype),))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Analytic-vs-central-difference comparison for one op invocation."""

    op: str
    tolerance: float
    per_input_max: list = field(default_factory=list)
    max_rel_error: float = 0.0
    passed: bool = False
    message: str = ""

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        detail = f" ({self.message})" if self.message else ""
        return (f"[{state}] {self.op}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}){detail}")


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[Tensor],
              tol: float = 1e-4, step: float = 1e-5, name: str = "op") -> GradReport:
    """Compare hand-written gradients against central finite differences.

    ``fn`` maps the given tensors to a tensor of any shape; the harness
    sums it to a scalar.  Inputs must be float64 (float32 differences are
    swamped by rounding noise).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")

    report = GradReport(op=name, tolerance=tol)

    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = fn(*leaves)
    loss = sum_all(out)
    loss.backward()

    def eval_sum(arrs) -> float:
        with no_grad():
            ts = [Tensor(a) for a in arrs]
            return float(fn(*ts).data.sum())

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.isfinite(analytic).all():
            report.message = f"non-finite analytic gradient for input {i}"
            report.max_rel_error = float("inf")
            return report
        flat = leaf.data.reshape(-1)
        numeric = np.zeros_like(flat)
        arrs = [l.data for l in leaves]
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = eval_sum(arrs)
            flat[j] = orig - step
            fm = eval_sum(arrs)
            flat[j] = orig
            numeric[j] = (fp - fm) / (2.0 * step)
        if not np.isfinite(numeric).all():
            report.message = f"non-finite numeric gradient for input {i}"
            report.max_rel_error = float("inf")
            return report
        a = analytic.reshape(-1)
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        m = float(rel.max()) if rel.size else 0.0
        report.per_input_max.append(m)
        worst = max(worst, m)

    report.max_rel_error = worst
    report.passed = worst < tol
    return report
