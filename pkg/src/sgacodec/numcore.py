"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Everything else in the package differentiates through this module.  The
design is a small tape (each op output records a backward closure over its
inputs); graphs are rebuilt every optimization step and are single-use:
calling ``backward`` twice through the same op nodes raises.

All arithmetic is float64 and single-threaded by contract; identical inputs
and op ordering give bit-identical results on the same build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "DomainError",
    "TapeConsumedError",
    "AdamState",
    "Adam",
    "adam_step",
    "add", "sub", "mul", "div", "neg", "matmul",
    "conv2d", "transposed_conv2d",
    "leaky_relu", "exp", "log", "softplus", "sigmoid", "erf",
    "sum_", "mean_", "square", "atanh", "clamp",
    "reshape", "narrow", "floor_const", "round_ste",
    "OP_NAMES",
]

_INV_SQRT_PI_2 = 2.0 / np.sqrt(np.pi)


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data (contract violation)."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class DomainError(ValueError):
    """Op input lies outside the op's mathematical domain."""


class TapeConsumedError(RuntimeError):
    """backward() was called through op nodes that were already consumed."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array node in the computation graph.

    Leaf tensors are created directly; op outputs carry a backward closure
    and references to their parents.  ``grad`` is populated by ``backward``
    on every reachable tensor with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_consumed", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bw = None
        self._consumed = False
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Populates ``grad`` on every reachable requires_grad tensor.  Op
        nodes are consumed; leaves stay reusable across steps.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss, got shape %r" % (self.shape,))
        if self._consumed:
            raise TapeConsumedError("this graph was already backpropagated")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._consumed:
                raise TapeConsumedError("graph shares consumed op nodes from a previous backward()")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)
            if not node._leaf:
                node._consumed = True
                node._bw = None
                node._parents = ()

    def _accum(self, g: np.ndarray) -> None:
        # Never in-place: incoming g may alias a child's grad buffer.
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._bw = None
    out._consumed = False
    out._leaf = False
    needs = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(needs)
    out._parents = needs
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

OP_NAMES: list[str] = []


def _register(name: str):
    OP_NAMES.append(name)

    def deco(fn):
        return fn

    return deco


@_register("add")
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data + b.data, (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        out._bw = bw
    return out


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data - b.data, (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))
        out._bw = bw
    return out


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data * b.data, (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        out._bw = bw
    return out


@_register("div")
def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(a.data / b.data, (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._bw = bw
    return out


@_register("neg")
def neg(a) -> Tensor:
    a = _wrap(a)
    out = _make(-a.data, (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(-g)
    return out


@_register("leaky_relu")
def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = _wrap(a)
    out = _make(np.where(a.data > 0, a.data, alpha * a.data), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g * np.where(a.data > 0, 1.0, alpha))
    return out


@_register("exp")
def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    out = _make(e, (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g * e)
    return out


@_register("log")
def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    out = _make(np.log(a.data), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g / a.data)
    return out


@_register("softplus")
def softplus(a) -> Tensor:
    a = _wrap(a)
    out = _make(np.logaddexp(0.0, a.data), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g * _sp.expit(a.data))
    return out


@_register("sigmoid")
def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = _sp.expit(a.data)
    out = _make(s, (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g * s * (1.0 - s))
    return out


@_register("erf")
def erf(a) -> Tensor:
    a = _wrap(a)
    out = _make(_sp.erf(a.data), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g * _INV_SQRT_PI_2 * np.exp(-a.data * a.data))
    return out


@_register("square")
def square(a) -> Tensor:
    a = _wrap(a)
    out = _make(a.data * a.data, (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g * 2.0 * a.data)
    return out


@_register("atanh")
def atanh(a) -> Tensor:
    a = _wrap(a)
    if np.any(np.abs(a.data) >= 1.0):
        raise DomainError("atanh requires input strictly inside (-1, 1)")
    out = _make(np.arctanh(a.data), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g / (1.0 - a.data * a.data))
    return out


@_register("clamp")
def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    out = _make(np.clip(a.data, lo, hi), (a,))
    if out.requires_grad:
        # Subgradient: pass-through inside [lo, hi], zero outside.
        out._bw = lambda g: a._accum(g * ((a.data >= lo) & (a.data <= hi)))
    return out


@_register("sum")
def sum_(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())
        out._bw = bw
    return out


@_register("mean")
def mean_(a) -> Tensor:
    a = _wrap(a)
    out = _make(np.mean(a.data), (a,))
    if out.requires_grad:
        n = a.data.size
        out._bw = lambda g: a._accum(np.broadcast_to(g / n, a.data.shape).copy())
    return out


@_register("reshape")
def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = _make(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g.reshape(a.data.shape))
    return out


@_register("narrow")
def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _wrap(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make(a.data[idx].copy(), (a,))
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accum(full)
        out._bw = bw
    return out


def floor_const(a) -> Tensor:
    """floor(x) as a graph constant (zero gradient, like the rounding grid)."""
    a = _wrap(a)
    return Tensor(np.floor(a.data))


@_register("round_ste")
def round_ste(a) -> Tensor:
    """Round on the forward pass, identity gradient on the backward pass.

    Surrogate-gradient op: intentionally does not match finite differences.
    """
    a = _wrap(a)
    out = _make(np.rint(a.data), (a,))
    if out.requires_grad:
        out._bw = lambda g: a._accum(g)
    return out


# ---------------------------------------------------------------------------
# matmul and convolutions
# ---------------------------------------------------------------------------

@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} do not align")
    out = _make(a.data @ b.data, (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        out._bw = bw
    return out


def _gather_cols(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N,C,kh,kw,ho,wo) sliding windows."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + ho * s : s, v : v + wo * s : s]
    return cols


def _scatter_cols(cols: np.ndarray, hp: int, wp: int, s: int) -> np.ndarray:
    """Adjoint of _gather_cols: accumulate windows back into a padded map."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + ho * s : s, v : v + wo * s : s] += cols[:, :, u, v]
    return out


@_register("conv2d")
def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, weight (out_ch, in_ch, kh, kw)."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, wdt = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if ic != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {ic}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    bt = _wrap(b) if b is not None else None

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _gather_cols(xp, kh, kw, stride, ho, wo)
    out_d = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # (N,ho,wo,OC)
    out_d = np.ascontiguousarray(out_d.transpose(0, 3, 1, 2))
    if bt is not None:
        out_d = out_d + bt.data.reshape(1, -1, 1, 1)

    parents = (x, w) if bt is None else (x, w, bt)
    out = _make(out_d, parents)
    if out.requires_grad:
        def bw(g):
            if w.requires_grad:
                w._accum(np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
            if bt is not None and bt.requires_grad:
                bt._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N,ho,wo,C,kh,kw)
                dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
                dxp = _scatter_cols(dcols, h + 2 * pad, wdt + 2 * pad, stride)
                x._accum(dxp[:, :, pad : pad + h, pad : pad + wdt] if pad else dxp)
        out._bw = bw
    return out


@_register("transposed_conv2d")
def transposed_conv2d(x, w, b=None, stride: int = 2, pad: int = 2) -> Tensor:
    """Adjoint of the matching strided conv2d; output spatial size = input * stride.

    Weight layout (in_ch, out_ch, kh, kw).  Requires the (kernel, stride, pad)
    triple to invert the conv size map exactly, which holds for the 5/2/2
    configuration used by the networks here.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("transposed_conv2d expects 4-D input and weight")
    n, ci, h, wdt = x.data.shape
    wi, oc, kh, kw = w.data.shape
    if wi != ci:
        raise ShapeError(f"transposed_conv2d channel mismatch: input {ci}, weight {wi}")
    ho, wo = h * stride, wdt * stride
    if (ho + 2 * pad - kh) // stride + 1 != h or (wo + 2 * pad - kw) // stride + 1 != wdt:
        raise ShapeError("kernel/stride/pad do not invert the conv size map")
    bt = _wrap(b) if b is not None else None

    dcols = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N,h,w,OC,kh,kw)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    outp = _scatter_cols(dcols, ho + 2 * pad, wo + 2 * pad, stride)
    out_d = outp[:, :, pad : pad + ho, pad : pad + wo]
    if not out_d.flags.owndata:
        out_d = out_d.copy()
    if bt is not None:
        out_d = out_d + bt.data.reshape(1, -1, 1, 1)

    parents = (x, w) if bt is None else (x, w, bt)
    out = _make(out_d, parents)
    if out.requires_grad:
        def bw(g):
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
            cols_g = _gather_cols(gp, kh, kw, stride, h, wdt)  # (N,OC,kh,kw,h,w)
            if x.requires_grad:
                dx = np.tensordot(cols_g, w.data, axes=([1, 2, 3], [1, 2, 3]))  # (N,h,w,CI)
                x._accum(np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
            if w.requires_grad:
                w._accum(np.tensordot(x.data, cols_g, axes=([0, 2, 3], [0, 4, 5])))
            if bt is not None and bt.requires_grad:
                bt._accum(g.sum(axis=(0, 2, 3)))
        out._bw = bw
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter-vector Adam moments with bias correction."""

    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n: int, learning_rate: float, **kw) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return cls(learning_rate, np.zeros(n), np.zeros(n), **kw)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates state, returns new params."""
    p = np.asarray(params, dtype=np.float64).ravel()
    g = np.asarray(grad, dtype=np.float64).ravel()
    if p.size != g.size or p.size != state.first_moment.size:
        raise ShapeError("adam_step: params/grad/state lengths disagree")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = state.first_moment / (1 - state.beta1 ** t)
    v_hat = state.second_moment / (1 - state.beta2 ** t)
    return (p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).reshape(
        np.shape(params)
    )


class Adam:
    """Adam over a fixed list of ndarray parameters (one state slot each)."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._slots: list[AdamState] | None = None

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self._slots is None:
            self._slots = [
                AdamState.init(p.size, self.learning_rate,
                               beta1=self.beta1, beta2=self.beta2, eps=self.eps)
                for p in params
            ]
        if len(params) != len(self._slots):
            raise ShapeError("Adam.update: parameter list length changed")
        out = []
        for p, g, st in zip(params, grads, self._slots):
            if g is None:
                st.step_count += 1
                out.append(p)
            else:
                out.append(adam_step(p, g, st))
        return out
