"""Dense real tensors with reverse-mode differentiation on an explicit tape.

The op set is exactly what the stylization pipeline needs, nothing more.
Every forward result is checked for NaN/Inf and fails fast. Broadcasting is
restricted to trailing-axis vectors (per-channel affine parameters) so each
vector-Jacobian product stays hand-auditable. 64-bit is the default
precision; pass float32 data explicitly for the fast mode.

Ops record onto the currently active :class:`Tape` (entered as a context
manager). With no active tape they run as plain forward evaluation.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64

_active_tape: Optional["Tape"] = None


class Tensor:
    """An n-dimensional real array with an optional gradient slot.

    Data is immutable by convention once created; only optimizers mutate
    ``data`` in place, and only ``backward`` populates ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A non-differentiable view of the same values."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        return out

    def copy(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data.copy()
        out.requires_grad = self.requires_grad
        out.grad = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of op nodes; backward walks it in exact reverse order.

    Single-threaded: one tape per forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), vjp))
        self._produced.add(id(out))

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _active_tape


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def make_node(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a forward result as a Tensor and record its VJP on the active tape.

    ``vjp(g)`` must return one gradient array (or None) per input, in order.
    This is the extension point used by the fused ops in the ssm and model
    modules.
    """
    _ensure_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Traversal order is the exact reverse of recording order. Tensors with
    requires_grad=False are left untouched.
    """
    if loss.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss.requires_grad and id(loss) not in tape._produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones((), dtype=loss.data.dtype))
    }
    for node in reversed(tape.nodes):
        entry = grads.pop(id(node.out), None)
        if entry is None:
            continue
        gout = entry[1]
        gins = node.vjp(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = (inp, grads[key][1] + gin)
            else:
                grads[key] = (inp, gin)

    # Flush accumulated gradients into leaves; zero-fill participating
    # requires_grad leaves the loss turned out not to depend on.
    for tensor, g in grads.values():
        if tensor.requires_grad:
            tensor.grad = g if tensor.grad is None else tensor.grad + g
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in tape._produced and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Creation helpers


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def scalar(value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# Elementwise and affine ops


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """'same' for equal shapes, 'trail' for (.., C) vs (C,); error otherwise."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return "trail"
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_trailing(g: np.ndarray, ndim_keep: int) -> np.ndarray:
    axes = tuple(range(g.ndim - ndim_keep))
    return g.sum(axis=axes) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)

    def vjp(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = g if kind == "same" else _reduce_trailing(g, 1)
        return ga, gb

    return make_node(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)

    def vjp(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = -g if kind == "same" else -_reduce_trailing(g, 1)
        return ga, gb

    return make_node(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = g * b_data if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = g * a_data
        if kind == "trail":
            gb = _reduce_trailing(gb, 1)
        return ga, gb

    return make_node(a_data * b_data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"div needs equal shapes, got {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = g / b_data if a.requires_grad else None
        gb = -g * a_data / (b_data * b_data) if b.requires_grad else None
        return ga, gb

    return make_node(a_data / b_data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_node(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def rsub_scalar(c: float, a: Tensor) -> Tensor:
    """c - a, for expressions like 1 - cos."""
    return make_node(float(c) - a.data, (a,), lambda g: (-g,), "rsub_scalar")


# ---------------------------------------------------------------------------
# Nonlinearities


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return make_node(out, (a,), vjp, "silu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return make_node(out, (a,), lambda g: (g * s,), "softplus")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return make_node(out, (a,), vjp, "sqrt")


def square(a: Tensor) -> Tensor:
    a_data = a.data
    return make_node(a_data * a_data, (a,), lambda g: (g * 2.0 * a_data,), "square")


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = g @ b_data.T if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = np.outer(a_data, g) if a_data.ndim == 1 else a_data.T @ g
        return ga, gb

    return make_node(a_data @ b_data, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis of x."""
    if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear weight/bias shapes {w.shape}, {b.shape}")
    if x.shape[-1:] != w.shape[:1]:
        raise DimensionError(f"linear input {x.shape} vs weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), vjp, "linear")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply a per-feature affine."""
    c = x.shape[-1] if x.ndim else 0
    if c < 2:
        raise DimensionError(f"layer_norm needs a feature axis of size >= 2, got {x.shape}")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError("layer_norm gain/bias must match the feature axis")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = gain.data * xhat + bias.data

    def vjp(g):
        dxhat = g * gain.data
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = istd * (dxhat - m1 - xhat * m2)
        else:
            gx = None
        ggain = _reduce_trailing(g * xhat, 1) if gain.requires_grad else None
        gbias = _reduce_trailing(g, 1) if bias.requires_grad else None
        return gx, ggain, gbias

    return make_node(out, (x, gain, bias), vjp, "layer_norm")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal vectors, got {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = g * b_data if a.requires_grad else None
        gb = g * a_data if b.requires_grad else None
        return ga, gb

    return make_node(np.asarray(a_data @ b_data), (a, b), vjp, "dot")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_node(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_all"
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return make_node(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
        "mean_all",
    )


def spatial_mean(a: Tensor) -> Tensor:
    """(H, W, C) -> (C,), the global average pool."""
    if a.ndim != 3:
        raise DimensionError(f"spatial_mean expects (H, W, C), got {a.shape}")
    h, w, _ = a.shape
    n = h * w

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return make_node(a.data.mean(axis=(0, 1)), (a,), vjp, "spatial_mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    orig = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) of a 1-D tensor."""
    if a.ndim != 1 or start < 0 or start + length > a.shape[0]:
        raise DimensionError(f"narrow({start}, {length}) on shape {a.shape}")

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[start : start + length] = g
        return (gx,)

    return make_node(a.data[start : start + length].copy(), (a,), vjp, "narrow")


def softmax_last(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (a,), vjp, "softmax_last")


def l2_normalize(a: Tensor) -> Tensor:
    """Unit-norm a 1-D vector; rejects vectors with (near-)zero norm."""
    if a.ndim != 1:
        raise DimensionError(f"l2_normalize expects a vector, got {a.shape}")
    n = float(np.linalg.norm(a.data))
    if n < 1e-12:
        raise DegenerateInputError("cannot normalize a zero vector")
    out = a.data / n

    def vjp(g):
        return ((g - out * (out @ g)) / n,)

    return make_node(out, (a,), vjp, "l2_normalize")


def site_l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the channel vector at every spatial site of an (H, W, C) map."""
    if a.ndim != 3:
        raise DimensionError(f"site_l2_normalize expects (H, W, C), got {a.shape}")
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    out = a.data / n

    def vjp(g):
        return ((g - out * (out * g).sum(axis=-1, keepdims=True)) / n,)

    return make_node(out, (a,), vjp, "site_l2_normalize")


# ---------------------------------------------------------------------------
# Convolutions (channels-last, square stride/padding)


def _conv_out_size(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, p: int) -> np.ndarray:
    """(H, W, C) -> (Ho*Wo, kh*kw*C) patch matrix."""
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::s, ::s]  # (Ho, Wo, C, kh, kw)
    ho, wo = win.shape[0], win.shape[1]
    return win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * x.shape[2]), ho, wo


def _conv_fwd(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    cols, ho, wo = _im2col(x, kh, kw, s, p)
    return (cols @ w.reshape(kh * kw * cin, cout)).reshape(ho, wo, cout)


def _conv_gw(x: np.ndarray, g: np.ndarray, s: int, p: int, wshape) -> np.ndarray:
    kh, kw, cin, cout = wshape
    cols, ho, wo = _im2col(x, kh, kw, s, p)
    return (cols.T @ g.reshape(ho * wo, cout)).reshape(kh, kw, cin, cout)


def _conv_gx(g: np.ndarray, w: np.ndarray, s: int, p: int, xshape) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    h, wid, _ = xshape
    ho, wo = g.shape[0], g.shape[1]
    gcols = g.reshape(ho * wo, cout) @ w.reshape(kh * kw * cin, cout).T
    gc = gcols.reshape(ho, wo, kh, kw, cin)
    gx = np.zeros((h + 2 * p, wid + 2 * p, cin), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[i : i + s * ho : s, j : j + s * wo : s, :] += gc[:, :, i, j, :]
    return gx[p : p + h, p : p + wid] if p else gx


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution: x (H, W, Cin), w (kh, kw, Cin, Cout), b (Cout,)."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise DimensionError(f"conv2d shapes {x.shape}, {w.shape}")
    if b.shape != (w.shape[3],):
        raise DimensionError(f"conv2d bias {b.shape} vs {w.shape[3]} channels")
    if _conv_out_size(x.shape[0], w.shape[0], stride, padding) < 1:
        raise DimensionError(f"conv2d input {x.shape} too small for kernel {w.shape}")
    out = _conv_fwd(x.data, w.data, stride, padding) + b.data

    def vjp(g):
        gx = _conv_gx(g, w.data, stride, padding, x.shape) if x.requires_grad else None
        gw = _conv_gw(x.data, g, stride, padding, w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 1)) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), vjp, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed 2-D convolution, the adjoint of conv2d.

    x is (H, W, Cin), w is (kh, kw, Cout, Cin), output is
    (stride*(H-1) + kh - 2*padding, ..., Cout).
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d_transpose shapes {x.shape}, {w.shape}")
    if b.shape != (w.shape[2],):
        raise DimensionError(f"conv2d_transpose bias {b.shape} vs {w.shape[2]} channels")
    kh = w.shape[0]
    ho = stride * (x.shape[0] - 1) + kh - 2 * padding
    wo = stride * (x.shape[1] - 1) + kh - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d_transpose output would be empty")
    zshape = (ho, wo, w.shape[2])
    out = _conv_gx(x.data, w.data, stride, padding, zshape) + b.data

    def vjp(g):
        gx = _conv_fwd(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_gw(g, x.data, stride, padding, w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 1)) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), vjp, "conv2d_transpose")
