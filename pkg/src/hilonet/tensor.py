"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy buffer. Operations compute eagerly and,
when a GradTape is active and some input requires gradients, append an
entry holding the backward rule. GradTape.backward walks the entries in
reverse and accumulates gradients by addition into every leaf.

Shapes are explicit: elementwise ops demand identical shapes and
broadcasting only happens through the broadcast_to op, so there is no
silent alignment to debug.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

_DEFAULT_DTYPE = np.float32
_GELU_CUBIC = 0.044715  # tanh-approximation constant
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def set_default_dtype(dtype) -> None:
    """Select the global element type (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default element type."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


_ids = itertools.count()


class Tensor:
    """N-dimensional array plus autodiff bookkeeping.

    Tensors are not mutated by ops; optimizers update parameter buffers
    in place between forward passes, which is safe on a single thread.
    """

    __slots__ = ("data", "requires_grad", "grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    """One recorded op: ids for wiring, a closure holding saved values."""

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_tape_stack: list["GradTape"] = []


def _active_tape() -> "GradTape | None":
    return _tape_stack[-1] if _tape_stack else None


class GradTape:
    """Ordered record of ops for one backward pass.

    Entries are appended in execution order, so every input of entry k
    was produced by an earlier entry or is a leaf. Single writer: one
    training step runs on one logical thread.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.entries.append(TapeEntry(op, tuple(t.id for t in inputs), output.id, backward))
        for t in inputs:
            self._tensors.setdefault(t.id, t)
        self._tensors.setdefault(output.id, output)

    def leaf_ids(self) -> set[int]:
        produced = {e.output_id for e in self.entries}
        used = {i for e in self.entries for i in e.input_ids}
        return used - produced

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every recorded leaf.

        Sets .grad on leaves that require gradients and returns them.
        Leaves that never reach the loss get zeros.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.id not in {e.output_id for e in self.entries}:
            raise ShapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            gout = grads.pop(entry.output_id, None)
            if gout is None:
                continue
            for tid, gin in zip(entry.input_ids, entry.backward(gout)):
                if gin is None:
                    continue
                if tid in grads:
                    grads[tid] = grads[tid] + gin
                else:
                    grads[tid] = gin

        result: dict[Tensor, np.ndarray] = {}
        for tid in self.leaf_ids():
            t = self._tensors[tid]
            if not t.requires_grad:
                continue
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(t.data)
            g = np.asarray(g, dtype=t.data.dtype)
            if g.shape != t.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != leaf shape {t.data.shape}")
            t.grad = g
            result[t] = g
        return result


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Wrap a forward result and record the backward rule if needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = _active_tape()
    if requires and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * np.asarray(s, dtype=a.data.dtype), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("add_scalar", (a,), a.data + np.asarray(s, dtype=a.data.dtype), lambda g: (g,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("absolute", (a,), np.abs(ad), lambda g: (g * np.sign(ad),))


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x**3)
    t = np.tanh(inner)

    def backward(g):
        sech2 = 1.0 - t * t
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner),)

    return _emit("gelu", (a,), 0.5 * x * (1.0 + t), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = a.shape
    out = a.data.reshape(shape)
    return _emit("reshape", (a,), out, lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(tensors), out, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit("narrow", (a,), a.data[index].copy(), backward)


def split(a: Tensor, parts: Sequence[int], axis: int) -> list[Tensor]:
    if sum(parts) != a.shape[axis]:
        raise ShapeError(f"split: parts {tuple(parts)} do not sum to extent {a.shape[axis]}")
    out, start = [], 0
    for p in parts:
        out.append(narrow(a, axis, start, p))
        start += p
    return out


def roll(a: Tensor, shifts: tuple[int, ...], axes: tuple[int, ...]) -> Tensor:
    out = np.roll(a.data, shifts, axis=axes)
    undo = tuple(-s for s in shifts)
    return _emit("roll", (a,), out, lambda g: (np.roll(g, undo, axis=axes),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast; gradients sum over the expanded axes."""
    in_shape = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {in_shape} -> {shape}: {exc}") from None

    def backward(g):
        extra = g.ndim - len(in_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        expanded = tuple(i for i, n in enumerate(in_shape) if n == 1 and g.shape[i] != 1)
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return _emit("broadcast_to", (a,), out, backward)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table; duplicate indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    rows, _ = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError(f"take_rows: index outside [0, {rows})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", (table,), table.data[idx].copy(), backward)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    in_shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _emit("sum", (a,), out, backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) or 1
    return scale(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch axes must match exactly or one side is 2-d."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} must be >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape} x {b.shape} do not match")
    if a.ndim != 2 and b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents {a.shape[:-2]} != {b.shape[:-2]}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return (ga, gb)

    return _emit("matmul", (a, b), out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[in, out] + bias[out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ wd.T
        flat_x = xd.reshape(-1, xd.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        gw = flat_x.T @ flat_g
        if bias is None:
            return (gx, gw)
        return (gx, gw, flat_g.sum(axis=0))

    return _emit("linear", inputs, out, backward)


# ---------------------------------------------------------------------------
# normalization and activations over rows


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with biased variance, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        flat = (-1, c)
        dgamma = (g * xhat).reshape(flat).sum(axis=0)
        dbeta = g.reshape(flat).sum(axis=0)
        return (gx.astype(xd.dtype), dgamma, dbeta)

    return _emit("layer_norm", (x, gamma, beta), out.astype(xd.dtype), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; -inf logits give exactly zero weight."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax", (x,), out, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _conv_extent(n: int, k: int, pad: int, stride: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigError(f"{what}: kernel {k} larger than padded extent {n + 2 * pad}")
    if span % stride:
        raise ConfigError(f"{what}: extent {n} with kernel {k}, pad {pad}, stride {stride} "
                          "gives a non-integer output size")
    return span // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """View of sliding windows: [B, C, Ho, Wo, kh, kw]."""
    b, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    bs, cs, hs, ws = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, ho, wo, kh, kw), (bs, cs, hs * sh, ws * sw, hs, ws), writeable=False
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """Zero-padded cross-correlation on [B, C, H, W] maps.

    weight is [Cout, Cin / groups, kh, kw]; output extents are
    (H + 2p - kh) / s + 1 and must be integral.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: ranks {x.ndim}/{weight.ndim}, expected 4/4")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if cin % groups or cout % groups:
        raise ConfigError(f"conv2d: channels {cin}->{cout} not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cin_g} channels per group, input has {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} != ({cout},)")
    ho = _conv_extent(h, kh, ph, sh, "conv2d")
    wo = _conv_extent(w, kw, pw, sw, "conv2d")

    xd = x.data
    if ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = xd
    win = _windows(xp, kh, kw, sh, sw)
    # group the channel axes: [B, g, Cin/g, Ho, Wo, kh, kw] x [g, Cout/g, Cin/g, kh, kw]
    wing = win.reshape(b, groups, cin // groups, ho, wo, kh, kw)
    wg = weight.data.reshape(groups, cout // groups, cin // groups, kh, kw)
    out = np.einsum("bgihwuv,goiuv->bgohw", wing, wg, optimize=True)
    out = out.reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gg = g.reshape(b, groups, cout // groups, ho, wo)
        gw = np.einsum("bgihwuv,bgohw->goiuv", wing, gg, optimize=True)
        gw = gw.reshape(cout, cin // groups, kh, kw)
        gxp = np.zeros_like(xp)
        gxp_g = gxp.reshape(b, groups, cin // groups, *xp.shape[2:])
        for u in range(kh):
            for v in range(kw):
                contrib = np.einsum("bgohw,goi->bgihw", gg, wg[:, :, :, u, v], optimize=True)
                gxp_g[:, :, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += contrib
        gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _emit("conv2d", inputs, out.astype(xd.dtype), backward)


def maxpool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Max pooling on [B, C, H, W]; padding uses a -inf sentinel so padded
    cells never win, and ties go to the first cell in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: rank {x.ndim}, expected 4")
    b, c, h, w = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    ho = _conv_extent(h, kh, ph, sh, "maxpool2d")
    wo = _conv_extent(w, kw, pw, sw, "maxpool2d")

    xd = x.data
    if ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    else:
        xp = xd
    win = _windows(xp, kh, kw, sh, sw)
    flat = win.reshape(b, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        u, v = np.divmod(arg, kw)
        bi, ci, hi, wi = np.indices(arg.shape)
        np.add.at(gxp, (bi, ci, hi * sh + u, wi * sw + v), g)
        return (gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp,)

    return _emit("maxpool2d", (x,), out.astype(xd.dtype), backward)
