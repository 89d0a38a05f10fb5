"""Dense float64 tensors with reverse-mode autodiff and FLOP metering.

Every other module in this package is written against the ops defined here.
Design points:

* float64 only, row-major, numpy-backed.
* every op checks its output for NaN/Inf and raises ``NumericsError`` instead
  of letting bad values propagate silently.
* the gradient tape is rebuilt on every forward pass; ``backward`` populates
  the ``grad`` buffer of each ``requires_grad`` leaf and then frees the tape.
* a tensor participates in the tape iff ``requires_grad`` is set on it or on
  one of its ancestors, so graphs over frozen weights cost nothing extra.
* FLOPs are counted into every active ``FlopsMeter`` scope, using the
  conventions spelled out in ``FLOP_CONVENTIONS``.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp_special

__all__ = [
    "Tensor",
    "FlopsMeter",
    "DimensionError",
    "ConfigurationError",
    "UsageError",
    "DegenerateInputError",
    "NumericsError",
    "tensor",
    "constant",
    "zeros",
    "ones",
    "randn",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "exp",
    "log",
    "tanh",
    "tanh_gate",
    "sigmoid",
    "gelu",
    "relu",
    "absval",
    "softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "index_select",
    "embedding",
    "tsum",
    "tmean",
    "conv2d",
    "conv2d_output_hw",
    "pixel_unshuffle",
    "pixel_shuffle",
    "rope_apply",
    "rope_angles",
    "backward",
    "finite_diff_check",
    "additive_mask",
    "causal_mask",
]

FLOP_CONVENTIONS = """\
matmul                   2*m*k*n per leading batch element (one MAC = 2 FLOPs)
conv2d                   2 * B*Cout*Hout*Wout * Cin*kh*kw
softmax / log_softmax    3 per output element (exp + sum + divide)
rope_apply               3 per output element (each 2d rotation = 6 FLOPs)
reductions (sum, mean)   1 per input element
element-wise ops         1 per output element
data movement            0 (reshape, transpose, concat, slice, gather,
                            pixel (un)shuffle)
"""


class DimensionError(ValueError):
    """Shapes or extents that cannot be combined."""


class ConfigurationError(ValueError):
    """A structurally invalid configuration (widths, spans, arch choices)."""


class UsageError(ValueError):
    """An API called outside its contract (bad arguments, missing inputs)."""


class DegenerateInputError(ValueError):
    """Inputs that make the requested computation meaningless."""


class NumericsError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


# ---------------------------------------------------------------------------
# FLOP metering
# ---------------------------------------------------------------------------

_METER_STACK: list["FlopsMeter"] = []


class FlopsMeter:
    """Accumulates FLOPs for every op executed inside a ``with`` scope.

    Counts follow ``FLOP_CONVENTIONS``.  Meters nest: an op inside two open
    scopes increments both, which is how per-component counts and a pipeline
    total can be captured in one pass.
    """

    def __init__(self) -> None:
        self.accumulated = 0

    def add(self, flops: int) -> None:
        if flops < 0:
            raise UsageError("FLOP counts are non-negative")
        self.accumulated += int(flops)

    def __enter__(self) -> "FlopsMeter":
        _METER_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _METER_STACK.remove(self)


def _count_flops(n: int) -> None:
    if _METER_STACK:
        for meter in _METER_STACK:
            meter.accumulated += int(n)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense float64 array, optionally taped for reverse-mode gradients.

    ``requires_grad`` on a leaf marks it as trainable; on an interior node it
    records that some ancestor is trainable.  ``grad`` is allocated lazily by
    ``backward`` and only ever on leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None


def _bad_item(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by '{op}'")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def randn(rng: np.random.Generator, *shape, scale: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap an op result, attaching the tape entry only when it matters."""
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# element-wise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, _unbroadcast(g * b.data, a.shape))
        acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, _unbroadcast(g / b.data, a.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    _count_flops(a.size)

    def bw(g, acc):
        acc(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def power(a, p: float) -> Tensor:
    """Element-wise ``a ** p`` for a fixed float exponent."""
    a = as_tensor(a)
    out_data = a.data ** p
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bw, f"power({p})")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g / a.data)

    return _make(out_data, (a,), bw, "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw, "tanh")


def tanh_gate(g: Tensor) -> Tensor:
    """Squash a gate into (-1, 1).  Alias for element-wise tanh."""
    return tanh(g)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + _sp_special.erf(a.data / np.sqrt(2.0)))
    out_data = a.data * cdf
    _count_flops(out_data.size)

    def bw(g, acc):
        pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
        acc(a, g * (cdf + a.data * pdf))

    return _make(out_data, (a,), bw, "gelu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g * (a.data > 0.0))

    return _make(out_data, (a,), bw, "relu")


def absval(a) -> Tensor:
    """Element-wise |a|; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    out_data = np.abs(a.data)
    _count_flops(out_data.size)

    def bw(g, acc):
        acc(a, g * np.sign(a.data))

    return _make(out_data, (a,), bw, "abs")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def additive_mask(valid: np.ndarray) -> np.ndarray:
    """Boolean validity -> additive mask (0 where valid, -inf where not)."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, -np.inf)


def causal_mask(t: int) -> np.ndarray:
    """[t, t] additive mask blocking attention to later positions."""
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = -np.inf
    return m


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    ``mask`` is an optional plain ndarray of additive biases (0 / -inf),
    broadcastable to ``x``; -inf entries get exactly zero weight.  A slice with
    no finite entry left is rejected rather than silently renormalized.
    """
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data if mask is None else x.data + np.asarray(mask, dtype=np.float64)
    if mask is not None and not np.all(np.isfinite(z).any(axis=axis)):
        raise DegenerateInputError("softmax slice fully masked out")
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = e / s
    _count_flops(3 * y.size)

    def bw(g, acc):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        acc(x, y * (g - inner))

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    m = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out_data = z - lse
    _count_flops(3 * out_data.size)
    y = np.exp(out_data)

    def bw(g, acc):
        acc(x, g - y * np.sum(g, axis=axis, keepdims=True))

    return _make(out_data, (x,), bw, "log_softmax")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast, trailing two contract."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    _count_flops(2 * m * k * n * batch)

    def bw(g, acc):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        acc(a, _unbroadcast(ga, a.shape))
        acc(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# movement ops (zero FLOPs)
# ---------------------------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def bw(g, acc):
        acc(a, g.reshape(a.shape))

    return _make(out_data, (a,), bw, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g, acc):
        acc(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise UsageError("concat of an empty list")
    axis = _norm_axis(axis, parts[0].ndim)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            acc(p, g[tuple(idx)])

    return _make(out_data, tuple(parts), bw, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[..., start:stop, ...]`` along one axis."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(
            f"slice [{start}:{stop}] invalid for extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g, acc):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        acc(a, buf)

    return _make(a.data[idx], (a,), bw, "slice")


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Gather rows along ``axis`` by an integer index array."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, idx, axis=axis)

    def bw(g, acc):
        buf = np.zeros_like(a.data)
        np.add.at(buf, _axis_index(axis, idx, a.ndim), g)
        acc(a, buf)

    return _make(out_data, (a,), bw, "index_select")


def _axis_index(axis, idx, ndim):
    sel = [slice(None)] * ndim
    sel[axis] = idx
    return tuple(sel)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up ``table[ids]``; ids is any integer ndarray."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    out_data = table.data[ids]

    def bw(g, acc):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        acc(table, buf)

    return _make(out_data, (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)
    _count_flops(a.size)

    def bw(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(out_data), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[_norm_axis(ax, a.ndim)] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def conv2d_output_hw(h: int, w: int, kh: int, kw: int, stride: int,
                     padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of [B,C,H,W] with [Cout,C,kh,kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d wants 4-d input and kernel, got {x.shape} and {kernel.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ho, wo = conv2d_output_hw(h, w, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output extent {ho}x{wo} non-positive for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # [B, C, Ho, Wo, kh, kw]
    out_data = np.einsum("bchwkl,dckl->bdhw", win, kernel.data, optimize=True)
    _count_flops(2 * bsz * cout * ho * wo * cin * kh * kw)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")

    def bw(g, acc):
        acc(kernel, np.einsum("bdhw,bchwkl->dckl", g, win, optimize=True))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = np.einsum("bdhw,dc->bchw", g, kernel.data[:, :, i, j])
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patch
        if padding:
            gxp = gxp[:, :, padding:h + padding, padding:w + padding]
        acc(x, gxp)

    out = _make(out_data, (x, kernel), bw, "conv2d")
    if bias is not None:
        out = add(out, reshape(bias, 1, cout, 1, 1))
    return out


# ---------------------------------------------------------------------------
# pixel shuffle
# ---------------------------------------------------------------------------


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: [B,C,H,W] -> [B, C*r*r, H/r, W/r].

    Output channel c*r*r + i*r + j holds the (i, j) offset within each r x r
    spatial block of input channel c.  Pure permutation, zero FLOPs.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"pixel_unshuffle wants 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise DimensionError(
            f"spatial extents {h}x{w} not divisible by factor {r}")
    out_data = (x.data.reshape(bsz, c, h // r, r, w // r, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(bsz, c * r * r, h // r, w // r))

    def bw(g, acc):
        acc(x, (g.reshape(bsz, c, r, r, h // r, w // r)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(bsz, c, h, w)))

    return _make(out_data, (x,), bw, "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space inverse of ``pixel_unshuffle``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"pixel_shuffle wants 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise DimensionError(f"channel extent {c} not divisible by {r}*{r}")
    co = c // (r * r)
    out_data = (x.data.reshape(bsz, co, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(bsz, co, h * r, w * r))

    def bw(g, acc):
        acc(x, (g.reshape(bsz, co, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(bsz, c, h, w)))

    return _make(out_data, (x,), bw, "pixel_shuffle")


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


def rope_angles(positions, d_head: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape [T, d_head/2] for the given positions."""
    if d_head % 2:
        raise DimensionError(f"rope needs an even head dim, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = pos[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive (even, odd) channel pairs of [B,T,h,d_h] by
    position * base**(-2i/d_h).  Norm-preserving per pair."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"rope_apply wants [B,T,h,d_h], got {x.shape}")
    bsz, t, h, dh = x.shape
    pos = np.asarray(positions)
    if pos.shape != (t,):
        raise DimensionError(
            f"positions length {pos.shape} does not match T={t}")
    cos, sin = rope_angles(pos, dh, base)          # [T, dh/2]
    cos = cos[None, :, None, :]
    sin = sin[None, :, None, :]
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos
    _count_flops(3 * x.size)

    def bw(g, acc):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        acc(x, gx)

    return _make(out_data, (x,), bw, "rope_apply")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from
    ``loss``, accumulating into existing buffers, then free the tape."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def acc(node: Tensor, g: np.ndarray) -> None:
        if not node.requires_grad:
            return
        key = id(node)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            node._backward_fn(g, acc)
            node._parents = ()
            node._backward_fn = None
        else:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f()`` against central
    differences over every coordinate of ``params``.

    ``f`` must rebuild its graph from the current contents of ``params`` on
    each call.  Returns max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise UsageError("finite_diff_check needs eps > 0")
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    if not plist:
        raise UsageError("finite_diff_check needs at least one parameter")
    for p in plist:
        p.zero_grad()
    loss = f()
    backward(loss)
    worst = 0.0
    for p in plist:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f().item()
            flat[i] = keep - eps
            lo = f().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
