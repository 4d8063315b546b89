"""Dense tensors, a recording gradient tape, and the layer primitives.

All image-like tensors use the channel-last layout ``(batch, height, width,
channels)``; for drive-cycle windows height is time and width is the feature
axis.  Every operation is a pure function returning a new immutable
:class:`Tensor`.  When a :class:`GradTape` is active and one of the inputs is
tracked by it, the operation appends a node holding its vector-Jacobian
product so that :func:`backward` can replay the graph in reverse.

Example
-------
>>> w = Tensor([1.0, -1.0])
>>> with GradTape() as tape:
...     tape.watch(w)
...     loss = reduce_sum(relu(w))
>>> backward(tape, loss)[w.id].numpy()
array([1., 0.])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "ConvSpec", "GradTape", "backward",
    "conv2d", "conv_transpose2d", "dense", "relu", "pad_crop",
    "add", "sub", "mul", "absolute", "square", "sqrt",
    "reduce_sum", "reduce_mean", "std", "conv_output_size",
]

_ids = itertools.count()
_active_tapes: list["GradTape"] = []

MAX_RANK = 4


class Tensor:
    """Immutable n-d array (rank <= 4) with a process-unique ``id``.

    Values must be finite; a NaN or Inf raises :class:`NumericError` when the
    tensor is constructed, which is how non-finite values are stopped at
    every op boundary.
    """

    __slots__ = ("_data", "id")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self._init(arr)

    def _init(self, arr: np.ndarray) -> None:
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensors have at most {MAX_RANK} axes, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor of shape {arr.shape}")
        arr.setflags(write=False)
        self._data = arr
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array without copying.
        t = cls.__new__(cls)
        t._init(arr)
        return t

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying values."""
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, id={self.id})"


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]


def _t(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    out: int
    inputs: tuple
    vjp: Callable


class GradTape:
    """Records differentiable operations executed inside its ``with`` block.

    Only operations with at least one tracked input are recorded; tracked
    tensors are the watched ones plus every output of a recorded node, so the
    node list is always in topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: dict[int, Tensor] = {}
        self._tracked: set[int] = set()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self.watched[t.id] = t
            self._tracked.add(t.id)

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def _maybe_record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        if any(t.id in self._tracked for t in inputs):
            self.nodes.append(_Node(out.id, tuple(t.id for t in inputs), vjp))
            self._tracked.add(out.id)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        grads = backward(self, loss)
        return [grads[s.id] if s.id in grads else _zeros_like(s) for s in sources]


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros(t.shape, dtype=t.dtype))


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    for tape in _active_tapes:
        tape._maybe_record(out, inputs, vjp)
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a map from each watched tensor's id to d(loss)/d(tensor).
    Watched tensors that do not influence the loss get a zero gradient.
    Gradients from multiple uses of one tensor are summed.
    """
    if loss.size != 1 or loss.shape not in ((), (1,)):
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None) if node.out not in tape.watched else grads.get(node.out)
        if g is None:
            continue
        for tid, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or tid not in tape._tracked:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    return {
        tid: Tensor._wrap(np.asarray(grads[tid], dtype=t.dtype).reshape(t.shape))
        if tid in grads else _zeros_like(t)
        for tid, t in tape.watched.items()
    }


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = Tensor._wrap(a._data + b._data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = Tensor._wrap(a._data - b._data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = Tensor._wrap(a._data * b._data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b._data, a.shape), _unbroadcast(g * a._data, b.shape)),
    )


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is 0."""
    sign = np.sign(x._data)
    out = Tensor._wrap(np.abs(x._data))
    return _record(out, (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    out = Tensor._wrap(x._data * x._data)
    return _record(out, (x,), lambda g: (2.0 * g * x._data,))


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; the gradient at 0 is defined as 0."""
    r = np.sqrt(x._data)
    out = Tensor._wrap(r)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
        return (g * d,)

    return _record(out, (x,), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x._data.ndim)
    out = Tensor._wrap(np.asarray(x._data.sum(axis=ax, keepdims=keepdims)))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x._data.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    out = Tensor._wrap(np.asarray(x._data.mean(axis=ax, keepdims=keepdims)))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, x.shape),)

    return _record(out, (x,), vjp)


def std(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (N-denominator) standard deviation, composed from recorded ops."""
    centered = sub(x, reduce_mean(x, axis=axis, keepdims=True))
    return sqrt(reduce_mean(square(centered), axis=axis, keepdims=keepdims))


def relu(x: Tensor) -> Tensor:
    """max(0, x) elementwise; the subgradient at exactly 0 is 0."""
    mask = x._data > 0
    out = Tensor._wrap(np.where(mask, x._data, 0.0).astype(x.dtype, copy=False))
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for ``x`` of shape (N, in)."""
    if x._data.ndim not in (1, 2) or weights._data.ndim != 2:
        raise DimensionError(f"dense expects (N, in) @ (in, out), got {x.shape} @ {weights.shape}")
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"dense inner extents differ: {x.shape[-1]} vs {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")
    xd, wd = x._data, weights._data
    out = Tensor._wrap(xd @ wd + bias._data)

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        x2 = xd.reshape(-1, wd.shape[0])
        return (g @ wd.T, x2.T @ g2, g2.sum(axis=0))

    return _record(out, (x, weights, bias), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolutional layer.

    ``padding`` is ``"same"`` (half padding, output extent ceil(in/stride))
    or ``"valid"`` (no padding).  ``output_size`` is only consulted by
    :func:`conv_transpose2d`, where it fixes the otherwise ambiguous output
    extent for strides above one.
    """

    kernel_height: int
    kernel_width: int
    stride_h: int = 1
    stride_w: int = 1
    filters: int = 1
    padding: str = "same"
    output_size: Optional[tuple] = None

    def __post_init__(self):
        for name in ("kernel_height", "kernel_width", "stride_h", "stride_w", "filters"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ContractError(f"ConvSpec.{name} must be a positive integer, got {v!r}")
        if self.padding not in ("same", "valid"):
            raise ContractError(f"ConvSpec.padding must be 'same' or 'valid', got {self.padding!r}")
        if self.output_size is not None:
            object.__setattr__(self, "output_size", tuple(int(v) for v in self.output_size))

    @property
    def kernel(self) -> tuple:
        return (self.kernel_height, self.kernel_width)

    @property
    def stride(self) -> tuple:
        return (self.stride_h, self.stride_w)


def _axis_geometry(n_in: int, k: int, s: int, padding: str) -> tuple:
    """(n_out, pad_before, pad_after) for one spatial axis of a forward conv."""
    if padding == "same":
        n_out = -(-n_in // s)
        total = max((n_out - 1) * s + k - n_in, 0)
        return n_out, total // 2, total - total // 2
    n_out = (n_in - k) // s + 1
    if n_out < 1:
        raise DimensionError(f"kernel {k} larger than input extent {n_in} with valid padding")
    return n_out, 0, 0


def conv_output_size(in_hw: tuple, spec: ConvSpec) -> tuple:
    """Spatial output extent of :func:`conv2d` for input extent ``in_hw``."""
    return tuple(
        _axis_geometry(n, k, s, spec.padding)[0]
        for n, k, s in zip(in_hw, spec.kernel, spec.stride)
    )


def _geometry(in_hw, spec):
    gh = _axis_geometry(in_hw[0], spec.kernel_height, spec.stride_h, spec.padding)
    gw = _axis_geometry(in_hw[1], spec.kernel_width, spec.stride_w, spec.padding)
    return (gh[0], gw[0]), ((gh[1], gh[2]), (gw[1], gw[2]))


# Rows of the im2col matrix materialised at once; bounds peak memory.
_CHUNK_ELEMS = 1 << 22


def _windows(xp, kernel, stride, out_hw):
    """View of shape (b, ho, wo, kh, kw, c) over an already padded input."""
    kh, kw = kernel
    ho, wo = out_hw
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    v = v[:, : stride[0] * (ho - 1) + 1 : stride[0], : stride[1] * (wo - 1) + 1 : stride[1]]
    return v.transpose(0, 1, 2, 4, 5, 3)


def _batch_chunks(b, row_elems):
    step = max(1, _CHUNK_ELEMS // max(row_elems, 1))
    for lo in range(0, b, step):
        yield slice(lo, min(b, lo + step))


def _corr(x, w, stride, pads, out_hw):
    """out[b,p,q,f] = sum_{i,j,c} xpad[b, p*sh+i, q*sw+j, c] * w[i,j,c,f]."""
    b = x.shape[0]
    kh, kw, c, f = w.shape
    ho, wo = out_hw
    xp = np.pad(x, ((0, 0), pads[0], pads[1], (0, 0)))
    w2 = w.reshape(kh * kw * c, f)
    out = np.empty((b, ho, wo, f), dtype=x.dtype)
    win = _windows(xp, (kh, kw), stride, out_hw)
    for sl in _batch_chunks(b, ho * wo * kh * kw * c):
        cols = win[sl].reshape(-1, kh * kw * c)
        out[sl] = (cols @ w2).reshape(-1, ho, wo, f)
    return out


def _scatter(g, w, stride, pads, in_hw):
    """Adjoint of :func:`_corr` with respect to its input.

    Kernel taps are accumulated into a phase-major buffer
    ``(sh, sw, c, b, Hp/sh, Wp/sw)`` where every tap lands on a contiguous
    block; one transpose at the end restores the channel-last layout.
    """
    b, ho, wo, f = g.shape
    kh, kw, c, _ = w.shape
    h, wd = in_hw
    sh, sw = stride
    hp, wp = h + pads[0][0] + pads[0][1], wd + pads[1][0] + pads[1][1]
    hs, ws = -(-hp // sh), -(-wp // sw)
    buf = np.zeros((sh, sw, c, b, hs, ws), dtype=g.dtype)
    w2 = w.reshape(kh * kw * c, f)
    for sl in _batch_chunks(b, ho * wo * kh * kw * c):
        gi = g[sl]
        nb = gi.shape[0]
        cols = (w2 @ gi.reshape(-1, f).T).reshape(kh, kw, c, nb, ho, wo)
        dst = buf[:, :, :, sl]
        for i in range(kh):
            for j in range(kw):
                dst[i % sh, j % sw, :, :, i // sh : i // sh + ho, j // sw : j // sw + wo] += cols[i, j]
    xp = buf.transpose(3, 4, 0, 5, 1, 2).reshape(b, hs * sh, ws * sw, c)
    return np.ascontiguousarray(xp[:, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + wd, :])


def _corr_wgrad(x, g, kernel, stride, pads):
    """Adjoint of :func:`_corr` with respect to its weights."""
    b, c = x.shape[0], x.shape[3]
    ho, wo, f = g.shape[1:]
    kh, kw = kernel
    xp = np.pad(x, ((0, 0), pads[0], pads[1], (0, 0)))
    win = _windows(xp, kernel, stride, (ho, wo))
    dw = np.zeros((kh * kw * c, f), dtype=x.dtype)
    for sl in _batch_chunks(b, ho * wo * kh * kw * c):
        cols = win[sl].reshape(-1, kh * kw * c)
        dw += cols.T @ g[sl].reshape(-1, f)
    return dw.reshape(kh, kw, c, f)


def _check_rank4(x: Tensor, what: str) -> None:
    if x._data.ndim != 4:
        raise DimensionError(f"{what} must be (batch, height, width, channels), got shape {x.shape}")


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation plus bias.

    ``weights`` has shape (kernel_h, kernel_w, in_channels, filters).
    """
    _check_rank4(x, "conv2d input")
    expected = spec.kernel + (x.shape[3], spec.filters)
    if weights.shape != expected:
        raise DimensionError(
            f"conv2d weights shape {weights.shape} != expected (kh, kw, in_channels, filters) = {expected} "
            f"for input with {x.shape[3]} channels"
        )
    if bias.shape != (spec.filters,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({spec.filters},)")
    in_hw = x.shape[1:3]
    out_hw, pads = _geometry(in_hw, spec)
    xd, wd = x._data, weights._data
    out = Tensor._wrap(_corr(xd, wd, spec.stride, pads, out_hw) + bias._data)

    def vjp(g):
        return (
            _scatter(g, wd, spec.stride, pads, in_hw),
            _corr_wgrad(xd, g, spec.kernel, spec.stride, pads),
            g.sum(axis=(0, 1, 2)),
        )

    return _record(out, (x, weights, bias), vjp)


def _transpose_output_size(in_hw, spec):
    if spec.output_size is not None:
        return spec.output_size
    if spec.stride == (1, 1):
        if spec.padding == "same":
            return tuple(in_hw)
        return (in_hw[0] + spec.kernel_height - 1, in_hw[1] + spec.kernel_width - 1)
    raise DimensionError(
        f"transposed conv with stride {spec.stride} needs an explicit output_size"
    )


def conv_transpose2d(y: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`) plus bias.

    ``weights`` has shape (kernel_h, kernel_w, filters, in_channels), i.e. the
    same array a forward conv from ``filters`` to ``in_channels`` channels
    would use.  The output extent is ``spec.output_size``; the input extent
    must equal the forward conv output extent of that size.
    """
    _check_rank4(y, "conv_transpose2d input")
    expected = spec.kernel + (spec.filters, y.shape[3])
    if weights.shape != expected:
        raise DimensionError(
            f"conv_transpose2d weights shape {weights.shape} != expected (kh, kw, filters, in_channels) = "
            f"{expected} for input with {y.shape[3]} channels"
        )
    if bias.shape != (spec.filters,):
        raise DimensionError(f"conv_transpose2d bias shape {bias.shape} != ({spec.filters},)")
    out_hw = _transpose_output_size(y.shape[1:3], spec)
    fwd_hw, pads = _geometry(out_hw, spec)
    if fwd_hw != tuple(y.shape[1:3]):
        raise DimensionError(
            f"output size {out_hw} is inconsistent with input extent {y.shape[1:3]} "
            f"under stride {spec.stride} and {spec.padding} padding"
        )
    yd, wd = y._data, weights._data
    out = Tensor._wrap(_scatter(yd, wd, spec.stride, pads, out_hw) + bias._data)

    def vjp(g):
        return (
            _corr(g, wd, spec.stride, pads, fwd_hw),
            _corr_wgrad(g, yd, spec.kernel, spec.stride, pads),
            g.sum(axis=(0, 1, 2)),
        )

    return _record(out, (y, weights, bias), vjp)


# ---------------------------------------------------------------------------
# pad / crop
# ---------------------------------------------------------------------------


def _hw_axes(x: Tensor) -> tuple:
    if x._data.ndim == 2:
        return (0, 1)
    if x._data.ndim == 4:
        return (1, 2)
    raise DimensionError(f"pad_crop works on (H, W) or (B, H, W, C) tensors, got {x.shape}")


def pad_crop(x: Tensor, target_h: int, target_w: int, mode: str) -> Tensor:
    """Zero-pad or crop the two spatial axes at their high end."""
    ah, aw = _hw_axes(x)
    h, w = x.shape[ah], x.shape[aw]
    if mode == "pad":
        if target_h < h or target_w < w:
            raise DimensionError(f"cannot pad {(h, w)} down to {(target_h, target_w)}")
        widths = [(0, 0)] * x._data.ndim
        widths[ah] = (0, target_h - h)
        widths[aw] = (0, target_w - w)
        out = Tensor._wrap(np.pad(x._data, widths))
        sl = [slice(None)] * x._data.ndim
        sl[ah], sl[aw] = slice(0, h), slice(0, w)
        sl = tuple(sl)
        return _record(out, (x,), lambda g: (g[sl],))
    if mode == "crop":
        if target_h > h or target_w > w:
            raise DimensionError(f"cannot crop {(h, w)} up to {(target_h, target_w)}")
        sl = [slice(None)] * x._data.ndim
        sl[ah], sl[aw] = slice(0, target_h), slice(0, target_w)
        sl = tuple(sl)
        out = Tensor._wrap(np.array(x._data[sl]))

        def vjp(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        return _record(out, (x,), vjp)
    raise ContractError(f"mode must be 'pad' or 'crop', got {mode!r}")
