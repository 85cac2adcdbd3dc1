"""Dense tensors with tape-based reverse-mode differentiation.

Every array-valued op in this module records itself on the innermost active
:class:`Tape` when at least one of its inputs requires a gradient.  Outside of
a tape nothing is recorded, which is how inference runs.

Image tensors are laid out channel-first.  The spatial primitives accept either
a single ``(C, H, W)`` sample or a batch ``(N, C, H, W)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise GraphError("tensor was not produced on a tape; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the ops applied during one forward pass."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise GraphError("tape was already replayed; record a fresh forward pass")
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GraphError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    if not np.all(np.isfinite(gi)):
                        raise NumericError(f"non-finite gradient flowing into {inp.name or inp!r}")
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self.consumed = True
        self.nodes.clear()


_TAPES: list[Tape] = []


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(op, inputs, out, adjoint))
    return out


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _check_finite("exp", out)
    return _record("exp", out, (a,), lambda g: (g * out,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    _check_finite("power", out)
    if exponent == 0:
        return _record("pow", out, (a,), lambda g: (np.zeros_like(g),))
    return _record("pow", out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    for p in parts[1:]:
        rest = [n for i, n in enumerate(p.shape) if i != axis % p.ndim]
        ref = [n for i, n in enumerate(parts[0].shape) if i != axis % p.ndim]
        if rest != ref:
            raise ShapeError(f"cannot concatenate shapes {parts[0].shape} and {p.shape} on axis {axis}")
    cuts = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", np.concatenate([p.data for p in parts], axis=axis), tuple(parts), adjoint)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window of the last two axes."""
    shape = a.shape
    sl = (..., slice(top, top + height), slice(left, left + width))

    def adjoint(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sl] = g
        return (out,)

    return _record("crop2d", a.data[sl].copy(), (a,), adjoint)


# ------------------------------------------------------------ spatial layers


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation (no kernel flip)."""
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if kernels.ndim != 4 or kernels.shape[1] != c or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernel shape {kernels.shape} does not match input shape {x.shape}")
    o, _, k, _ = kernels.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel shape {kernels.shape} larger than padded input shape {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel shape {kernels.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernels.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    _check_finite("conv2d", out)
    hp, wp = xp.shape[2], xp.shape[3]

    def adjoint(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(kernels.shape)
        gb = gm.sum(axis=0) if bias is not None else None
        gcols = (gm @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb)

    inputs = (xb, kernels) if bias is None else (xb, kernels, bias)
    y = _record("conv2d", np.ascontiguousarray(out), inputs, adjoint)
    return _unbatch(y, squeeze)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k max pooling; ties go to the first cell in row-major order."""
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"input shape {x.shape} is not divisible by pool size {k}")
    blocks = xb.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def adjoint(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    y = _record("maxpool2d", out, (xb,), adjoint)
    return _unbatch(y, squeeze)


def upsample2d(x: Tensor, k: int) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    if k < 1:
        raise ValueError(f"upsample factor must be >= 1, got {k}")
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    out = np.repeat(np.repeat(xb.data, k, axis=2), k, axis=3)

    def adjoint(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    y = _record("upsample2d", out, (xb,), adjoint)
    return _unbatch(y, squeeze)


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax across channels independently at every pixel."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("channel_softmax received non-finite logits")
    axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[axis] < 2:
        raise ShapeError(f"channel_softmax needs >= 2 channels in (C,H,W) or (N,C,H,W), got {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("channel_softmax", p, (x,), adjoint)


def channel_log_softmax(x: Tensor) -> Tensor:
    """log(channel_softmax(x)) without forming the probabilities first."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("channel_log_softmax received non-finite logits")
    axis = x.ndim - 3
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def adjoint(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("channel_log_softmax", out, (x,), adjoint)


def log1mexp(a: Tensor, floor: float) -> Tensor:
    """log(1 - exp(a)) for a <= 0, with the result held at or above ``floor``."""
    ad = np.minimum(a.data, 0.0)
    with np.errstate(divide="ignore"):
        out = np.where(ad > -0.6931471805599453, np.log(-np.expm1(ad)), np.log1p(-np.exp(ad)))
    held = out < floor
    out = np.where(held, floor, out).astype(a.dtype)
    e = np.exp(ad)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(held, 0.0, -e / -np.expm1(ad)).astype(a.dtype)

    return _record("log1mexp", out, (a,), lambda g: (g * d,))


def pad_reflect(x: Tensor, bottom: int, right: int) -> Tensor:
    """Reflect-pad the bottom and right edges of the spatial axes."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[-2:]
    if bottom >= h or right >= w:
        raise ShapeError(f"reflect padding ({bottom}, {right}) too large for shape {x.shape}")
    rows = np.pad(np.arange(h), (0, bottom), mode="reflect")
    cols = np.pad(np.arange(w), (0, right), mode="reflect")
    out = x.data[..., rows[:, None], cols[None, :]]
    # one-hot maps fold reflected cells back onto their sources
    rmap = np.zeros((rows.size, h), dtype=x.dtype)
    rmap[np.arange(rows.size), rows] = 1
    cmap = np.zeros((cols.size, w), dtype=x.dtype)
    cmap[np.arange(cols.size), cols] = 1

    def adjoint(g):
        return (rmap.T @ g @ cmap,)

    return _record("pad_reflect", out, (x,), adjoint)


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise GraphError(f"parameter {p.name or p!r} has no gradient")
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient on {p.name or p!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.params):
            out[f"adam.m.{p.name or i}"] = self.m[i]
            out[f"adam.v.{p.name or i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i, p in enumerate(self.params):
            key = p.name or i
            self.m[i] = arrays[f"adam.m.{key}"].astype(p.dtype).copy()
            self.v[i] = arrays[f"adam.v.{key}"].astype(p.dtype).copy()
        self.t = t


# ----------------------------------------------------------------- checkpoint

MAGIC = b"CEPHRGCK"
FORMAT_VERSION = 1


def save_tensors(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block.

    Layout (little-endian): magic, u32 version, u32 meta length, meta JSON,
    u32 tensor count, then per tensor: u16 name length, name, u8 dtype code
    (4 or 8 bytes per value), u8 ndim, u32 dims, raw values.
    """
    import json

    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = 8 if arr.dtype == np.float64 else 4
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8" if code == 8 else "<f4").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = np.dtype("<f8" if code == 8 else "<f4")
        size = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(buf[pos:pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += size
    return arrays, meta
