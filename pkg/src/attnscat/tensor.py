"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation
returns a new tensor that remembers its parents and a closure mapping the
upstream gradient to one gradient per parent.  :func:`backward` walks the
recorded graph in reverse topological order.

Complex intermediates carry gradients in the convention
``g = dL/d(re) + 1j * dL/d(im)``; gradients flowing into real tensors are
the real part of that quantity, so leaves always hold real gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft as sfft

REAL_DTYPES = (np.float32, np.float64)
COMPLEX_OF = {np.dtype(np.float32): np.complex64, np.dtype(np.float64): np.complex128}


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (non-scalar output, reuse)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64, np.complex64, np.complex128):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if requires_grad and arr.dtype.kind == "c":
            raise TypeError("complex leaves cannot require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Build the result of a differentiable op.

        ``backward(g)`` must return one array (or ``None``) per parent.
        Non-finite results raise ``FloatingPointError``.
        """
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return self.data.dtype.kind == "c"

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _real_like(g: np.ndarray, parent: Tensor) -> np.ndarray:
    if parent.data.dtype.kind != "c" and np.iscomplexobj(g):
        g = g.real
    return g.astype(parent.dtype, copy=False) if parent.dtype.kind != "c" else g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- backward ---------------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every leaf that requires gradients.

    ``output`` must hold a single element.  Leaves reached by the graph get
    their gradient replaced (not accumulated); leaves listed in ``inputs``
    that the graph never touches receive zeros.  The graph is consumed: a
    second call without a fresh forward pass raises :class:`GraphError`.
    """
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    if output._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    for leaf in inputs:
        leaf.grad = np.zeros(leaf.shape, dtype=leaf.dtype)
    if not output.requires_grad:
        output._consumed = True
        return
    order = _toposort(output)
    for node in order:
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward call")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = np.zeros(node.shape, dtype=node.dtype) if g is None else _real_like(g, node)
            continue
        node._consumed = True
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _real_like(pg, p)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._backward = _spent
        node._consumed = True
    output._consumed = True


def _spent(g):
    raise GraphError("graph already consumed by a previous backward call")


# -- pointwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * np.conj(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * np.conj(a.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / np.conj(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * np.conj(out / b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), bw, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    if x.is_complex:
        raise TypeError("power is defined for real tensors only")
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return Tensor.from_op(out, (x,), bw, "pow")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return Tensor.from_op(out, (x,), bw, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return Tensor.from_op(out, (x,), bw, "exp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        return (g * out * (1 - out),)

    return Tensor.from_op(out, (x,), bw, "sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), bw, "clamp")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    if not isinstance(b, Tensor):
        b = _const(b, a)
    return a, b


def _const(value, like: Tensor) -> Tensor:
    arr = np.asarray(value)
    if arr.dtype.kind in "iuf":
        arr = arr.astype(like.dtype.type(0).real.dtype)
    return Tensor(arr)


# -- reductions and shape ops -----------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last two (spatial) axes."""
    return mean(x, axis=(-2, -1))


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(shape), (x,), bw, "reshape")


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def bw(g):
        return (g.transpose(inverse),)

    return Tensor.from_op(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(x.shape, dtype=np.result_type(g, x.dtype))
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(out), (x,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), bw, "matmul")


def decimate(x: Tensor, factor: int) -> Tensor:
    """Keep every ``factor``-th sample along the last two axes."""
    return getitem(x, (..., slice(None, None, factor), slice(None, None, factor)))


# -- spectral ops -----------------------------------------------------------
def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(a: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Iterative decimation-in-time radix-2 DFT along one axis (unnormalized)."""
    a = np.moveaxis(np.asarray(a), axis, -1)
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    cdtype = np.complex64 if a.dtype in (np.float32, np.complex64) else np.complex128
    lead = a.shape[:-1]
    out = a[..., _bit_reverse(n)].astype(cdtype)
    sign = 2j if inverse else -2j
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * np.pi * np.arange(half) / size).astype(cdtype)
        blocks = out.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return np.moveaxis(out, -1, axis)


_FFT_BACKEND = {"name": "pocketfft"}


def set_fft_backend(name: str) -> None:
    """Select ``"pocketfft"`` (scipy.fft) or ``"radix2"`` for fft2/ifft2."""
    if name not in ("pocketfft", "radix2"):
        raise ValueError(f"unknown FFT backend {name!r}")
    _FFT_BACKEND["name"] = name


def get_fft_backend() -> str:
    return _FFT_BACKEND["name"]


def _check_spatial(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ValueError("fft2 needs at least two axes")
    h, w = x.shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"spatial extents must be powers of two, got {h}x{w}")


def _fft2_raw(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    cdtype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    if _FFT_BACKEND["name"] == "radix2":
        out = fft_radix2(fft_radix2(x, -1, inverse), -2, inverse)
    else:
        out = sfft.ifft2(x, norm="forward") if inverse else sfft.fft2(x)
    return out.astype(cdtype, copy=False)


def fft2(x: Tensor) -> Tensor:
    """Unnormalized 2D DFT over the last two axes."""
    _check_spatial(x.data)

    def bw(g):
        return (_fft2_raw(g, inverse=True),)

    return Tensor.from_op(_fft2_raw(x.data), (x,), bw, "fft2")


def ifft2(x: Tensor) -> Tensor:
    """Inverse of :func:`fft2` (carries the 1/(HW) factor)."""
    _check_spatial(x.data)
    n = x.shape[-1] * x.shape[-2]
    inv = 1.0 / n

    def bw(g):
        return (_fft2_raw(g) * inv,)

    return Tensor.from_op(_fft2_raw(x.data, inverse=True) * inv, (x,), bw, "ifft2")


def real(x: Tensor) -> Tensor:
    def bw(g):
        return (g.real.astype(x.dtype),)

    return Tensor.from_op(np.ascontiguousarray(x.data.real), (x,), bw, "real")


def complex_modulus(z: Tensor) -> Tensor:
    """Elementwise ``|z|``; the gradient at ``z == 0`` is taken to be 0."""
    if not z.is_complex:
        raise TypeError("complex_modulus expects a complex tensor")
    r = np.abs(z.data)

    def bw(g):
        safe = np.where(r > 0, r, 1)
        return (np.where(r > 0, g * z.data / safe, 0),)

    return Tensor.from_op(r, (z,), bw, "modulus")


# -- convolution and resampling ---------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw).

    ``padding=None`` selects the zero padding that keeps H and W unchanged
    for odd kernels.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    cout, cin, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ValueError(f"conv2d input {x.shape} does not match kernel {weight.shape}")
    if padding is None:
        padding = dilation * (kh - 1) // 2
    b, _, h, w = x.shape
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    hp, wp = h + 2 * padding, w + 2 * padding
    if ekh > hp or ekw > wp:
        raise ValueError(f"kernel extent {ekh}x{ekw} exceeds padded input {hp}x{wp}")
    ho, wo = hp - ekh + 1, wp - ekw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    out = np.zeros((b, cout, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for p in range(kh):
        for q in range(kw):
            win = xp[:, :, p * dilation:p * dilation + ho, q * dilation:q * dilation + wo]
            out += np.einsum("oc,bchw->bohw", wd[:, :, p, q], win, optimize=True)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for p in range(kh):
                for q in range(kw):
                    gxp[:, :, p * dilation:p * dilation + ho, q * dilation:q * dilation + wo] += np.einsum(
                        "oc,bohw->bchw", wd[:, :, p, q], g, optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            for p in range(kh):
                for q in range(kw):
                    win = xp[:, :, p * dilation:p * dilation + ho, q * dilation:q * dilation + wo]
                    gw[:, :, p, q] = np.einsum("bohw,bchw->oc", g, win, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pool size {size}")
    blocks = x.data.reshape(*lead, h // size, size, w // size, size)
    out = blocks.max(axis=(-3, -1))
    # route the gradient to the first maximum of each window
    flat = np.moveaxis(blocks, -3, -2).reshape(*lead, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)

    def bw(g):
        onehot = (np.arange(size * size) == arg[..., None]) * g[..., None]
        onehot = onehot.reshape(*lead, h // size, w // size, size, size)
        return (np.moveaxis(onehot, -2, -3).reshape(x.shape),)

    return Tensor.from_op(out, (x,), bw, "max_pool2d")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable corner-aligned bilinear resize of the last two axes."""
    rh = bilinear_matrix(x.shape[-2], out_h, x.dtype)
    rw = bilinear_matrix(x.shape[-1], out_w, x.dtype)
    out = rh @ x.data @ rw.T

    def bw(g):
        return (rh.T @ g @ rw,)

    return Tensor.from_op(out, (x,), bw, "upsample_bilinear")


# -- finite-difference oracle -----------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, n_checks: int | None = None, seed: int = 0) -> float:
    """Compare backward() against central differences.

    ``x`` is either an array (wrapped in a fresh leaf) or an existing leaf
    tensor, e.g. a model parameter that ``f`` reads from closure; it is
    perturbed in place and restored.  ``n_checks`` limits the comparison to
    a random subset of coordinates.  Returns the maximum of
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaf = x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    leaf.requires_grad = True
    out = f(leaf)
    backward(out, inputs=[leaf])
    analytic = leaf.grad.copy()

    flat = leaf.data.reshape(-1)
    idx = np.arange(flat.size)
    if n_checks is not None and n_checks < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=n_checks, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(leaf).item()
        flat[i] = orig - eps
        fm = f(leaf).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is non-finite at perturbed coordinate {i}")
        num = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return float(worst)
