"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Every op that touches a tensor with
``requires_grad`` records its parents and a backward closure; ``backward``
replays the recorded graph in reverse topological order.

Storage is float32 by default. ``float64_mode()`` switches newly created
tensors to float64, which is what the finite-difference checks run under.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces or receives NaN/Inf values."""


@contextlib.contextmanager
def float64_mode():
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype():
    return _DTYPE[-1]


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- graph construction ------------------------------------------------
    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> "Tensor":
        """Wrap an op result; ``backward(g)`` returns one gradient per parent."""
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- convenience -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic (same shape or python scalar only) ---------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dT into ``grad`` of every reachable tensor requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def _scalar_or_same(a: Tensor, b, name: str):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
        return b
    return float(b)


def add(a: Tensor, b) -> Tensor:
    b = _scalar_or_same(a, b, "add")
    if isinstance(b, Tensor):
        return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return Tensor.from_op(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _scalar_or_same(a, b, "mul")
    if isinstance(b, Tensor):
        return Tensor.from_op(
            a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
        )
    s = a.data.dtype.type(b)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,), "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def elu(x: Tensor) -> Tensor:
    neg_part = np.expm1(np.minimum(x.data, 0))
    out = np.where(x.data >= 0, x.data, neg_part).astype(x.dtype)
    slope = np.where(x.data >= 0, 1, neg_part + 1).astype(x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * slope,), "elu")


def sigmoid(x: Tensor) -> Tensor:
    out = (0.5 * (1 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (K, C, kh, kw) weight, (K,) bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {wc}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # im2col in channels-last layout: rows (n, ho, wo), columns (i, j, c)
    xp = _pad(x.data, padding).transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, k)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# resampling


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edge-clamped."""
    src = np.clip(_source_coords(n_in, n_out), 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    # ties (x.5) go to the lower index
    src = _source_coords(n_in, n_out)
    return np.clip(np.ceil(src - 0.5), 0, n_in - 1).astype(int)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be positive")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    mh = bilinear_matrix(h, out_h).astype(x.dtype)
    mw = bilinear_matrix(w, out_w).astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), bw, "bilinear_resize")


def nearest_resize(x, out_h: int, out_w: int):
    """Nearest-neighbour resize of an (…, H, W) array or Tensor; not differentiable."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("nearest_resize: output size must be positive")
    h, w = arr.shape[-2:]
    out = arr[..., nearest_indices(h, out_h)[:, None], nearest_indices(w, out_w)[None, :]]
    return Tensor(out, dtype=arr.dtype) if isinstance(x, Tensor) else out


# ---------------------------------------------------------------------------
# reductions


def reduce(x: Tensor, kind: str = "sum", mask=None) -> Tensor:
    """Masked sum or mean over all elements, accumulated in float64."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != x.shape:
            raise ValueError(f"reduce: mask shape {m.shape} != input shape {x.shape}")
        m = m.astype(x.dtype)
        total = float(np.sum(x.data * m, dtype=np.float64))
        count = float(np.sum(m, dtype=np.float64))
    else:
        m = None
        total = float(np.sum(x.data, dtype=np.float64))
        count = float(x.data.size)
    if kind == "mean":
        if count == 0:
            raise ValueError("empty-mask reduction")
        scale = 1.0 / count
    else:
        scale = 1.0
    out = np.asarray(total * scale, dtype=x.dtype)

    def bw(g):
        s = x.dtype.type(float(g) * scale)
        return (np.full(x.shape, s, dtype=x.dtype) if m is None else m * s,)

    return Tensor.from_op(out, (x,), bw, f"reduce_{kind}")


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between autodiff and central differences over ``params``.

    ``fn`` rebuilds the scalar loss from the current parameter values. The
    error for each parameter is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` using
    L2 norms over the checked entries. ``max_entries`` subsamples large
    parameters.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    auto = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, ga in zip(params, auto):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        ana = ga.reshape(-1)[idx].astype(np.float64)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
