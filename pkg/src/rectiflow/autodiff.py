"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (if any) whenever at
least one input requires a gradient. ``Graph.backward`` walks the tape in
reverse creation order, which is a valid topological order by construction.

Shapes must match exactly; the only broadcasting ops are ``mul_scalar``,
``add_bias`` (per-feature / per-channel vector) and ``add_channelwise``
(per-sample, per-channel matrix added over the spatial grid).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf."""


class Tensor:
    """Dense row-major array plus autodiff bookkeeping.

    ``data`` is float32 unless the caller explicitly asks for float64 (used by
    finite-difference oracles only).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_produced")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=DTYPE):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._produced = False

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
    def is_leaf(self) -> bool:
        return not self._produced

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, scalar: float) -> Tensor:
        return mul_scalar(self, scalar)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """A tape of operation records.

    Use as a context manager to enable tracing::

        with Graph() as g:
            loss = sq_norm(sub(model(x), target))
        grads = g.backward(loss)

    The tape is cleared after every backward pass, so two roots are never
    differentiated through the same recording.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> Graph:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        """Trainable leaf tensors touched by the tape, in first-use order."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def vjp(self, output: Tensor, cotangent: np.ndarray, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate ``cotangent`` from ``output`` back to the trainable leaves."""
        cotangent = np.asarray(cotangent, dtype=output.data.dtype)
        if cotangent.shape != output.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")
        targets = list(params) if params is not None else self.leaves()
        if params is not None:
            known = {id(t) for t in targets}
            targets.extend(t for t in self.leaves() if id(t) not in known)
        grads: dict[int, np.ndarray] = {id(output): cotangent}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        self.nodes.clear()
        result: dict[Tensor, np.ndarray] = {}
        for t in targets:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            result[t] = g
        return result

    def backward(self, root: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``root`` w.r.t. every trainable leaf.

        Leaves listed in ``params`` but unreachable from ``root`` receive zeros.
        """
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        return self.vjp(root, np.ones_like(root.data), params)


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    result = Tensor(out, dtype=out.dtype)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._produced = True
        graph.record(Node(kind, inputs, result, backward_fn))
    return result


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("mul-scalar", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))  # never overflows
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s * (1 + x.data * (1 - s))),)

    return _emit("silu", (x,), out, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D input) bias vector."""
    if b.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add-bias: input {x.shape} incompatible with bias {b.shape}")
    if x.ndim == 2:
        out = x.data + b.data
        axes = (0,)
    else:
        out = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    return _emit("add-bias", (x, b), out, lambda g: (g, g.sum(axis=axes)))


def add_channelwise(x: Tensor, v: Tensor) -> Tensor:
    """Add ``v`` of shape (N, C) to every pixel of ``x`` of shape (N, C, H, W)."""
    if x.ndim != 4 or v.ndim != 2 or x.shape[:2] != v.shape:
        raise ShapeError(f"add-channelwise: input {x.shape} incompatible with {v.shape}")
    out = x.data + v.data[:, :, None, None]
    return _emit("add-channelwise", (x, v), out, lambda g: (g, g.sum(axis=(2, 3))))


# -- reductions ----------------------------------------------------------------


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)
    return _emit("mean", (x,), out, lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def sq_norm(x: Tensor) -> Tensor:
    """Sum of squares of all entries."""
    out = np.asarray(np.dot(x.data.ravel().astype(np.float64), x.data.ravel()), dtype=x.data.dtype)
    return _emit("sq-norm", (x,), out, lambda g: (2 * g * x.data,))


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat-channels: no inputs")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat-channels: {x.shape} does not match {ref} outside dim 1")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return _emit("concat-channels", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=1)))


# -- convolution -------------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape (N, Ho, Wo, kh, kw, C), channels innermost."""
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = x.transpose(0, 2, 3, 1)
    if pad:
        xp = np.pad(xp, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """OIHW kernel as a (kh * kw * C, O) matrix matching the _im2col layout."""
    o, c, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, cols: np.ndarray | None = None) -> np.ndarray:
    if cols is None:
        cols = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, -1) @ _kernel_matrix(w)
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _conv_grad_weight(cols: np.ndarray, g: np.ndarray, w_shape: tuple[int, ...]) -> np.ndarray:
    o, c, kh, kw = w_shape
    n, ho, wo = cols.shape[:3]
    g2 = g[:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, o)
    dw = cols.reshape(n * ho * wo, -1).T @ g2  # (kh * kw * C, O)
    return np.ascontiguousarray(dw.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape: tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    if stride == 1 and kh == kw and pad <= kh - 1 and (ho, wo) == (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1):
        # full correlation with the flipped, in/out-swapped kernel
        return _conv_forward(g, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), 1, kh - 1 - pad)
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    dcols = (g2 @ _kernel_matrix(w).T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    dxp = dxp[:, pad : pad + h, pad : pad + wd, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel in-channels {w.shape[1]}")
    kh, kw = w.shape[2:]
    ho, wo = _conv_out(x.shape[2], kh, stride, padding), _conv_out(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {x.shape[2:]} with padding {padding}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    out = _conv_forward(x.data, w.data, stride, padding, cols)

    def backward(g):
        gx = _conv_grad_input(g, w.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(cols, g, w.shape) if w.requires_grad else None
        return gx, gw

    return _emit("conv2d", (x, w), out, backward)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out, kh, kw).

    Output size is ``(H - 1) * stride - 2 * padding + kh + output_padding``,
    which inverts the spatial size map of ``conv2d`` with the same settings.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d-transpose: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d-transpose: input channels {x.shape[1]} != kernel dim 0 {w.shape[0]}")
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(f"conv2d-transpose: output_padding {output_padding} must be < stride {stride}")
    kh, kw = w.shape[2:]
    n, _, h, wd = x.shape
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d-transpose: empty output for input {x.shape} kernel {w.shape}")
    out_shape = (n, w.shape[1], ho, wo)
    out = _conv_grad_input(x.data, w.data, out_shape, stride, padding)

    def backward(g):
        gx = _conv_forward(g, w.data, stride, padding) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            # same contraction as conv2d's kernel gradient, with roles of input and output swapped
            gw = _conv_grad_weight(_im2col(g, kh, kw, stride, padding), x.data, w.shape)
        return gx, gw

    return _emit("conv2d-transpose", (x, w), out, backward)


# -- resampling ----------------------------------------------------------------------


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation matrix (n_out, n_in), half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear-upsample: expected NCHW input, got {x.shape}")
    mh = bilinear_matrix(x.shape[2], size[0]).astype(x.data.dtype)
    mw = bilinear_matrix(x.shape[3], size[1]).astype(x.data.dtype)
    out = mh @ x.data @ mw.T
    return _emit("bilinear-upsample", (x,), out, lambda g: (mh.T @ g @ mw,))


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling."""
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avgpool2d: spatial dims of {x.shape} not divisible by {k}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _emit("avgpool2d", (x,), out, backward)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul-scalar": mul_scalar,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d-transpose": conv2d_transpose,
    "relu": relu,
    "silu": silu,
    "concat-channels": concat_channels,
    "mean": mean,
    "sq-norm": sq_norm,
    "bilinear-upsample": upsample_bilinear,
    "avgpool2d": avgpool2d,
    "add-bias": add_bias,
    "add-channelwise": add_channelwise,
}


def forward_op(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch an op by its registry name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)
