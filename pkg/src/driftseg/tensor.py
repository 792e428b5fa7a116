"""Minimal reverse-mode autodiff on dense rank-4 (N, C, H, W) float64 tensors.

Everything downstream (attention blocks, the segmentation model, the loss)
is composed from the differentiable operations in this module.  The graph is
define-by-run: each op returns a new Tensor holding references to its parents
and a closure that propagates the output gradient to them.  ``backward``
linearizes the graph into a Tape (topological order) and replays it in
reverse.

Only two broadcast patterns are legal for elementwise multiplication:
a channel gate ``(N,C,1,1) * (N,C,H,W)`` and a spatial gate
``(N,1,H,W) * (N,C,H,W)``.  Everything else must match shapes exactly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NumericsError",
    "tensor",
    "zeros",
    "conv2d",
    "upsample2x",
    "pool_global",
    "pool_directional",
    "pool_across_channels",
    "pointwise",
    "elementwise",
    "concat",
    "split",
    "reshape",
    "transpose",
    "matmul",
    "linear",
    "softmax_last",
    "sum_all",
    "affine",
    "log",
    "clamp",
    "sdiv",
    "backward",
    "grad_check",
]


class TensorError(Exception):
    """Base class for tensor-level failures."""


class ShapeError(TensorError):
    """Operands have incompatible or malformed shapes."""


class NumericsError(TensorError):
    """A NaN or Inf appeared in a value or gradient."""


Shape4 = tuple[int, int, int, int]


def _as4d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"tensor data must be rank 4 (N,C,H,W), got shape {arr.shape}")
    return arr


class Tensor:
    """Dense (N, C, H, W) float64 array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[np.ndarray], None] | None = None,
                 op: str = "leaf"):
        self.data = _as4d(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite value in op '{op}'")
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Shape4:
        return self.data.shape  # type: ignore[return-value]

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from array-like rank-4 data."""
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Shape4, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


class Tape:
    """Topological linearization of the graph reachable from a root tensor.

    ``nodes`` is ordered so every node's parents precede it; replaying it in
    reverse propagates gradients to every leaf.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = nodes


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward requires a scalar (1,1,1,1) loss, got {loss.shape}")
    tape = Tape(loss)
    for node in tape.nodes:
        node._grad = None
    loss._grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is None or node._grad is None:
            continue
        if not np.all(np.isfinite(node._grad)):
            raise NumericsError(f"non-finite gradient at op '{node.op}'")
        node._backward(node._grad)


# ---------------------------------------------------------------------------
# convolution / upsampling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,Ci,H,W) with kernels ``w`` (Co,Ci,k,k).

    The optional bias ``b`` has shape (1,Co,1,1).  Output spatial extent is
    ``floor((H + 2*pad - k)/stride) + 1`` per axis.  Implemented with an
    im2col matrix so forward and backward are single matmuls.
    """
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv2d: input has {ci} channels but kernel expects {ci_w}")
    if b is not None and b.shape != (1, co, 1, 1):
        raise ShapeError(f"conv2d: bias shape {b.shape} != (1,{co},1,1)")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: non-positive output extent ({oh},{ow}) for input ({h},{wd}), "
            f"kernel ({kh},{kw}), stride {stride}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (N,Ci,OH,OW,kh,kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, ci * kh * kw, oh * ow)
    wmat = w.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, co, oh, ow)
    if b is not None:
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def _bwd(g: np.ndarray) -> None:
        gmat = g.reshape(n, co, oh * ow)
        w.accumulate_grad(np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
                          .reshape(w.shape))
        if b is not None:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))
        dcols = np.matmul(wmat.T, gmat).reshape(n, ci, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        x.accumulate_grad(dx)

    return Tensor(out, _parents=parents, _backward=_bwd, op="conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _bwd(g: np.ndarray) -> None:
        dx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        x.accumulate_grad(dx)

    return Tensor(out, _parents=(x,), _backward=_bwd, op="upsample2x")


# ---------------------------------------------------------------------------
# pooling


def pool_global(x: Tensor, mode: str) -> Tensor:
    """Per-channel spatial reduction to (N,C,1,1); mode 'avg' or 'max'.

    Max routes its gradient only to the first (row-major) argmax position.
    """
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("pool_global: empty spatial extent")
    flat = x.data.reshape(n, c, h * w)
    if mode == "avg":
        out = flat.mean(axis=2).reshape(n, c, 1, 1)

        def _bwd(g: np.ndarray) -> None:
            x.accumulate_grad(np.broadcast_to(g / (h * w), x.shape).copy())
    elif mode == "max":
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(n, c, 1, 1)

        def _bwd(g: np.ndarray) -> None:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, arg[:, :, None], g.reshape(n, c, 1), axis=2)
            x.accumulate_grad(dflat.reshape(x.shape))
    else:
        raise ShapeError(f"pool_global: unknown mode {mode!r}")
    return Tensor(out, _parents=(x,), _backward=_bwd, op=f"pool_global_{mode}")


def pool_directional(x: Tensor, axis: str) -> Tensor:
    """Average along one spatial direction.

    axis='width'  -> (N,C,H,1), the mean over columns of each row;
    axis='height' -> (N,C,1,W), the mean over rows of each column.
    """
    n, c, h, w = x.shape
    if axis == "width":
        if w < 1:
            raise ShapeError("pool_directional: zero width")
        out = x.data.mean(axis=3, keepdims=True)

        def _bwd(g: np.ndarray) -> None:
            x.accumulate_grad(np.broadcast_to(g / w, x.shape).copy())
    elif axis == "height":
        if h < 1:
            raise ShapeError("pool_directional: zero height")
        out = x.data.mean(axis=2, keepdims=True)

        def _bwd(g: np.ndarray) -> None:
            x.accumulate_grad(np.broadcast_to(g / h, x.shape).copy())
    else:
        raise ShapeError(f"pool_directional: axis must be 'height' or 'width', got {axis!r}")
    return Tensor(out, _parents=(x,), _backward=_bwd, op=f"pool_dir_{axis}")


def pool_across_channels(x: Tensor, mode: str) -> Tensor:
    """Per-position reduction over the channel axis to (N,1,H,W)."""
    n, c, h, w = x.shape
    if c < 1:
        raise ShapeError("pool_across_channels: no channels")
    if mode == "avg":
        out = x.data.mean(axis=1, keepdims=True)

        def _bwd(g: np.ndarray) -> None:
            x.accumulate_grad(np.broadcast_to(g / c, x.shape).copy())
    elif mode == "max":
        arg = x.data.argmax(axis=1)
        out = np.take_along_axis(x.data, arg[:, None], axis=1)

        def _bwd(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, arg[:, None], g, axis=1)
            x.accumulate_grad(dx)
    else:
        raise ShapeError(f"pool_across_channels: unknown mode {mode!r}")
    return Tensor(out, _parents=(x,), _backward=_bwd, op=f"pool_chan_{mode}")


# ---------------------------------------------------------------------------
# pointwise / elementwise


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Elementwise nonlinearity; fn is 'sigmoid' or 'relu'."""
    if fn == "sigmoid":
        out = _sigmoid(x.data)

        def _bwd(g: np.ndarray) -> None:
            x.accumulate_grad(g * out * (1.0 - out))
    elif fn == "relu":
        out = np.maximum(x.data, 0.0)

        def _bwd(g: np.ndarray) -> None:
            x.accumulate_grad(g * (x.data > 0))
    else:
        raise ShapeError(f"pointwise: unknown fn {fn!r}")
    return Tensor(out, _parents=(x,), _backward=_bwd, op=fn)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def _bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g / x.data)

    return Tensor(out, _parents=(x,), _backward=_bwd, op="log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where the clamp is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def _bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * inside)

    return Tensor(out, _parents=(x,), _backward=_bwd, op="clamp")


def affine(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    """a*x + b with plain scalars; used for scaling and constant shifts."""
    out = a * x.data + b

    def _bwd(g: np.ndarray) -> None:
        x.accumulate_grad(a * g)

    return Tensor(out, _parents=(x,), _backward=_bwd, op="affine")


def _gate_axes(a: Shape4, b: Shape4) -> tuple[int, ...] | None:
    """Axes the gate ``b`` was expanded over when broadcast against ``a``.

    Returns None when the pair is not one of the two legal gate patterns.
    """
    n, c, h, w = a
    if b == (n, c, 1, 1) and (h, w) != (1, 1):
        return (2, 3)
    if b == (n, 1, h, w) and c != 1:
        return (1,)
    return None


def elementwise(a: Tensor, b: Tensor, fn: str) -> Tensor:
    """Elementwise 'add' or 'mul'.

    Shapes must match exactly, except 'mul' also accepts the two documented
    gate-broadcast patterns (channel gate (N,C,1,1), spatial gate (N,1,H,W))
    in either operand order.
    """
    if fn not in ("add", "mul"):
        raise ShapeError(f"elementwise: unknown fn {fn!r}")
    if a.shape == b.shape:
        if fn == "add":
            out = a.data + b.data

            def _bwd(g: np.ndarray) -> None:
                a.accumulate_grad(g)
                b.accumulate_grad(g)
        else:
            out = a.data * b.data

            def _bwd(g: np.ndarray) -> None:
                a.accumulate_grad(g * b.data)
                b.accumulate_grad(g * a.data)
        return Tensor(out, _parents=(a, b), _backward=_bwd, op=fn)

    if fn == "mul":
        for full, gate in ((a, b), (b, a)):
            axes = _gate_axes(full.shape, gate.shape)
            if axes is not None:
                out = full.data * gate.data

                def _bwd(g: np.ndarray, full=full, gate=gate, axes=axes) -> None:
                    full.accumulate_grad(g * gate.data)
                    gate.accumulate_grad((g * full.data).sum(axis=axes, keepdims=True))
                return Tensor(out, _parents=(full, gate), _backward=_bwd, op="mul_gate")
    raise ShapeError(
        f"elementwise {fn}: incompatible shapes {a.shape} and {b.shape} "
        "(only exact match or the documented gate-broadcast patterns are legal)")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * 4
            sl[axis] = slice(lo, hi)
            p.accumulate_grad(g[tuple(sl)])

    return Tensor(out, _parents=tuple(parts), _backward=_bwd, op="concat")


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    """Split along ``axis`` into chunks of the given sizes (inverse of concat)."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(
            f"split: sizes {list(sizes)} do not sum to extent {x.shape[axis]} on axis {axis}")
    outs: list[Tensor] = []
    lo = 0
    for s in sizes:
        sl = [slice(None)] * 4
        sl[axis] = slice(lo, lo + s)
        sl_t = tuple(sl)

        def _bwd(g: np.ndarray, sl_t=sl_t) -> None:
            dx = np.zeros_like(x.data)
            dx[sl_t] = g
            x.accumulate_grad(dx)

        outs.append(Tensor(x.data[sl_t].copy(), _parents=(x,), _backward=_bwd, op="split"))
        lo += s
    return outs


# ---------------------------------------------------------------------------
# shape manipulation / matmul / softmax


def reshape(x: Tensor, shape: Shape4) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def _bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g.reshape(x.shape))

    return Tensor(out, _parents=(x,), _backward=_bwd, op="reshape")


def transpose(x: Tensor, perm: tuple[int, int, int, int]) -> Tensor:
    if sorted(perm) != [0, 1, 2, 3]:
        raise ShapeError(f"transpose: bad permutation {perm}")
    inv = tuple(int(np.argsort(perm)[i]) for i in range(4))
    out = x.data.transpose(perm)

    def _bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g.transpose(inv))

    return Tensor(out.copy(), _parents=(x,), _backward=_bwd, op="transpose")


def _reduce_to(g: np.ndarray, shape: Shape4) -> np.ndarray:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product on the trailing two axes.

    ``a`` is (p,q,M,K) and ``b`` is (r,s,K,P) with leading axes broadcastable
    (extent 1 expands); the result is (max(p,r), max(q,s), M, P).
    """
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    for i in (0, 1):
        if a.shape[i] != b.shape[i] and 1 not in (a.shape[i], b.shape[i]):
            raise ShapeError(f"matmul: leading axes not broadcastable, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bwd(g: np.ndarray) -> None:
        a.accumulate_grad(_reduce_to(np.matmul(g, b.data.swapaxes(2, 3)), a.shape))
        b.accumulate_grad(_reduce_to(np.matmul(a.data.swapaxes(2, 3), g), b.shape))

    return Tensor(out, _parents=(a, b), _backward=_bwd, op="matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer on flattened features.

    ``x`` is (N,F,1,1), ``w`` is (O,F,1,1), ``b`` is (1,O,1,1); equivalent to
    a 1x1 convolution on a 1x1 spatial grid.
    """
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"linear: input must be (N,F,1,1), got {x.shape}")
    return conv2d(x, w, b)


def softmax_last(x: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis."""
    if x.shape[3] < 1:
        raise ShapeError("softmax_last: empty last axis")
    z = x.data - x.data.max(axis=3, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=3, keepdims=True)

    def _bwd(g: np.ndarray) -> None:
        dot = (g * out).sum(axis=3, keepdims=True)
        x.accumulate_grad(out * (g - dot))

    return Tensor(out, _parents=(x,), _backward=_bwd, op="softmax_last")


def sum_all(x: Tensor) -> Tensor:
    """Reduce every element to a scalar (1,1,1,1) tensor."""
    out = np.array(x.data.sum()).reshape(1, 1, 1, 1)

    def _bwd(g: np.ndarray) -> None:
        x.accumulate_grad(np.full_like(x.data, g.reshape(-1)[0]))

    return Tensor(out, _parents=(x,), _backward=_bwd, op="sum_all")


def sdiv(a: Tensor, b: Tensor) -> Tensor:
    """Scalar division a/b of two (1,1,1,1) tensors."""
    if a.shape != (1, 1, 1, 1) or b.shape != (1, 1, 1, 1):
        raise ShapeError(f"sdiv: operands must be scalar, got {a.shape}, {b.shape}")
    out = a.data / b.data

    def _bwd(g: np.ndarray) -> None:
        a.accumulate_grad(g / b.data)
        b.accumulate_grad(-g * a.data / (b.data * b.data))

    return Tensor(out, _parents=(a, b), _backward=_bwd, op="sdiv")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Compare analytic gradients of ``f`` at ``x`` against central differences.

    ``f`` must map a tensor to a scalar tensor deterministically.  Returns
    the maximum over elements of ``|analytic - numeric| / max(1, |analytic|)``
    with numeric = (f(x + h*e) - f(x - h*e)) / (2h).
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    xt = Tensor(x.data.copy(), requires_grad=True)
    y = f(xt)
    if y.shape != (1, 1, 1, 1):
        raise ShapeError(f"grad_check: f must return a scalar, got {y.shape}")
    backward(y)
    analytic = xt.grad.copy()

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        base = flat[i]
        pert = flat.copy()
        pert[i] = base + h
        fp = f(Tensor(pert.reshape(x.shape))).item()
        pert[i] = base - h
        fm = f(Tensor(pert.reshape(x.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
