"""Dense fp64 tensors with reverse-mode differentiation.

The op set is deliberately small and fixed: convolution, pooling, dense
layers, elementwise math, reductions, and batch-statistics normalization.
Each op builds a node in a lightweight graph; ``backward`` walks the graph
in reverse topological order and accumulates gradients into leaf tensors.
A central finite-difference checker doubles as the independent oracle for
every analytic gradient.
"""

from __future__ import annotations

import copy
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NumericError(ArithmeticError):
    """Raised when a forward pass produces NaN/Inf from finite inputs."""


# Grad recording can be switched off for inference-only forward passes.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense row-major float64 array, optionally tracked by the autodiff tape.

    Tensors are immutable after construction as far as the graph is
    concerned: ops never write into an existing ``data`` buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _op: str = "leaf", _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{tag})"

    # Operator sugar; everything funnels through the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Create a graph node; degenerates to a constant when grads are off."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _op=op, _parents=parents, _backward=backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward, "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    # maximum, not where(mask): NaN must propagate so a diverged loss is
    # caught instead of silently flushed to zero activation
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * mask)

    return _node(out, (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _node(out, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _node(out, (a,), backward, "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _node(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(out, (a,), backward, "log")


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(out, (a,), backward, "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out)

    return _node(out, (a,), backward, "sqrt")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * mask)

    return _node(out, (a,), backward, "clamp")


# ---------------------------------------------------------------------------
# Reductions and reshaping


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = [1 if i in axes else s for i, s in enumerate(a.data.shape)]
            g = g.reshape(shape)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax % a.data.ndim]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(out, (a,), backward, "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(out, (a, b), backward, "matmul")


def slice_spatial(a: Tensor, y1: int, y2: int, x1: int, x2: int) -> Tensor:
    """Slice the last two axes of an NCHW (or CHW) tensor."""
    out = a.data[..., y1:y2, x1:x2].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., y1:y2, x1:x2] = g
        _accumulate(a, full)

    return _node(out, (a,), backward, "slice")


# ---------------------------------------------------------------------------
# Neural-net building blocks


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [N, D] @ w.T [D, O] + b."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input/weight, got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"dense: input dim {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        if b is not None:
            _accumulate(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "dense")


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [N*oh*ow, C*kh*kw] patch matrix."""
    n, c, hp, wp = xp.shape
    sn, sc, srow, scol = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, srow * sh, scol * sw, sc, srow, scol),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """NCHW convolution with an OIHW kernel; stride/padding are explicit."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    n, c, h, wdt = x.data.shape
    o, i, kh, kw = w.data.shape
    if i != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    sh = sw = stride
    oh = (h + 2 * padding - kh) // sh + 1
    ow = (wdt + 2 * padding - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output empty for input {x.shape}, kernel {w.shape}, "
                         f"stride {stride}, padding {padding}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)  # kept alive for backward
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        _accumulate(w, (gmat.T @ cols).reshape(o, c, kh, kw))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * padding, wdt + 2 * padding))
            for r in range(kh):
                for s in range(kw):
                    gxp[:, :, r:r + oh * sh:sh, s:s + ow * sw:sw] += gcols[:, :, :, :, r, s].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; spatial size must divide by k."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial size {(h, w)} not divisible by {k}")
    oh, ow = h // k, w // k
    blocks = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _node(out, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] mean over the full spatial extent."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        _accumulate(x, np.broadcast_to(g / (h * w), x.data.shape).copy())

    return _node(out, (x,), backward, "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] max over the full spatial extent."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_max_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(n, c, 1, 1)

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g.reshape(n, c, 1), axis=-1)
        _accumulate(x, gf.reshape(n, c, h, w))

    return _node(out, (x,), backward, "global_max_pool")


def batch_stats_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: dict | None = None,
                     training: bool = False, momentum: float = 0.9,
                     eps: float = 1e-5, update_running: bool = True) -> Tensor:
    """Normalize by per-batch statistics (training) or stored running stats.

    2-D input normalizes per feature over the batch axis; 4-D input per
    channel over (N, H, W). `running` holds {"mean": ..., "var": ...} numpy
    arrays mutated as a side effect when training.
    """
    if x.data.ndim == 2:
        axes = (0,)
        pshape = (1, -1)
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
        pshape = (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_stats_norm expects 2-D or 4-D input, got {x.shape}")

    gammab = reshape(gamma, pshape)
    betab = reshape(beta, pshape)
    if training:
        m = tmean(x, axis=axes, keepdims=True)
        xc = sub(x, m)
        v = tmean(mul(xc, xc), axis=axes, keepdims=True)
        inv = div(_as_tensor(1.0), sqrt(add(v, _as_tensor(eps))))
        xhat = mul(xc, inv)
        if running is not None and update_running:
            running["mean"] = momentum * running["mean"] + (1 - momentum) * m.data.reshape(-1)
            running["var"] = momentum * running["var"] + (1 - momentum) * v.data.reshape(-1)
    else:
        if running is None:
            raise ValueError("batch_stats_norm inference requires running stats")
        rm = running["mean"].reshape(pshape)
        rv = running["var"].reshape(pshape)
        xhat = mul(sub(x, _as_tensor(rm)), _as_tensor(1.0 / np.sqrt(rv + eps)))
    return add(mul(gammab, xhat), betab)


# ---------------------------------------------------------------------------
# Graph execution


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _find_first_nonfinite(order: Iterable[Tensor]) -> str:
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node._op
    return "unknown"


def backward(root: Tensor) -> None:
    """Reverse-mode pass from a scalar root; accumulates into `.grad`."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    if not np.isfinite(root.data).all():
        raise NumericError(f"non-finite loss; first offending op: {_find_first_nonfinite(order)!r}")
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def forward_backward(root: Tensor, params: dict[str, Tensor]) -> tuple[float, dict[str, Tensor]]:
    """Evaluate a scalar-valued graph and return (loss, name -> grad tensor).

    Every registered parameter gets an entry; parameters not reachable from
    the root come back as zero tensors.
    """
    for p in params.values():
        p.zero_grad()
    backward(root)
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        grads[name] = Tensor(g.copy())
    return root.item(), grads


def finite_difference_check(f: Callable[[dict[str, Tensor]], Tensor],
                            params: dict[str, Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic map from the parameter dict to a scalar
    Tensor. Relative error per entry is |a - n| / max(1, |a|, |n|).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    root = f(params)
    loss, grads = forward_backward(root, params)
    if not np.isfinite(loss):
        raise NumericError("finite_difference_check: f returned a non-finite value")
    worst = 0.0
    for name, p in params.items():
        analytic = grads[name].data
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = f(params).item()
            flat[idx] = orig - step
            lo = f(params).item()
            flat[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("finite_difference_check: f returned NaN during probing")
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def seeded_rng(seed: int, *streams: int) -> np.random.Generator:
    """Deterministic generator derived from one 64-bit seed plus stream ids."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *streams])))
