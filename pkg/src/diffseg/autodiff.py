"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a ``Tensor`` wraps a C-contiguous float64
numpy array, records the operations applied to it, and ``backward`` on a
scalar result fills the ``grad`` field of every reachable tensor that has
``requires_grad`` set. Repeated backward calls without a grad reset
accumulate, mirroring the usual deep-learning convention.

Everything runs single threaded on the CPU; for a fixed seed the results are
bit-identical between runs.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _asarray(values) -> np.ndarray:
    # np.asarray with order="C" keeps 0-d arrays 0-d (ascontiguousarray would
    # promote them to 1-d, which breaks scalar losses).
    return np.asarray(values, dtype=np.float64, order="C")


class Tensor:
    """Dense n-dimensional float64 value with optional gradient tracking.

    ``data`` is stored row-major; ``grad`` (same shape) exists exactly when
    ``requires_grad`` is set and starts at zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.grad = np.zeros_like(data)
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out.grad = None
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- elementwise arithmetic -------------------------------------------------

    def _binary_operand(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(f"operand shapes differ: {self.shape} vs {other.shape}")
            return other
        if np.isscalar(other):
            return None
        raise ShapeError(f"unsupported operand type {type(other)!r}")

    def __add__(self, other):
        o = self._binary_operand(other)
        if o is None:
            data = self.data + float(other)

            def bwd(g):
                _accumulate(self, g)

            return Tensor._result(data, (self,), bwd)
        data = self.data + o.data

        def bwd(g):
            _accumulate(self, g)
            _accumulate(o, g)

        return Tensor._result(data, (self, o), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._binary_operand(other)
        if o is None:
            data = self.data - float(other)

            def bwd(g):
                _accumulate(self, g)

            return Tensor._result(data, (self,), bwd)
        data = self.data - o.data

        def bwd(g):
            _accumulate(self, g)
            _accumulate(o, -g)

        return Tensor._result(data, (self, o), bwd)

    def __rsub__(self, other):
        data = float(other) - self.data

        def bwd(g):
            _accumulate(self, -g)

        return Tensor._result(data, (self,), bwd)

    def __mul__(self, other):
        o = self._binary_operand(other)
        if o is None:
            c = float(other)
            data = self.data * c

            def bwd(g):
                _accumulate(self, g * c)

            return Tensor._result(data, (self,), bwd)
        data = self.data * o.data

        def bwd(g):
            _accumulate(self, g * o.data)
            _accumulate(o, g * self.data)

        return Tensor._result(data, (self, o), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        o = self._binary_operand(other)
        if o is None:
            return self * (1.0 / float(other))
        data = self.data / o.data

        def bwd(g):
            _accumulate(self, g / o.data)
            _accumulate(o, -g * self.data / (o.data * o.data))

        return Tensor._result(data, (self, o), bwd)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def bwd(g):
            _accumulate(self, g.reshape(old))

        return Tensor._result(np.asarray(data, order="C"), (self,), bwd)

    # -- reductions ----------------------------------------------------------------

    def sum(self, axes=None) -> "Tensor":
        return reduce("sum", self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce("mean", self, axes)

    # -- autodiff -------------------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        if self.grad is None:
            # Loss with no differentiable ancestors: nothing to do.
            return
        self.grad = self.grad + np.ones_like(self.data)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is not None:
        if g.shape != t.grad.shape:
            g = g.reshape(t.grad.shape)
        t.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the graph rooted at ``root`` (iterative)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Functional form of ``Tensor.backward``."""
    loss.backward()


def as_tensor(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


# -- public op surface ------------------------------------------------------------


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Elementwise add/sub/mul of equal-shaped tensors, or scale by a constant."""
    a = as_tensor(a)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "scale":
        if isinstance(b, Tensor) or not np.isscalar(b):
            raise ShapeError("scale expects a scalar constant")
        return a * float(b)
    raise ShapeError(f"unknown elementwise kind {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor._result(data, (a, b), bwd)


def _conv_geometry(extent: int, k: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel extent {k} exceeds padded input {extent + 2 * pad}")
    if span % stride != 0:
        raise ShapeError(
            f"conv output extent not integral: (({extent}+2*{pad})-{k}) not divisible by {stride}"
        )
    return span // stride + 1


def conv2d(inp: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of [B,C,H,W] with [F,C,kh,kw] filters."""
    inp, kernel = as_tensor(inp), as_tensor(kernel)
    if inp.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects input [B,C,H,W] and kernel [F,C,kh,kw]")
    b, c, h, w = inp.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {ck}")
    oh = _conv_geometry(h, kh, stride, pad)
    ow = _conv_geometry(w, kw, stride, pad)

    if pad:
        padded = np.pad(inp.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        padded = inp.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, OH, OW, kh, kw] -> [B*OH*OW, C*kh*kw]: one flat GEMM per pass.
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * oh * ow, c * kh * kw
    )
    w2 = kernel.data.reshape(f, c * kh * kw)
    out = np.ascontiguousarray(
        (cols @ w2.T).reshape(b, oh * ow, f).transpose(0, 2, 1)
    ).reshape(b, f, oh, ow)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(b, f, oh * ow).transpose(0, 2, 1)).reshape(
            b * oh * ow, f
        )
        if kernel.grad is not None:
            _accumulate(kernel, (g2.T @ cols).reshape(kernel.shape))
        if inp.grad is not None:
            gcols = (g2 @ w2).reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gpad = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, :, i, j
                    ]
            if pad:
                gpad = gpad[:, :, pad : pad + h, pad : pad + w]
            _accumulate(inp, gpad)

    return Tensor._result(out, (inp, kernel), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def nonlinear(kind: str, x: Tensor) -> Tensor:
    """Elementwise relu / silu / sigmoid. relu'(0) is taken as 0."""
    x = as_tensor(x)
    if kind == "relu":
        data = np.maximum(x.data, 0.0)

        def bwd(g):
            _accumulate(x, g * (x.data > 0.0))

    elif kind == "silu":
        s = _sigmoid(x.data)
        data = x.data * s

        def bwd(g):
            _accumulate(x, g * (s * (1.0 + x.data * (1.0 - s))))

    elif kind == "sigmoid":
        data = _sigmoid(x.data)

        def bwd(g):
            _accumulate(x, g * data * (1.0 - data))

    else:
        raise ShapeError(f"unknown nonlinearity {kind!r}")
    return Tensor._result(data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return nonlinear("relu", x)


def silu(x: Tensor) -> Tensor:
    return nonlinear("silu", x)


def sigmoid(x: Tensor) -> Tensor:
    return nonlinear("sigmoid", x)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    if len(axes) == 0:
        return ()
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def reduce(kind: str, x: Tensor, axes=None) -> Tensor:
    """Sum or mean over the given axes (all axes when None, identity when ())."""
    x = as_tensor(x)
    axes_n = _normalize_axes(axes, x.data.ndim)
    if kind not in ("sum", "mean"):
        raise ShapeError(f"unknown reduction {kind!r}")
    if len(axes_n) == 0:
        data = x.data.copy()

        def bwd(g):
            _accumulate(x, g)

        return Tensor._result(data, (x,), bwd)
    count = 1
    for a in axes_n:
        count *= x.shape[a]
    data = x.data.sum(axis=axes_n)
    if kind == "mean":
        data = data / count

    def bwd(g):
        expanded = np.expand_dims(g, axes_n)
        full = np.broadcast_to(expanded, x.shape)
        _accumulate(x, full / count if kind == "mean" else full.copy())

    return Tensor._result(np.asarray(data, order="C"), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return Tensor._result(data, tuple(tensors), bwd)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to [B,C,H,W]; bias is [C] or per-sample [B,C]."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 4:
        raise ShapeError("channel_bias expects a [B,C,H,W] tensor")
    if b.data.ndim == 1:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(f"bias channels {b.shape[0]} != feature channels {x.shape[1]}")
        data = x.data + b.data[None, :, None, None]

        def bwd(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    elif b.data.ndim == 2:
        if b.shape != x.shape[:2]:
            raise ShapeError(f"per-sample bias {b.shape} != feature [B,C] {x.shape[:2]}")
        data = x.data + b.data[:, :, None, None]

        def bwd(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=(2, 3)))

    else:
        raise ShapeError("bias must be [C] or [B,C]")
    return Tensor._result(data, (x, b), bwd)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even spatial extents, got {h}x{w}")
    data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        _accumulate(x, up * 0.25)

    return Tensor._result(np.asarray(data, order="C"), (x,), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample2x expects a [B,C,H,W] tensor")
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        b, c, h2, w2 = g.shape
        _accumulate(x, g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return Tensor._result(data, (x,), bwd)


# -- losses --------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    return (d * d).mean()


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Numerically stable binary cross-entropy, mean over elements."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.shape != target.shape:
        raise ShapeError(f"bce shapes differ: {logits.shape} vs {target.shape}")
    z, y = logits.data, target.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    data = np.array(per.mean())
    n = z.size

    def bwd(g):
        _accumulate(logits, g * (_sigmoid(z) - y) / n)
        # target is a label map; no gradient is propagated into it.

    return Tensor._result(data, (logits,), bwd)


def _require_binary(arr: np.ndarray, name: str):
    from .errors import DataError

    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise DataError(f"{name} must contain only 0 and 1")


DICE_SMOOTHING = 1.0


def dice_ce_loss(pred_logits: Tensor, target_mask, mix: float = 0.5) -> Tensor:
    """Blend of soft Dice loss and binary cross-entropy on logits.

    ``mix`` weights the Dice term; 0.5 gives the equal combination used for
    feed-forward segmentation training. Probabilities come from a sigmoid and
    the Dice ratio is smoothed additively in numerator and denominator.
    """
    from .errors import ConfigError

    pred_logits = as_tensor(pred_logits)
    target_mask = as_tensor(target_mask)
    if pred_logits.shape != target_mask.shape:
        raise ShapeError(
            f"dice_ce_loss shapes differ: {pred_logits.shape} vs {target_mask.shape}"
        )
    if not 0.0 <= mix <= 1.0:
        raise ConfigError(f"mix must lie in [0, 1], got {mix}")
    _require_binary(target_mask.data, "target_mask")

    ce = bce_with_logits(pred_logits, target_mask)
    p = sigmoid(pred_logits)
    inter = (p * target_mask).sum()
    total = p.sum() + float(target_mask.data.sum())
    dice = 1.0 - (inter * 2.0 + DICE_SMOOTHING) / (total + DICE_SMOOTHING)
    return dice * mix + ce * (1.0 - mix)


# -- optimizer --------------------------------------------------------------------


def adam_step(
    params: Iterable[Tensor],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; zeroes the gradients afterwards.

    ``state`` holds per-parameter first/second moments keyed by parameter
    identity plus the shared step counter, and is created on first use.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError("adam_step needs populated gradients on every parameter")
    step = state.get("step", 0) + 1
    state["step"] = step
    moments = state.setdefault("moments", {})
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for p in params:
        m, v = moments.get(id(p), (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * (p.grad * p.grad)
        moments[id(p)] = (m, v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad[...] = 0.0


class Adam:
    """Adam optimizer over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
