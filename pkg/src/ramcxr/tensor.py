"""Dense float64 tensors with tape-style reverse-mode differentiation.

Only the operators the attention model needs are provided. Every op that
works on single samples also accepts a leading batch axis, so a minibatch
of episodes is evaluated as one graph; batch reductions are plain numpy
sums over axis 0 and therefore run in a fixed order.

Convolution uses the cross-correlation convention (kernels are not flipped).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-d float64 array plus the tape record that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"all extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _raise_item(t: Tensor) -> float:
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: relu|tanh|sigmoid|add|sub|mul|scale."""
    table = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "add": add, "sub": sub, "mul": mul, "scale": scale}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(y, (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat of nothing")
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, parts, backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., n] + bias[n]; the one explicit broadcast the dense layers need."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias {bias.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer on rows of x: x[B, in] @ weight[in, out] + bias[out]."""
    return add_bias(matmul(x, weight), bias)


# ---------------------------------------------------------- convolution & pool


def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op} expects [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation of x [C,H,W] or [N,C,H,W] with kernels [O,C,k,k]."""
    xd, single = _as_batch(x, "conv2d")
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3]:
        raise DimensionError(f"kernels must be [O,C,k,k], got {kernels.shape}")
    n_out, c_in, k, _ = kd.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if xd.shape[1] != c_in:
        raise DimensionError(f"input has {xd.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (n_out,):
        raise DimensionError(f"bias must have shape ({n_out},), got {bias.shape}")
    if padding == "same":
        p = k // 2
    elif padding == "valid":
        p = 0
        if k > xd.shape[2] or k > xd.shape[3]:
            raise DimensionError("kernel larger than input for valid padding")
    else:
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # cols: [N, C, H', W', k, k]
    out = np.tensordot(cols, kd, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', O]
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    if single:
        out = out[0]
    out = np.ascontiguousarray(out)
    h_out, w_out = out.shape[-2:]

    def backward(g):
        gb = g[None] if single else g  # [N, O, H', W']
        d_bias = gb.sum(axis=(0, 2, 3))
        d_kernels = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]
        d_cols = np.tensordot(gb, kd, axes=([1], [0]))  # [N, H', W', C, k, k]
        d_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                d_xp[:, :, i : i + h_out, j : j + w_out] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        d_x = d_xp[:, :, p : p + xd.shape[2], p : p + xd.shape[3]] if p else d_xp
        if single:
            d_x = d_x[0]
        return d_x, d_kernels, d_bias

    return _make(out, (x, kernels, bias), backward)


def maxpool2d(x: Tensor, window: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling; ties resolve to the first row-major position.

    Returns the pooled tensor and the flat in-window argmax index per output cell.
    """
    if window != 2:
        raise ConfigError("only window 2 is supported")
    xd, single = _as_batch(x, "maxpool2d")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even extents, got {h}x{w}")
    blocks = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = g[None] if single else g
        d_blocks = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(d_blocks, idx[..., None], gb[..., None], axis=-1)
        d_x = d_blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (d_x[0] if single else d_x,)

    if single:
        return _make(np.ascontiguousarray(out[0]), (x,), backward), idx[0]
    return _make(np.ascontiguousarray(out), (x,), backward), idx


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    if x.data.ndim < 2:
        raise DimensionError("upsample2 needs at least 2 axes")
    y = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------- loss terms


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label].

    logits [K] with an int label gives a scalar; logits [B,K] with B labels
    gives a [B] vector of per-row losses.
    """
    ld = logits.data
    if ld.ndim not in (1, 2):
        raise DimensionError(f"logits must be [K] or [B,K], got {logits.shape}")
    k = ld.shape[-1]
    if k < 2:
        raise DimensionError("need at least two classes")
    labels = np.asarray(label, dtype=np.int64)
    if labels.shape != ld.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    loss = lse - picked
    onehot = np.zeros_like(ld)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    grad_rows = softmax(ld) - onehot

    def backward(g):
        return (np.asarray(g)[..., None] * grad_rows,)

    return _make(np.asarray(loss), (logits,), backward)


LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_pdf(x, mean_: Tensor, sigma: float) -> Tensor:
    """log N(x; mean, sigma^2 I) for 2-vectors (or [B,2] rows).

    x and sigma are constants; gradient flows into mean only.
    """
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    md = mean_.data
    if xd.shape != md.shape or md.shape[-1] != 2 or md.ndim not in (1, 2):
        raise DimensionError(f"expected matching [2] or [B,2] shapes, got {xd.shape} and {md.shape}")
    var = float(sigma) ** 2
    diff = xd - md
    val = -np.log(2.0 * np.pi * var) - (diff * diff).sum(axis=-1) / (2.0 * var)

    def backward(g):
        return (np.asarray(g)[..., None] * diff / var,)

    return _make(np.asarray(val), (mean_,), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    td = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if td.shape != pred.shape:
        raise DimensionError(f"mse shape mismatch {pred.shape} vs {td.shape}")
    diff = pred.data - td
    n = diff.size
    return _make(np.array((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss.

    With accumulate=False, leaf gradients are overwritten; with True they are
    added to whatever a previous backward left there (minibatch accumulation).
    A given loss tensor can be back-propagated only once.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires grad")
    if loss._consumed:
        raise GraphError("backward already ran on this loss; rebuild the graph")
    loss._consumed = True

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = np.array(g, dtype=DTYPE)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            grads[pid] = grads[pid] + pg if pid in grads else pg
    for node in order:
        if node.is_leaf and node.grad is not None and not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(f"non-finite gradient in {node!r}")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------- optimizer


class SGDMomentum:
    """v <- momentum * v + g ; p <- p - lr * v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if not lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step(self.params, grads, self.lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float, momentum: float,
                      velocity: list[np.ndarray]) -> None:
    if len(params) != len(grads) or len(params) != len(velocity):
        raise DimensionError("params, grads and velocity must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape or velocity[i].shape != p.shape:
            raise DimensionError(f"shape mismatch for parameter {p!r}")
        velocity[i] = momentum * velocity[i] + g
        p.data = p.data - lr * velocity[i]
