"""Small dense-tensor core with tape-based reverse-mode differentiation.

Only the operations needed by the match/mismatch network are provided.
Every op accepts an optional leading batch axis so that a whole mini-batch
is a single node on the tape.

Usage::

    with Tape() as tape:
        w = Tensor(np.ones((3, 2)), requires_grad=True)
        loss = total(matmul(x, w))
    grads = backward(loss, tape)
    grads[w]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "envtrack_active_tape", default=None
)


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _owned: bool = False):
        if _owned and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Ops record themselves on the innermost active tape, and only when at
    least one input requires a gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)


def custom_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a computed array as an op output and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in the order given.
    """
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, _owned=True)
    tape = _active_tape.get()
    if needs_grad and tape is not None:
        tape.nodes.append(_Node(name, out, tuple(inputs), backward_fn))
    return out


class Gradients(dict):
    """Gradient map keyed by tensor identity.

    Tensors that require a gradient but never influenced the loss map to
    zeros instead of raising ``KeyError``.
    """

    def __missing__(self, key: Tensor):
        if isinstance(key, Tensor) and key.requires_grad:
            return np.zeros(key.shape)
        raise KeyError(key)


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Reverse sweep over ``tape`` starting from scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    out = Gradients()
    for key, g in grads.items():
        out[owners[key]] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return custom_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad(g):
        ga = g @ b.data.T
        gb = np.tensordot(
            a.data.reshape(-1, a.shape[-1]), g.reshape(-1, g.shape[-1]), axes=(0, 0)
        )
        return ga, gb

    return custom_op("matmul", a.data @ b.data, (a, b), grad)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return custom_op("transpose", np.swapaxes(a.data, -1, -2), (a,),
                     lambda g: (np.swapaxes(g, -1, -2),))


def total(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return custom_op("sum", out, (a,), grad)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return custom_op("mean", a.data.mean(), (a,),
                     lambda g: (np.full(a.shape, float(g) / n),))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return custom_op("log", out, (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient where clamped."""
    inside = (a.data > lo) & (a.data < hi)
    return custom_op("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``sigmoid``, ``tanh`` or ``relu``."""
    x = as_tensor(x)
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return custom_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x.data)
        return custom_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "relu":
        mask = x.data > 0
        return custom_op("relu", x.data * mask, (x,), lambda g: (g * mask,))
    raise ValueError(f"unknown activation {kind!r}")


def conv_output_length(n: int, kernel: int, stride: int) -> int:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n < kernel:
        raise ValueError(f"input length {n} shorter than kernel {kernel}")
    return (n - kernel) // stride + 1


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid strided 1-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``(c_in, T)`` or ``(batch, c_in, T)``.
    kernels : Tensor
        ``(c_out, c_in, K)``.
    bias : Tensor
        ``(c_out,)``.
    stride : int
        Temporal hop between output samples.

    Returns
    -------
    Tensor
        ``(c_out, T_out)`` (batched: ``(batch, c_out, T_out)``) with
        ``T_out = (T - K) // stride + 1``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 3 or x.ndim not in (2, 3) or x.shape[-2] != kernels.shape[1]:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ValueError(f"conv1d bias shape {bias.shape} != ({kernels.shape[0]},)")
    c_out, c_in, K = kernels.shape
    T = x.shape[-1]
    t_out = conv_output_length(T, K, stride)
    X = x.data.reshape(-1, c_in, T)
    batch = X.shape[0]
    # im2col: (batch * t_out, c_in * K), one GEMM for the whole batch
    windows = np.lib.stride_tricks.sliding_window_view(X, K, axis=-1)[:, :, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(-1, c_in * K)
    W2 = kernels.data.reshape(c_out, c_in * K)
    out = (cols @ W2.T + bias.data).reshape(batch, t_out, c_out).transpose(0, 2, 1)
    out = out.reshape(x.shape[:-2] + (c_out, t_out))
    span = stride * (t_out - 1) + 1

    def grad(g):
        g2 = np.ascontiguousarray(np.swapaxes(g.reshape(batch, c_out, t_out), 1, 2))
        g2 = g2.reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(kernels.shape)
        gb = g2.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        gcols = (g2 @ W2).reshape(batch, t_out, c_in, K)
        gx = np.zeros((batch, c_in, T))
        for k in range(K):
            gx[:, :, k:k + span:stride] += np.swapaxes(gcols[..., k], 1, 2)
        return gx.reshape(x.shape), gw, gb

    return custom_op("conv1d", out, (x, kernels, bias), grad)


def unit_normalize_columns(m: Tensor) -> Tensor:
    """Divide each column (axis -2) by ``max(norm, 1e-12)``."""
    m = as_tensor(m)
    norms = np.sqrt(np.sum(m.data * m.data, axis=-2, keepdims=True))
    denom = np.maximum(norms, NORM_EPS)
    y = m.data / denom
    live = norms > NORM_EPS

    def grad(g):
        radial = np.sum(g * y, axis=-2, keepdims=True) * y * live
        return ((g - radial) / denom,)

    return custom_op("unit_normalize_columns", y, (m,), grad)


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of tensors (one per entry of ``params``) to a scalar
    tensor.  The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_coords`` set, a random
    subset of coordinates per tensor is probed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    with Tape() as tape:
        leaves = [Tensor(p, requires_grad=True) for p in base]
        loss = f(leaves)
    grads = backward(loss, tape)

    def evaluate(arrays):
        value = f([Tensor(a) for a in arrays]).item()
        if not np.isfinite(value):
            raise FloatingPointError("objective is not finite")
        return value

    worst = 0.0
    for i, p in enumerate(base):
        analytic = grads[leaves[i]].reshape(-1)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False)
        for j in coords:
            trial = [q.copy() for q in base]
            flat = trial[i].reshape(-1)
            flat[j] = p.reshape(-1)[j] + h
            up = evaluate(trial)
            flat[j] = p.reshape(-1)[j] - h
            down = evaluate(trial)
            numeric = (up - down) / (2 * h)
            a = analytic[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
