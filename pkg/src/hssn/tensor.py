"""Dense tensors with tape-based reverse-mode differentiation.

Every operation records a node whose position in the tape is its creation
index. ``Tensor.backward`` collects the nodes reachable from the output and
replays them in reverse creation order, accumulating (``+=``) into each
input's ``grad`` buffer. Leaf gradients are never cleared implicitly; call
:func:`zero_grad` between optimisation steps.

Array storage and the inner arithmetic are numpy; the differentiation rules
are written out here by hand.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DegenerateBatchError, DimensionError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_creation = itertools.count()
_recording = True
_switches = None  # list collecting relu / max-pool decisions while a gradient check runs


@contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    """An n-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad=False, dtype=DEFAULT_DTYPE, name=None):
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._order = next(_creation)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = _recording and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._order = next(_creation)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        Graph(self).backward(np.asarray(grad, dtype=self.data.dtype))

    # arithmetic -------------------------------------------------------------

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

    def __getitem__(self, index: int) -> "Tensor":
        return select(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Graph:
    """The recorded operations reachable from ``root``, in creation order."""

    root: Tensor
    nodes: list = field(init=False)

    def __post_init__(self):
        seen = set()
        nodes = []
        stack = [self.root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._order)
        self.nodes = nodes

    def backward(self, seed: np.ndarray) -> None:
        if seed.shape != self.root.shape:
            raise DimensionError(f"seed gradient {seed.shape} != output {self.root.shape}")
        _accumulate(self.root, seed)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    """Clear (allocating if needed) the gradient buffers of ``tensors``."""
    for t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        else:
            t.grad[...] = 0


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or DEFAULT_DTYPE)


# elementwise plumbing --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return Tensor._from_op(a.data + b.data, (a, b), backward)

    def backward_scalar(g):
        _accumulate(a, g)

    return Tensor._from_op(a.data + a.data.dtype.type(b), (a,), backward_scalar)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

        def backward(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return Tensor._from_op(a.data * b.data, (a, b), backward)

    c = a.data.dtype.type(b)
    return Tensor._from_op(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def tsum(a: Tensor) -> Tensor:
    return Tensor._from_op(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape))
    )


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return Tensor._from_op(data, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def flatten(a: Tensor, start: int = 0) -> Tensor:
    """Collapse every axis from ``start`` onwards into one (row-major)."""
    return reshape(a, a.shape[:start] + (-1,))


def select(a: Tensor, index: int) -> Tensor:
    if not isinstance(index, (int, np.integer)):
        raise TypeError("only integer indexing along the first axis is supported")
    if not -a.shape[0] <= index < a.shape[0]:
        raise IndexError(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return Tensor._from_op(a.data[index].copy(), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g * (0.5 / out)))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the gradient is zero wherever ``x <= 0``."""
    active = x.data > 0
    if _switches is not None:
        _switches.append(active)
    return Tensor._from_op(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: _accumulate(x, g * active))


# layer primitives ------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over ``[C, H, W]`` or ``[B, C, H, W]`` input.

    Implemented as an im2col product so the reduction order is fixed by the
    shapes alone.
    """
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: expected [B,C,H,W] input and 4-d weight, got {x.shape}, {weight.shape}")
    B, C, H, W = xd.shape
    C_out, C_in, kH, kW = weight.shape
    if C_in != C:
        raise DimensionError(f"conv2d: weight expects {C_in} input channels, input has {C}")
    if bias.shape != (C_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({C_out},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kH > Hp or kW > Wp:
        raise DimensionError(f"conv2d: kernel {kH}x{kW} exceeds padded input {Hp}x{Wp}")
    H_out = (Hp - kH) // stride + 1
    W_out = (Wp - kW) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, H', W', C, kH, kW] -> rows of receptive fields
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * H_out * W_out, C * kH * kW)
    wmat = weight.data.reshape(C_out, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(B, H_out, W_out, C_out).transpose(0, 3, 1, 2))
    if unbatched:
        out = out[0]

    def backward(g):
        g4 = g[None] if unbatched else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, C_out)
        if bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if weight.requires_grad:
            _accumulate(weight, (gmat.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, H_out, W_out, C, kH, kW)
            gxp = np.zeros((B, C, Hp, Wp), dtype=xd.dtype)
            for i in range(kH):
                for j in range(kW):
                    gxp[:, :, i : i + stride * H_out : stride, j : j + stride * W_out : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
            _accumulate(x, gx[0] if unbatched else gx)

    return Tensor._from_op(out, (x, weight, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    *lead, H, W = x.shape
    if x.data.ndim < 2 or H % 2 or W % 2:
        raise DimensionError(f"maxpool2: spatial dims must be even, got {x.shape}")
    n = int(np.prod(lead, dtype=np.int64))
    win = x.data.reshape(n, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(n, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    if _switches is not None:
        _switches.append(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0].reshape(*lead, H // 2, W // 2)

    def backward(g):
        gw = np.zeros((n, H // 2, W // 2, 4), dtype=x.dtype)
        np.put_along_axis(gw, arg[..., None], g.reshape(n, H // 2, W // 2, 1), axis=-1)
        gx = gw.reshape(n, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(x.shape)
        _accumulate(x, gx)

    return Tensor._from_op(out, (x,), backward)


@dataclass
class RunningStats:
    """Per-channel running mean / biased variance used in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Normalise ``[B, C, ...]`` input per channel.

    In train mode the batch mean and biased variance over every axis except
    the channel axis are used and ``stats`` is updated in place with
    ``stats <- (1 - momentum) * stats + momentum * batch_stat``. Eval mode
    reads ``stats`` and leaves them alone.
    """
    if x.data.ndim < 2:
        raise DimensionError(f"batchnorm: need [B, C, ...] input, got {x.shape}")
    if eps <= 0:
        raise ValueError("batchnorm: eps must be positive")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("batchnorm: momentum must lie in [0, 1]")
    B, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,) or stats.mean.shape != (C,):
        raise DimensionError(f"batchnorm: parameters do not match {C} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, C) + (1,) * (x.data.ndim - 2)
    dt = np.result_type(x.data, gamma.data)

    if mode == "train":
        if B < 2:
            raise DegenerateBatchError(f"batchnorm in train mode needs B >= 2, got B={B}")
        wide = x.data.astype(np.float64)
        mean64 = wide.mean(axis=axes)
        var64 = ((wide - mean64.reshape(bshape)) ** 2).mean(axis=axes)
        mean, var = mean64.astype(dt), var64.astype(dt)
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mean
        stats.var[...] = (1 - momentum) * stats.var + momentum * var
    elif mode == "eval":
        mean, var = stats.mean.astype(dt), stats.var.astype(dt)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    count = x.size // C

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data.reshape(bshape)
        if mode == "eval":
            _accumulate(x, gxhat * inv_std.reshape(bshape))
            return
        s1 = gxhat.sum(axis=axes).reshape(bshape)
        s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
        gx = (inv_std.reshape(bshape) / count) * (count * gxhat - s1 - xhat * s2)
        _accumulate(x, gx.astype(dt))

    return Tensor._from_op(out.astype(dt), (x, gamma, beta), backward)


def gram_matrix(features: Tensor) -> Tensor:
    """Channel inner products ``G = F F^T`` of ``[C, m]`` (or ``[B, C, m]``) features.

    The upper triangle is computed and mirrored, so the result is exactly
    symmetric.
    """
    f = features.data
    if f.ndim not in (2, 3):
        raise DimensionError(f"gram_matrix: expected [C, m] or [B, C, m], got {features.shape}")
    g = f @ np.swapaxes(f, -1, -2)
    upper = np.triu(g)
    g = upper + np.swapaxes(np.triu(g, 1), -1, -2)

    def backward(grad):
        sym = grad + np.swapaxes(grad, -1, -2)
        _accumulate(features, sym @ f)

    return Tensor._from_op(np.ascontiguousarray(g), (features,), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x W^T + b`` applied to each row of ``[B, D_in]`` input."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if x.requires_grad:
            _accumulate(x, g @ weight.data)

    return Tensor._from_op(out, (x, weight, bias), backward)


# gradient checking ---------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    indices: Optional[Sequence[int]] = None,
    skip_kinks: bool = False,
    reference: str = "float64",
) -> float:
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    ``f`` is called with ``x`` itself; coordinates are perturbed in place, so
    ``x`` may equally be a parameter that ``f`` reaches through a closure.
    Returns ``max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`` over the checked
    coordinates (all of them unless ``indices`` is given).

    The analytic gradient comes from the tape at the tensors' own precision.
    With ``reference="float64"`` (default) every leaf of the recorded tape is
    promoted to float64 while the differences are taken, so 32-bit rounding
    in ``f`` does not swamp small gradient coordinates; ``"native"`` keeps the
    leaves as they are. The perturbation itself is applied in ``x``'s dtype
    and divided by the step actually taken.

    With ``skip_kinks`` a coordinate is ignored when moving it by ``eps``
    either way flips any relu mask or max-pool argmax, i.e. the evaluation
    point lies within ``eps`` of a kink.
    """
    x.requires_grad = True
    saved = x.grad
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        x.grad = saved
        raise ContractError(f"finite_diff_check needs a scalar-valued f, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.astype(np.float64).ravel().copy()
    x.grad = saved

    if reference == "float64":
        leaves = _tape_leaves(out, x)
        originals = [leaf.data for leaf in leaves]
        step_type = x.dtype.type
        for leaf in leaves:
            leaf.data = leaf.data.astype(np.float64)
        try:
            return _central_differences(f, x, eps, analytic, indices, skip_kinks, step_type)
        finally:
            for leaf, data in zip(leaves, originals):
                leaf.data = data
    if reference != "native":
        raise ValueError(f"unknown reference precision {reference!r}")
    return _central_differences(f, x, eps, analytic, indices, skip_kinks, x.dtype.type)


def _tape_leaves(out: Tensor, x: Tensor) -> list:
    leaves = {id(x): x}
    for node in Graph(out).nodes:
        for p in node._parents:
            if p._backward is None and p.data.dtype != np.float64:
                leaves.setdefault(id(p), p)
    return list(leaves.values())


def _evaluate(f, x, record: bool):
    """``f(x)`` as a float, plus the relu / max-pool decisions it took."""
    global _switches
    if not record:
        return float(f(x).data), None
    previous, _switches = _switches, []
    try:
        value = float(f(x).data)
        return value, _switches
    finally:
        _switches = previous


def _same_switches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def _central_differences(f, x, eps, analytic, indices, skip_kinks, step_type) -> float:
    flat = x.data.reshape(-1)
    _, base = _evaluate(f, x, skip_kinks)
    worst = 0.0
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        # perturb at the precision x is stored in, divide by the step actually taken
        hi = flat[i] = step_type(orig) + step_type(eps)
        up, up_sw = _evaluate(f, x, skip_kinks)
        lo = flat[i] = step_type(orig) - step_type(eps)
        down, down_sw = _evaluate(f, x, skip_kinks)
        flat[i] = orig
        if skip_kinks and not (_same_switches(base, up_sw) and _same_switches(base, down_sw)):
            continue
        numeric = (up - down) / (float(hi) - float(lo))
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
