"""Reverse-mode automatic differentiation over a fixed op set, plus seeded sampling.

The engine is deliberately small: every primitive the model needs is a named op
with a hand-written adjoint, registered in ``REGISTERED_OPS`` so the gradient
test suite can enumerate them. Values are float64 numpy arrays throughout;
programs are plain Python callables that receive leaf ``Tensor`` objects and
combine them with the ops below.

Adjoint buffers distinguish freshly allocated arrays (accumulated by move)
from pass-through views of a child's buffer (copied on first accumulation);
this keeps the backward pass allocation-light without aliasing bugs.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from scipy import special

REGISTERED_OPS: dict[str, Callable] = {}


class DiffError(Exception):
    """Raised when an op is applied to incompatible shapes or misused."""


def _register(name: str):
    def deco(fn):
        REGISTERED_OPS[name] = fn
        return fn

    return deco


class Tensor:
    """A node in the computation graph holding a float64 array.

    Leaves are created directly from data; interior nodes are created by ops
    and carry a closure that scatters the incoming adjoint to their parents.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "op")

    # keep numpy from consuming `ndarray <op> Tensor`; defer to our reflected ops
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return powi(self, n)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Accumulate an adjoint that may alias another node's buffer (copies)."""
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _accum_own(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a freshly allocated adjoint (takes ownership, no copy)."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum_unb(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a *fresh* adjoint that may still need de-broadcasting."""
    _accum_own(t, _unbroadcast(g, t.data.shape))


def _accum_maybe(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a pass-through adjoint; copies only if no reduction happened."""
    u = _unbroadcast(g, t.data.shape)
    if u is g:
        _accum(t, g)
    else:
        _accum_own(t, u)


def _node(op: str, data, parents, backward) -> Tensor:
    return Tensor(data, parents=parents, backward=backward, op=op)


# -- arithmetic ----------------------------------------------------------


@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DiffError(f"op add: {e}") from e

    def backward(g):
        _accum_maybe(a, g)
        _accum_maybe(b, g)

    return _node("add", data, (a, b), backward)


@_register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DiffError(f"op sub: {e}") from e

    def backward(g):
        _accum_maybe(a, g)
        _accum_unb(b, -g)

    return _node("sub", data, (a, b), backward)


@_register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DiffError(f"op mul: {e}") from e

    def backward(g):
        _accum_unb(a, g * b.data)
        _accum_unb(b, g * a.data)

    return _node("mul", data, (a, b), backward)


@_register("div")
def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise DiffError(f"op div: {e}") from e

    def backward(g):
        _accum_unb(a, g / b.data)
        _accum_unb(b, -g * data / b.data)

    return _node("div", data, (a, b), backward)


@_register("neg")
def neg(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accum_own(a, -g)

    return _node("neg", -a.data, (a,), backward)


@_register("powi")
def powi(a: Tensor, n: int) -> Tensor:
    """Integer power (n >= 1), used for squares and cubes."""
    a = _lift(a)
    if not isinstance(n, int) or n < 1:
        raise DiffError("op powi: exponent must be an integer >= 1")
    data = a.data**n

    def backward(g):
        _accum_own(a, g * (n * a.data ** (n - 1)))

    return _node("powi", data, (a,), backward)


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b with a of shape (..., m, k) and b of shape (k, n)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim != 2:
        raise DiffError(
            f"op matmul: need a.ndim>=2 and b.ndim==2, got {a.shape} @ {b.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise DiffError(f"op matmul: {e}") from e

    def backward(g):
        _accum_own(a, g @ b.data.T)
        k = a.shape[-1]
        _accum_own(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return _node("matmul", data, (a, b), backward)


# -- elementwise nonlinearities -------------------------------------------


@_register("exp")
def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)

    def backward(g):
        _accum_own(a, g * data)

    return _node("exp", data, (a,), backward)


@_register("log")
def log(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accum_own(a, g / a.data)

    return _node("log", np.log(a.data), (a,), backward)


@_register("tanh")
def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum_own(a, g * (1.0 - data * data))

    return _node("tanh", data, (a,), backward)


def _expit(x: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(x/2)); noticeably faster than scipy.special.expit here
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@_register("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    data = _expit(a.data)

    def backward(g):
        _accum_own(a, g * (data * (1.0 - data)))

    return _node("sigmoid", data, (a,), backward)


@_register("softplus")
def softplus(a: Tensor) -> Tensor:
    a = _lift(a)
    # log(1 + e^x), computed as logaddexp(0, x) so it is overflow-safe
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        _accum_own(a, g * _expit(a.data))

    return _node("softplus", data, (a,), backward)


@_register("lgamma")
def lgamma(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accum_own(a, g * special.digamma(a.data))

    return _node("lgamma", special.gammaln(a.data), (a,), backward)


# -- normalizations --------------------------------------------------------


@_register("softmax")
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum_own(a, data * (g - inner))

    return _node("softmax", data, (a,), backward)


@_register("logsumexp")
def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = m + np.log(s)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        gg = np.expand_dims(g, axis) if not keepdims else g
        _accum_own(a, gg * (e / s))

    return _node("logsumexp", data, (a,), backward)


# -- structure ops ----------------------------------------------------------


@_register("concat")
def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DiffError(f"op concat: {e}") from e
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _node("concat", data, tuple(parts), backward)


@_register("stack")
def stack(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    try:
        data = np.stack([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DiffError(f"op stack: {e}") from e

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        for i, p in enumerate(parts):
            _accum(p, gm[i])

    return _node("stack", data, tuple(parts), backward)


@_register("take")
def take(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing/indexing."""
    a = _lift(a)
    try:
        data = a.data[key]
    except IndexError as e:
        raise DiffError(f"op take: {e}") from e

    def backward(g):
        buf = np.zeros(a.data.shape)
        buf[key] += g
        _accum_own(a, buf)

    return _node("take", data, (a,), backward)


@_register("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DiffError(f"op reshape: {e}") from e

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node("reshape", data, (a,), backward)


# -- reductions --------------------------------------------------------------


@_register("sum")
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node("sum", data, (a,), backward)


@_register("mean")
def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is None:
            _accum_own(a, np.full(a.data.shape, g / count))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, a.data.shape))

    return _node("mean", data, (a,), backward)


# -- recurrent cell -----------------------------------------------------------


@_register("gru_cell")
def gru_cell(x: Tensor, h: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """One GRU step as a single fused op.

    x: (B, Din), h: (B, H), wx: (Din, 3H), wh: (H, 3H), b: (3H,).
    Gate layout along the 3H axis is [reset | update | candidate].
    Fusing the step keeps the tape short: a T-step unroll costs T nodes
    instead of ~15T.
    """
    x, h, wx, wh, b = _lift(x), _lift(h), _lift(wx), _lift(wh), _lift(b)
    H = h.shape[-1]
    if wx.shape[-1] != 3 * H or wh.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise DiffError(
            f"op gru_cell: inconsistent shapes x={x.shape} h={h.shape} "
            f"wx={wx.shape} wh={wh.shape} b={b.shape}"
        )
    pre = x.data @ wx.data + b.data
    preh = h.data @ wh.data
    gates = _expit(pre[:, : 2 * H] + preh[:, : 2 * H])
    r = gates[:, :H]
    z = gates[:, H:]
    c = preh[:, 2 * H :]
    n = np.tanh(pre[:, 2 * H :] + r * c)
    hn = h.data - n
    out = n + z * hn

    def backward(g):
        dn = g - g * z
        dz = g * hn * (z * (1.0 - z))
        dan = dn * (1.0 - n * n)
        dr = dan * c * (r * (1.0 - r))
        dc = dan * r
        # wx/b columns see the gate pre-activations; the candidate column of
        # wh sees c = h @ Whn, not the post-reset product
        dA = np.concatenate([dr, dz, dan], axis=1)
        dH = np.concatenate([dr, dz, dc], axis=1)
        _accum_own(x, dA @ wx.data.T)
        _accum_own(h, dH @ wh.data.T + g * z)
        _accum_own(wx, x.data.T @ dA)
        _accum_own(wh, h.data.T @ dH)
        _accum_own(b, dA.sum(axis=0))

    return _node("gru_cell", out, (x, h, wx, wh, b), backward)


# -- program evaluation --------------------------------------------------------

# A DiffProgram is a callable (params: dict[str, Tensor], inputs) -> Tensor.
# `inputs` is passed through untouched (constants from the program's view).


def _as_leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _backprop(root: Tensor) -> None:
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def evaluate(program, params: dict[str, np.ndarray], inputs=None):
    """Run a program forward and return its value as a numpy array/scalar."""
    out = program(_as_leaves(params), inputs)
    d = out.data
    return float(d) if d.ndim == 0 else d.copy()


def value_and_grad(program, params: dict[str, np.ndarray], inputs=None):
    """Forward + reverse pass; program output must be scalar."""
    leaves = _as_leaves(params)
    out = program(leaves, inputs)
    if out.data.size != 1:
        raise DiffError(f"grad: program output must be scalar, got shape {out.shape}")
    _backprop(out)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
    }
    return float(out.data), grads


def grad(program, params: dict[str, np.ndarray], inputs=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar program w.r.t. every param leaf."""
    return value_and_grad(program, params, inputs)[1]


def finite_diff_check(
    program, params: dict[str, np.ndarray], inputs=None, step: float = 1e-5
) -> float:
    """Max relative error between reverse-mode and central finite differences.

    Relative error per component is |analytic - numeric| / (|analytic| + 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = grad(program, params, inputs)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        for i in range(flat.size):
            bumped = {k: v.copy() for k, v in params.items()}
            bumped[name].reshape(-1)[i] = flat[i] + step
            up = evaluate(program, bumped, inputs)
            bumped[name].reshape(-1)[i] = flat[i] - step
            down = evaluate(program, bumped, inputs)
            numeric = (up - down) / (2.0 * step)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - numeric) / (abs(ana) + 1e-12)
            worst = max(worst, err)
    return worst


# -- seeded sampling -----------------------------------------------------------


class SeededRng:
    """Deterministic random stream backed by numpy's counter-based Philox.

    The stream is identified by (seed, *stream path); `spawn` derives
    independent child streams so parallel work is order-independent. The
    algorithm id is recorded in checkpoints so runs are replayable.
    """

    ALGORITHM = "philox4x64-numpy"

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((self.seed, *self.stream)))
        )

    def spawn(self, *stream_ids: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(stream_ids))

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def gamma(self, shape, scale=1.0, size=None) -> np.ndarray:
        return self._gen.gamma(shape, scale, size)

    def beta(self, a, b, size=None) -> np.ndarray:
        return self._gen.beta(a, b, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def sample_standard_normal(shape, rng: SeededRng) -> Tensor:
    """i.i.d. N(0,1) draws as a constant leaf (no gradient flows into it)."""
    return Tensor(rng.standard_normal(shape))
