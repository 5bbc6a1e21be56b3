"""Minimal reverse-mode autodiff over numpy arrays.

Matrices follow the column convention ``features x frames`` (D x T); any
number of leading batch axes is allowed, so a batch of sequences is a
``(B, D, T)`` array and every op below treats the last two axes as the
matrix.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from eend import kernels

LAYER_NORM_EPS = 1e-5


class Tensor:
    """An array plus the closure that pushes its gradient to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs an explicit grad for shape {self.data.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # consumers are done with interior buffers
                    node.grad = None

    # operator sugar for the handful of places where it reads better
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * factor, (a,), lambda g: a._accumulate(g * factor))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


# ---------------------------------------------------------------- reductions / shape


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: x._accumulate(np.broadcast_to(g, x.shape)))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: x._accumulate(np.broadcast_to(g / n, x.shape))
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two (matrix transpose)."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(x.data, axes), (x,), lambda g: x._accumulate(np.transpose(g, inverse))
    )


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(
        np.broadcast_to(x.data, shape), (x,), lambda g: x._accumulate(_unbroadcast(g, x.shape))
    )


def take_rows(x, index: np.ndarray) -> Tensor:
    """Gather along axis -2 with a per-batch index array of shape (..., n)."""
    x = as_tensor(x)
    idx = np.asarray(index)[..., None]
    out = np.take_along_axis(x.data, np.broadcast_to(idx, idx.shape[:-1] + (x.shape[-1],)), axis=-2)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.broadcast_to(idx, g.shape), g, axis=-2)
        x._accumulate(gx)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``weight @ x + bias`` applied to every column of ``x`` (d_in x T -> d_out x T)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.data.ndim < 2 or weight.shape[1] != x.shape[-2]:
        raise ValueError(
            f"linear: weight shape {weight.shape} does not conform to input shape {x.shape}"
        )
    out = weight.data @ x.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data[:, None]
        parents.append(bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(weight.data.T @ g)
        if weight.requires_grad:
            gw = g @ np.swapaxes(x.data, -1, -2)
            weight._accumulate(gw.reshape(-1, *weight.shape).sum(axis=0) if gw.ndim > 2 else gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=-1).reshape(-1, bias.shape[0]).sum(axis=0))

    return _result(out, parents, backward)


def softmax_columns(x) -> Tensor:
    """Softmax over axis -2, so each column of a matrix sums to one."""
    x = as_tensor(x)
    return softmax(x, axis=-2)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each column over the feature axis (-2), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-2]
    if d < 2:
        raise ValueError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-2, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data[:, None] + bias.data[:, None]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=-1).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=-1).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data[:, None]
            gx = inv * (
                gh
                - gh.mean(axis=-2, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-2, keepdims=True)
            )
            x._accumulate(gx)

    return _result(out, (x, gain, bias), backward)


def multi_head_attention(query, key, value, heads: int, params: dict) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    ``query`` is D x Tq, ``key``/``value`` are D x Tk (leading batch axes
    allowed). ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    d = query.shape[-2]
    if d % heads:
        raise ValueError(f"model dimension {d} is not divisible by {heads} heads")
    dh = d // heads
    q = linear(query, params["wq"], params["bq"])
    k = linear(key, params["wk"], params["bk"])
    v = linear(value, params["wv"], params["bv"])
    lead = q.shape[:-2]
    tq, tk = q.shape[-1], k.shape[-1]
    q = reshape(q, lead + (heads, dh, tq))
    k = reshape(k, lead + (heads, dh, tk))
    v = reshape(v, lead + (heads, dh, tk))
    # scores: (..., H, Tk, Tq); softmax over keys = over columns
    scores = scale(matmul(transpose(k), q), 1.0 / math.sqrt(dh))
    weights = softmax_columns(scores)
    ctx = matmul(v, weights)  # (..., H, dh, Tq)
    ctx = reshape(ctx, lead + (d, tq))
    return linear(ctx, params["wo"], params["bo"])


# ---------------------------------------------------------------- LSTM

LSTM_GATES = ("i", "f", "g", "o")


class LstmState:
    """Hidden and cell vectors of an LSTM (each D, or B x D when batched)."""

    __slots__ = ("h", "c")

    def __init__(self, h, c):
        self.h = h
        self.c = c


def lstm_sequence(gates_in, w_hh, h0, c0) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM recurrence over precomputed input-side gate values.

    ``gates_in`` is (B, T, 4D) = W_ih x_t + b_ih + b_hh for every step, gate
    blocks ordered i, f, g, o. Returns ``(H, h_T, c_T)`` with H of shape
    (B, T, D). The recurrent loop runs in :mod:`eend.kernels`.
    """
    gates_in, w_hh, h0, c0 = map(as_tensor, (gates_in, w_hh, h0, c0))
    dtype = gates_in.dtype
    gi = np.ascontiguousarray(gates_in.data, dtype=dtype)
    whh = np.ascontiguousarray(w_hh.data, dtype=dtype)
    h_init = np.ascontiguousarray(h0.data, dtype=dtype)
    c_init = np.ascontiguousarray(c0.data, dtype=dtype)
    hs, cs, acts = kernels.lstm_forward(gi, whh, h_init, c_init)
    hT, cT = hs[:, -1].copy(), cs[:, -1].copy()
    pending = {"hs": None, "hT": None, "cT": None}

    def core_backward(_):
        b, t, d = hs.shape
        dh_seq = pending["hs"] if pending["hs"] is not None else np.zeros_like(hs)
        dhT = pending["hT"] if pending["hT"] is not None else np.zeros((b, d), dtype)
        dcT = pending["cT"] if pending["cT"] is not None else np.zeros((b, d), dtype)
        dgates, dh0, dc0 = kernels.lstm_backward(
            np.ascontiguousarray(dh_seq, dtype=dtype),
            np.ascontiguousarray(dhT, dtype=dtype),
            np.ascontiguousarray(dcT, dtype=dtype),
            whh, h_init, c_init, cs, acts,
        )
        if gates_in.requires_grad:
            gates_in._accumulate(dgates)
        if w_hh.requires_grad:
            h_prev = np.concatenate([h_init[:, None, :], hs[:, :-1]], axis=1)
            w_hh._accumulate(dgates.reshape(-1, 4 * d).T @ h_prev.reshape(-1, d))
        if h0.requires_grad:
            h0._accumulate(_unbroadcast(dh0, h0.shape))
        if c0.requires_grad:
            c0._accumulate(_unbroadcast(dc0, c0.shape))

    # the three outputs feed one core node, which runs after all their consumers
    core = _result(np.zeros(()), (gates_in, w_hh, h0, c0), core_backward)
    if not core.requires_grad:
        return Tensor(hs), Tensor(hT), Tensor(cT)

    def view(slot, data):
        def backward(g):
            pending[slot] = g.copy() if pending[slot] is None else pending[slot] + g
            core._accumulate(np.zeros(()))

        return _result(data, (core,), backward)

    return view("hs", hs), view("hT", hT), view("cT", cT)


def lstm_step(x, state: LstmState, params: dict) -> LstmState:
    """One LSTM step on a single input vector (or a batch of rows).

    ``params`` holds ``w_ih`` (4D x D_in), ``w_hh`` (4D x D), ``b_ih`` and
    ``b_hh`` (both 4D).
    """
    x = as_tensor(x)
    gates_in = add(
        matmul(x, transpose(params["w_ih"])) if x.data.ndim > 1 else _matvec_row(x, params["w_ih"]),
        add(params["b_ih"], params["b_hh"]),
    )
    h, c = as_tensor(state.h), as_tensor(state.c)
    squeeze = h.data.ndim == 1
    if squeeze:
        gates_in = reshape(gates_in, (1, 1, -1))
        h = reshape(h, (1, -1))
        c = reshape(c, (1, -1))
    else:
        gates_in = reshape(gates_in, (gates_in.shape[0], 1, -1))
    _, h1, c1 = lstm_sequence(gates_in, params["w_hh"], h, c)
    if squeeze:
        h1, c1 = reshape(h1, (-1,)), reshape(c1, (-1,))
    return LstmState(h1, c1)


def _matvec_row(x: Tensor, w) -> Tensor:
    w = as_tensor(w)
    return reshape(matmul(w, reshape(x, (-1, 1))), (-1,))


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named learnable tensors; iteration follows insertion order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` keyed by the remaining suffix."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self._params.items() if k.startswith(prefix + ".")}

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, t in self._params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=self.dtype)

    def astype(self, dtype) -> "ParameterStore":
        other = ParameterStore(dtype)
        for k, t in self._params.items():
            other.add(k, t.data)
        return other


def xavier_uniform(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- gradient check


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, epsilon: float) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = fn().item()
        flat[i] = orig - epsilon
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return grad


def grad_check(
    fn: Callable[[], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-6,
    names: Iterable[str] | None = None,
    atol: float = 1e-7,
) -> float:
    """Worst relative error between backprop and central differences.

    The error for one parameter tensor is ``|g_a - g_n| / max(|g_a|, |g_n|)``
    in the 2-norm. Tensors whose two gradient norms are both below ``atol``
    count as exact: that is the level of finite-difference roundoff
    (about ``|f| * 1e-16 / epsilon``), e.g. for attention key biases, which
    softmax cancels.
    """
    params.zero_grad()
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    analytic = {k: params.grad(k).copy() for k in params}
    worst = 0.0
    for name in names if names is not None else params.names():
        numeric = numerical_gradient(fn, params[name], epsilon)
        a = analytic[name]
        scale_ = max(np.linalg.norm(a), np.linalg.norm(numeric))
        if scale_ < atol:
            continue
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale_))
    params.zero_grad()
    return worst
