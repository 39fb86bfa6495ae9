"""Array-level reverse-mode differentiation, feedforward networks and Adam.

A :class:`Tensor` wraps a numpy array and records the operations applied to
it. Calling :meth:`Tensor.backward` on a scalar result propagates adjoints to
every tensor created with ``requires_grad=True``. Only the primitives the
mean-field losses need are supported; anything else raises
:class:`UnsupportedPrimitiveError`.

Parameter layout of an :class:`MlpSpec` (part of the checkpoint format):
layers in order, and for each layer the weight matrix of shape
``(fan_in, fan_out)`` in row-major order followed by the bias of length
``fan_out``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "UnsupportedPrimitiveError",
    "DivergenceError",
    "grad",
    "value_and_grad",
    "MlpSpec",
    "Mlp",
    "forward",
    "AdamState",
    "adam_init",
    "adam_step",
    "save_params",
    "load_params",
]


class UnsupportedPrimitiveError(TypeError):
    pass


class DivergenceError(FloatingPointError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # numpy must not silently swallow a Tensor; binary operators with an
    # ndarray on the left arrive here and are routed back to Tensor methods
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and len(inputs) == 2 and not kwargs:
            a, b = as_tensor(inputs[0]), as_tensor(inputs[1])
            if ufunc is np.add:
                return a + b
            if ufunc is np.subtract:
                return a - b
            if ufunc is np.multiply:
                return a * b
            if ufunc is np.matmul:
                return a @ b
        raise UnsupportedPrimitiveError(f"numpy primitive {ufunc.__name__!r} is not differentiable here")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitiveError(f"numpy function {func.__name__!r} is not differentiable here")

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _make(value, parents, backward):
        parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        if not parents:
            return Tensor(value)
        return Tensor(value, True, parents, backward)

    def _accum(self, g):
        # never in place: incoming arrays may be shared between parents
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        o = as_tensor(other)
        out_v = self.value + o.value

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g, o.shape))

        return Tensor._make(out_v, (self, o), back)

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            self._accum(-g)

        return Tensor._make(-self.value, (self,), back)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        o = as_tensor(other)
        a, b = self.value, o.value

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * b, self.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g * a, o.shape))

        return Tensor._make(a * b, (self, o), back)

    __rmul__ = __mul__

    def __matmul__(self, other):
        o = as_tensor(other)
        if o.ndim != 2:
            raise UnsupportedPrimitiveError("matmul supports a 2-D right operand only")
        a, W = self.value, o.value

        def back(g):
            if self.requires_grad:
                self._accum(g @ W.T)
            if o.requires_grad:
                o._accum(a.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1]))

        return Tensor._make(a @ W, (self, o), back)

    def __rmatmul__(self, other):
        # constant @ Tensor weight, e.g. feature matrix times a weight block
        return as_tensor(other) @ self

    def square(self):
        v = self.value

        def back(g):
            self._accum(2.0 * g * v)

        return Tensor._make(v * v, (self,), back)

    def tanh(self):
        y = np.tanh(self.value)

        def back(g):
            self._accum(g * (1.0 - y * y))

        return Tensor._make(y, (self,), back)

    def relu(self):
        mask = self.value > 0

        def back(g):
            self._accum(g * mask)

        return Tensor._make(np.where(mask, self.value, 0.0).astype(self.value.dtype), (self,), back)

    # -- reductions and shape ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, shape))

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / int(n))

    def reshape(self, *shape):
        old = self.shape

        def back(g):
            self._accum(g.reshape(old))

        return Tensor._make(self.value.reshape(*shape), (self,), back)

    def __getitem__(self, idx):
        old = self.shape
        dtype = self.value.dtype

        def back(g):
            full = np.zeros(old, dtype=dtype)
            full[idx] += g
            self._accum(full)

        return Tensor._make(self.value[idx], (self,), back)

    # -- driver --------------------------------------------------------------

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior adjoints are no longer needed
                if node._parents:
                    node.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def relu(x):
    return x.relu() if isinstance(x, Tensor) else np.maximum(x, 0.0)


def square(x):
    return x.square() if isinstance(x, Tensor) else x * x


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def value_and_grad(loss_closure: Callable[[Tensor], Tensor], params: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``loss_closure(theta)`` and its exact gradient at ``params``."""
    theta = Tensor(np.array(params, copy=True), requires_grad=True)
    loss = loss_closure(theta)
    if not isinstance(loss, Tensor):
        raise UnsupportedPrimitiveError("loss closure must return a Tensor")
    if not loss.requires_grad:
        return float(loss.value), np.zeros_like(theta.value)
    loss.backward()
    g = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    return float(loss.value), g


def grad(loss_closure: Callable[[Tensor], Tensor], params: np.ndarray) -> np.ndarray:
    return value_and_grad(loss_closure, params)[1]


# --------------------------------------------------------------------------
# feedforward networks

_CHUNK_ROWS = 2048


def _act_forward(z, activation):
    if activation == "tanh":
        np.tanh(z, out=z)
    else:
        np.maximum(z, 0, out=z)


def _act_backward(z, gh, activation):
    # z holds post-activation values; relu'(0) is taken as 0
    if activation == "tanh":
        gz = z * z
        np.subtract(1.0, gz, out=gz)
        gz *= gh
        return gz
    return gh * (z > 0)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple = ()
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        chunks = []
        w = self.widths
        for fi, fo in zip(w[:-1], w[1:]):
            lim = np.sqrt(6.0 / (fi + fo))
            chunks.append(rng.uniform(-lim, lim, size=fi * fo))
            chunks.append(np.zeros(fo))
        return np.concatenate(chunks)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into a flat parameter vector."""
        out, off = [], 0
        w = self.widths
        for fi, fo in zip(w[:-1], w[1:]):
            out.append((params[off : off + fi * fo].reshape(fi, fo), params[off + fi * fo : off + (fi + 1) * fo]))
            off += (fi + 1) * fo
        return out

    def apply(self, theta, x, context=None, group_mean=False):
        """Run the network on ``x`` (shape ``(..., d_x)``).

        With ``context`` (shape ``(M, d_c)``) the network input is
        ``concat(x, context)`` where ``x`` has shape ``(M, N, d_x)`` and the
        context row is shared by the ``N`` points of group ``m``;
        ``d_x + d_c`` must equal ``input_dim``. The shared part of the first
        layer is computed once per group.

        ``group_mean=True`` returns the average output over the ``N`` points
        of each group, shape ``(M, output_dim)``. Since the last layer is
        affine, the average is taken before it.

        The whole network is one node of the tape. Rows are processed in
        cache-sized blocks, which cuts the cost on large batches noticeably.
        """
        pv, xv = value_of(theta), value_of(x)
        cv = None if context is None else value_of(context)
        d_x = xv.shape[-1]
        if cv is None and d_x != self.input_dim:
            raise ValueError(f"dimension mismatch: expected input of size {self.input_dim}, got {d_x}")
        if (cv is not None or group_mean) and xv.ndim != 3:
            raise ValueError(f"dimension mismatch: grouped inputs must have shape (M, N, d), got {xv.shape}")
        if cv is not None and cv.shape != (xv.shape[0], self.input_dim - d_x):
            raise ValueError(
                f"dimension mismatch: points {xv.shape} and context {cv.shape} "
                f"do not form inputs of size {self.input_dim}"
            )
        if pv.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {pv.shape}")
        dtype = pv.dtype
        xv = xv.astype(dtype, copy=False)
        layers = self.unpack(pv)
        n_layers = len(layers)
        n_run = n_layers - 1 if group_mean else n_layers
        lead = xv.shape[:-1]
        X2 = xv.reshape(-1, d_x)
        rows = X2.shape[0]

        W0, b0 = layers[0]
        Wx = W0 if cv is None else W0[:d_x]
        shared = None
        if cv is not None:
            cv = cv.astype(dtype, copy=False)
            shared = cv @ W0[d_x:] + b0
        if cv is None and not group_mean:
            groups = [(0, rows, None)]
        else:
            N = xv.shape[1]
            groups = [(m * N, (m + 1) * N, m) for m in range(xv.shape[0])]
        blocks = [(s, min(s + _CHUNK_ROWS, e), m) for (s0, e, m) in groups for s in range(s0, e, _CHUNK_ROWS)]

        needs = [isinstance(t, Tensor) and t.requires_grad for t in (theta, x, context)]
        keep = any(needs)
        width = self.widths[n_run]
        if group_mean:
            sums = np.zeros((xv.shape[0], width), dtype=dtype)
            ones = np.ones(_CHUNK_ROWS, dtype=dtype)
        else:
            out = np.empty((rows, self.output_dim), dtype=dtype)
        cache = []
        for s, e, m in blocks:
            h = X2[s:e]
            acts = [h]
            for layer in range(n_run):
                W, b = layers[layer]
                if layer == 0:
                    z = h * Wx[0] if d_x == 1 else h @ Wx
                    z += b0 if shared is None else shared[m]
                else:
                    z = h @ W
                    z += b
                if layer < n_layers - 1:
                    _act_forward(z, self.activation)
                acts.append(z)
                h = z
            if group_mean:
                sums[m] += ones[: e - s] @ h
            else:
                out[s:e] = h
            if keep:
                cache.append(acts)
        if group_mean:
            hmean = sums / xv.shape[1]
            Wl, bl = layers[-1]
            out = hmean @ Wl + bl
        else:
            out = out.reshape(*lead, self.output_dim)
        if not keep:
            return out

        def back(g):
            gp = np.zeros_like(pv)
            glayers = self.unpack(gp)
            if group_mean:
                glayers[-1][0][...] += hmean.T @ g
                glayers[-1][1][...] += g.sum(axis=0)
                g_mean = (g @ layers[-1][0].T) / xv.shape[1]
            else:
                g2 = g.reshape(rows, self.output_dim)
            gx = np.zeros_like(X2) if needs[1] else None
            g_shared = None if shared is None else np.zeros_like(shared)
            ones = np.ones(_CHUNK_ROWS, dtype=dtype)
            for (s, e, m), acts in zip(blocks, cache):
                gh = np.broadcast_to(g_mean[m], (e - s, width)) if group_mean else g2[s:e]
                for layer in range(n_run - 1, -1, -1):
                    z = acts[layer + 1]
                    gz = gh if layer == n_layers - 1 else _act_backward(z, gh, self.activation)
                    gW, gb = glayers[layer]
                    col = ones[: e - s] @ gz
                    if layer == 0:
                        gW[:d_x] += acts[0].T @ gz
                        if shared is None:
                            gb += col
                        else:
                            g_shared[m] += col
                        if gx is not None:
                            gx[s:e] = gz @ Wx.T
                    else:
                        gW += acts[layer].T @ gz
                        gb += col
                        gh = gz @ layers[layer][0].T
                if n_run == 0 and gx is not None:
                    gx[s:e] = gh
            if g_shared is not None:
                gW0, gb0 = glayers[0]
                gW0[d_x:] += cv.T @ g_shared
                gb0 += g_shared.sum(axis=0)
            if needs[0]:
                theta._accum(gp)
            if needs[1]:
                x._accum(gx.reshape(xv.shape))
            if needs[2]:
                context._accum(g_shared @ W0[d_x:].T)

        return Tensor._make(out, (theta, x, context), back)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d["hidden"]), d["output_dim"], d["activation"])


@dataclass
class Mlp:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params)
        if self.params.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.params.shape}")

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        return cls(spec, spec.init(rng))

    def __call__(self, x):
        return forward(self, x)


def forward(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=net.params.dtype)
    if x.ndim == 0:
        x = x.reshape(1)
    return net.spec.apply(net.params, x)


# --------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              dtype=np.float64) -> AdamState:
    return AdamState(0, np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays and leaves inputs untouched."""
    if params.shape != g.shape or state.m.shape != g.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new.astype(params.dtype, copy=False), replace(state, t=t, m=m, v=v)


# --------------------------------------------------------------------------
# checkpoints: <stem>.json header + <stem>.f64 little-endian float64 array


def save_params(stem, header: dict, params: np.ndarray) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data_name = stem.name + ".f64"
    head = {**header, "n_params": int(params.size), "dtype": "<f8", "data": data_name}
    stem.with_name(stem.name + ".json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
    np.asarray(params, dtype="<f8").tofile(stem.with_name(data_name))


def load_params(stem) -> tuple[dict, np.ndarray]:
    stem = Path(stem)
    head = json.loads(stem.with_name(stem.name + ".json").read_text())
    params = np.fromfile(stem.with_name(head["data"]), dtype="<f8")
    if params.size != head["n_params"]:
        raise ValueError("checkpoint length does not match header")
    return head, params
