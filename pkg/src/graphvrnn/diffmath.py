"""Dense float64 reverse-mode differentiation, Gaussian helpers and ADAM.

Values are plain numpy arrays wrapped in :class:`Var`. Operations performed
while a :class:`Tape` is active, and touching at least one tracked ``Var``,
are appended to that tape together with a vector-Jacobian closure. Calling
:func:`gradient` replays the closures in reverse order.

Without an active tape the same functions simply compute values, which is
what the scoring path uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

LOG_2PI = float(np.log(2.0 * np.pi))


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class Var:
    """A float64 array node, optionally tracked for differentiation."""

    __slots__ = ("value", "tracked", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, tracked: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = "tracked " if self.tracked else ""
        return f"Var({tag}shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node(NamedTuple):
    out: Var
    inputs: tuple
    vjp: Callable
    tag: str


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; nested tapes are allowed and operations go to
    the innermost one. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def watch(self, value) -> Var:
        """Return a tracked leaf holding a copy-free view of ``value``."""
        if isinstance(value, Var):
            value = value.value
        return Var(value, tracked=True)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def tags(self) -> list[str]:
        return [n.tag for n in self.nodes]


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _is_tracked(x) -> bool:
    return isinstance(x, Var) and x.tracked


def _emit(value: np.ndarray, inputs: tuple, vjp: Callable, tag: str) -> Var:
    tape = _active()
    if tape is not None and any(_is_tracked(x) for x in inputs):
        out = Var(value, tracked=True)
        tape.nodes.append(_Node(out, inputs, vjp, tag))
        return out
    return Var(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(tag: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{tag}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- primitives ------------------------------------------------------------


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast("add", av, bv)
    return _emit(
        av + bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
        "add",
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast("sub", av, bv)
    return _emit(
        av - bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)),
        "sub",
    )


def neg(a) -> Var:
    return _emit(-_val(a), (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Var:
    """Elementwise product with numpy broadcasting."""
    av, bv = _val(a), _val(b)
    _check_broadcast("mul", av, bv)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def square(a) -> Var:
    av = _val(a)
    return _emit(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def matmul(a, b) -> Var:
    """Matrix product with numpy semantics (1-D operands and batch dims)."""
    av, bv = _val(a), _val(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {av.shape} and {bv.shape}")
    k_a = av.shape[-1]
    k_b = bv.shape[0] if bv.ndim == 1 else bv.shape[-2]
    if k_a != k_b:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} are not aligned")
    out = av @ bv

    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    out2_shape = np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1])

    def vjp(g):
        g2 = np.reshape(g, out2_shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
        return ga.reshape(av.shape), gb.reshape(bv.shape)

    return _emit(out, (a, b), vjp, "matmul")


def tanh(a) -> Var:
    y = np.tanh(_val(a))
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    y = _expit(_val(a))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a) -> Var:
    """``log(1 + exp(a))``, evaluated without overflow."""
    av = _val(a)
    return _emit(np.logaddexp(0.0, av), (a,), lambda g: (g * _expit(av),), "softplus")


def exp(a) -> Var:
    y = np.exp(_val(a))
    return _emit(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Var:
    av = _val(a)
    if np.any(av <= 0):
        raise DomainError("log: nonpositive argument")
    return _emit(np.log(av), (a,), lambda g: (g / av,), "log")


def sum_(a, axis: int | None = None) -> Var:
    av = _val(a)
    out = av.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return _emit(out, (a,), vjp, "sum")


def concat(items: Sequence, axis: int = -1) -> Var:
    vals = [_val(x) for x in items]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(items), vjp, "concat")


def slice_(a, key) -> Var:
    av = _val(a)
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return (full,)

    return _emit(np.array(out, dtype=np.float64), (a,), vjp, "slice")


def reshape(a, shape) -> Var:
    av = _val(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {av.shape} into {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(av.shape),), "reshape")


def propagate(op, a) -> Var:
    """Apply a constant (dense or sparse) square matrix along axis -2 of ``a``.

    ``a`` has shape ``(..., n, c)``; the result is ``op @ a`` for each
    leading index. ``op`` itself is not differentiated.
    """
    av = _val(a)
    n = op.shape[0]
    if av.ndim < 2 or av.shape[-2] != op.shape[1]:
        raise DimensionError(f"propagate: operator {op.shape} and signal {av.shape}")

    def apply(m, x):
        lead = x.shape[:-2]
        flat = np.moveaxis(x, -2, 0).reshape(x.shape[-2], -1)
        y = m @ flat
        y = np.asarray(y).reshape((m.shape[0],) + lead + (x.shape[-1],))
        return np.moveaxis(y, 0, -2)

    opt = op.T.tocsr() if sp.issparse(op) else op.T
    out = apply(op, av)
    assert out.shape[-2] == n
    return _emit(out, (a,), lambda g: (apply(opt, g),), "propagate")


# -- differentiation -------------------------------------------------------


def gradient(tape: Tape, output: Var, inputs):
    """Adjoints of scalar ``output`` with respect to tracked ``inputs``.

    ``inputs`` is a mapping or a sequence of ``Var``; the result has the
    same keys (indices for sequences). Untracked inputs are omitted;
    tracked inputs the output does not depend on get zero adjoints.
    """
    if output.value.size != 1 or output.value.ndim > 1:
        raise DimensionError(f"gradient: output must be scalar, got shape {output.shape}")
    items = inputs.items() if isinstance(inputs, Mapping) else enumerate(inputs)
    items = [(k, v) for k, v in items if _is_tracked(v)]
    adj: dict[int, np.ndarray] = {}
    if output.tracked:
        adj[id(output)] = np.ones_like(output.value)
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not _is_tracked(inp):
                continue
            key = id(inp)
            prev = adj.get(key)
            adj[key] = gi if prev is None else prev + gi
    return {k: adj.get(id(v), np.zeros_like(v.value)).reshape(v.shape) for k, v in items}


# -- Gaussian utilities ----------------------------------------------------


class GaussianParams(NamedTuple):
    """Diagonal Gaussian given by mean and standard deviation."""

    mean: Var | np.ndarray
    std: Var | np.ndarray


def _check_std(tag: str, std) -> None:
    if np.any(_val(std) <= 0):
        raise DomainError(f"{tag}: standard deviation must be positive")


def gaussian_log_density(x, mean, std, axis: int | None = None) -> Var:
    """Sum of diagonal-Gaussian log densities (over all entries or ``axis``)."""
    xv, mv, sv = _val(x), _val(mean), _val(std)
    if not (xv.shape == mv.shape == sv.shape):
        raise DimensionError(
            f"gaussian_log_density: shapes {xv.shape}, {mv.shape}, {sv.shape} differ"
        )
    _check_std("gaussian_log_density", std)
    resid = sub(x, mean)
    inv = Var(1.0 / sv) if not _is_tracked(std) else None
    if inv is not None:
        z = mul(resid, inv)
    else:
        z = mul(resid, exp(neg(log(std))))
    terms = sub(neg(log(std)), mul(0.5, square(z)))
    return sub(sum_(terms, axis=axis), 0.5 * LOG_2PI * (xv.size if axis is None else xv.shape[axis]))


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams, axis: int | None = None) -> Var:
    """KL(q || p) for diagonal Gaussians, summed over all entries or ``axis``."""
    shapes = {_val(t).shape for t in (q.mean, q.std, p.mean, p.std)}
    if len(shapes) != 1:
        raise DimensionError(f"kl_diag_gaussians: mismatched shapes {sorted(shapes)}")
    _check_std("kl_diag_gaussians", q.std)
    _check_std("kl_diag_gaussians", p.std)
    log_ratio = sub(log(p.std), log(q.std))
    inv_var_p = exp(mul(-2.0, log(p.std)))
    quad = mul(add(square(q.std), square(sub(q.mean, p.mean))), inv_var_p)
    return sum_(add(log_ratio, mul(0.5, quad)), axis=axis) - 0.5 * (
        _val(q.mean).size if axis is None else _val(q.mean).shape[axis]
    )


def reparameterize(g: GaussianParams, noise) -> Var:
    """``mean + std * noise``."""
    if _val(noise).shape != _val(g.mean).shape:
        raise DimensionError(
            f"reparameterize: noise {_val(noise).shape} vs mean {_val(g.mean).shape}"
        )
    return add(g.mean, mul(g.std, noise))


# -- ADAM ------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected ADAM update for gradient *descent*.

    Returns fresh parameter and state objects; the inputs are not modified.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = np.broadcast_to(m, p.shape).copy()
        new_v[name] = np.broadcast_to(v, p.shape).copy()
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
