"""Differentiation services: forward-mode dual numbers for state derivatives
and a recorded-graph reverse mode for parameter gradients.

Shape-factor models need exact first derivatives with respect to their two
state inputs; the training losses then need gradients with respect to every
model parameter *through* those state derivatives.  Forward mode handles the
two-input case, reverse mode the ~10^4-parameter case, and running the
forward-mode tangent rules on recorded nodes gives the required
forward-over-reverse second-order terms with a single backward sweep.

Both `DualScalar` and `Var` carry either python floats or numpy arrays, so
the same model code evaluates pointwise or batched.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class NonSmoothPrimitive(Exception):
    """An operation outside the registered C^2 primitive set was requested."""


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Forward mode
# ---------------------------------------------------------------------------

class DualScalar:
    """Value plus tangent along one seed direction.

    Arithmetic follows the chain rule exactly; the components may be floats,
    numpy arrays, or reverse-mode `Var` nodes (which is how second-order
    terms get recorded).
    """

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None  # numpy defers to our reflected operators

    def __init__(self, value, tangent=None):
        self.value = value
        self.tangent = tangent if tangent is not None else np.zeros_like(value_of(value))

    @staticmethod
    def _coerce(x) -> "DualScalar":
        if isinstance(x, DualScalar):
            return x
        return DualScalar(x)  # zero tangent of matching shape

    def __add__(self, other):
        o = DualScalar._coerce(other)
        return DualScalar(self.value + o.value, self.tangent + o.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        o = DualScalar._coerce(other)
        return DualScalar(self.value - o.value, self.tangent - o.tangent)

    def __rsub__(self, other):
        o = DualScalar._coerce(other)
        return DualScalar(o.value - self.value, o.tangent - self.tangent)

    def __mul__(self, other):
        o = DualScalar._coerce(other)
        return DualScalar(self.value * o.value,
                          self.tangent * o.value + self.value * o.tangent)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = DualScalar._coerce(other)
        inv = 1.0 / o.value
        return DualScalar(self.value * inv,
                          (self.tangent - self.value * inv * o.tangent) * inv)

    def __rtruediv__(self, other):
        return DualScalar._coerce(other).__truediv__(self)

    def __neg__(self):
        return DualScalar(-self.value, -self.tangent)

    def __pow__(self, expo):
        if not isinstance(expo, (int, float)):
            raise NonSmoothPrimitive("only real constant exponents are registered")
        return DualScalar(self.value ** expo,
                          expo * self.value ** (expo - 1.0) * self.tangent)

    def __matmul__(self, other):
        o = DualScalar._coerce(other)
        return DualScalar(self.value @ o.value,
                          self.tangent @ o.value + self.value @ o.tangent)

    def __rmatmul__(self, other):
        return DualScalar._coerce(other).__matmul__(self)

    def __getitem__(self, idx):
        return DualScalar(self.value[idx], self.tangent[idx])

    def __floordiv__(self, other):
        raise NonSmoothPrimitive("floor division is not a smooth primitive")

    def __mod__(self, other):
        raise NonSmoothPrimitive("modulo is not a smooth primitive")

    def tanh(self):
        t = tanh(self.value)
        return DualScalar(t, (1.0 - t * t) * self.tangent)

    def softplus(self):
        return DualScalar(softplus(self.value), sigmoid(self.value) * self.tangent)

    def exp(self):
        e = exp(self.value)
        return DualScalar(e, e * self.tangent)

    def log(self):
        return DualScalar(log(self.value), self.tangent / self.value)

    def sqrt(self):
        r = sqrt(self.value)
        return DualScalar(r, 0.5 * self.tangent / r)

    def __repr__(self):
        return f"DualScalar({self.value!r}, {self.tangent!r})"


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    grad = _as_value(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """Node of the recorded computation graph (reverse mode).

    Values are float64 numpy arrays (0-d for scalars). Each non-leaf node
    keeps its parents together with vector-Jacobian closures; `gradients`
    replays the record once, in reverse construction order, which makes the
    result bitwise deterministic.
    """

    __slots__ = ("value", "_parents")
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = ()):
        self.value = _as_value(value)
        self._parents = parents

    # -- helpers ------------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> np.ndarray:
        return self.value

    @staticmethod
    def _lift(x) -> "Var":
        return x if isinstance(x, Var) else Var(x)

    def _unary(self, value, vjp) -> "Var":
        return Var(value, ((self, vjp),))

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, DualScalar):
            return NotImplemented
        o = Var._lift(other)
        return Var(self.value + o.value,
                   ((self, lambda g: _unbroadcast(g, self.shape)),
                    (o, lambda g: _unbroadcast(g, o.shape))))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DualScalar):
            return NotImplemented
        o = Var._lift(other)
        return Var(self.value - o.value,
                   ((self, lambda g: _unbroadcast(g, self.shape)),
                    (o, lambda g: _unbroadcast(-g, o.shape))))

    def __rsub__(self, other):
        return Var._lift(other).__sub__(self)

    def __mul__(self, other):
        if isinstance(other, DualScalar):
            return NotImplemented
        o = Var._lift(other)
        return Var(self.value * o.value,
                   ((self, lambda g: _unbroadcast(g * o.value, self.shape)),
                    (o, lambda g: _unbroadcast(g * self.value, o.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DualScalar):
            return NotImplemented
        o = Var._lift(other)
        inv = 1.0 / o.value
        return Var(self.value * inv,
                   ((self, lambda g: _unbroadcast(g * inv, self.shape)),
                    (o, lambda g: _unbroadcast(-g * self.value * inv * inv, o.shape))))

    def __rtruediv__(self, other):
        return Var._lift(other).__truediv__(self)

    def __neg__(self):
        return self._unary(-self.value, lambda g: -g)

    def __pow__(self, expo):
        if not isinstance(expo, (int, float)):
            raise NonSmoothPrimitive("only real constant exponents are registered")
        val = self.value ** expo
        return self._unary(val, lambda g: g * expo * self.value ** (expo - 1.0))

    def __matmul__(self, other):
        if isinstance(other, DualScalar):
            return NotImplemented
        o = Var._lift(other)
        a, b = self.value, o.value
        if a.ndim != 2 or b.ndim != 2:
            raise NonSmoothPrimitive("matmul is registered for 2-D operands only")
        return Var(a @ b,
                   ((self, lambda g: g @ b.T),
                    (o, lambda g: a.T @ g)))

    def __rmatmul__(self, other):
        return Var._lift(other).__matmul__(self)

    def __getitem__(self, idx):
        shape = self.shape
        basic = isinstance(idx, (int, slice)) or (
            isinstance(idx, tuple) and all(isinstance(k, (int, slice)) for k in idx))

        def vjp(g):
            full = np.zeros(shape, dtype=np.float64)
            if basic:
                full[idx] = g  # basic indices never repeat elements
            else:
                np.add.at(full, idx, g)
            return full

        return self._unary(self.value[idx], vjp)

    def __floordiv__(self, other):
        raise NonSmoothPrimitive("floor division is not a smooth primitive")

    def __mod__(self, other):
        raise NonSmoothPrimitive("modulo is not a smooth primitive")

    # -- elementwise functions ----------------------------------------------
    def tanh(self):
        t = np.tanh(self.value)
        return self._unary(t, lambda g: g * (1.0 - t * t))

    def softplus(self):
        s = np.logaddexp(0.0, self.value)
        return self._unary(s, lambda g: g * sigmoid(self.value))

    def exp(self):
        e = np.exp(self.value)
        return self._unary(e, lambda g: g * e)

    def log(self):
        return self._unary(np.log(self.value), lambda g: g / self.value)

    def sqrt(self):
        r = np.sqrt(self.value)
        return self._unary(r, lambda g: g * 0.5 / r)

    def abs(self):
        return self._unary(np.abs(self.value), lambda g: g * np.sign(self.value))

    # -- reductions / shape -------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            g = _as_value(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._unary(self.value.sum(axis=axis, keepdims=keepdims), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        old = self.shape
        return self._unary(self.value.reshape(*shape), lambda g: _as_value(g).reshape(old))

    def __repr__(self):
        return f"Var({self.value!r})"


def concat(parts: Iterable, axis: int = 0):
    """Concatenate a sequence of Var / DualScalar / ndarray along an axis."""
    parts = list(parts)
    if any(isinstance(p, DualScalar) for p in parts):
        duals = [DualScalar._coerce(p) for p in parts]
        return DualScalar(concat([d.value for d in duals], axis),
                          concat([d.tangent for d in duals], axis))
    if any(isinstance(p, Var) for p in parts):
        nodes = [Var._lift(p) for p in parts]
        sizes = [n.value.shape[axis] for n in nodes]
        offsets = np.cumsum([0] + sizes)
        value = np.concatenate([n.value for n in nodes], axis=axis)

        def make_vjp(i):
            sl = [slice(None)] * value.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            sl = tuple(sl)
            return lambda g: _as_value(g)[sl]

        return Var(value, tuple((nodes[i], make_vjp(i)) for i in range(len(nodes))))
    return np.concatenate([_as_value(p) for p in parts], axis=axis)


# ---------------------------------------------------------------------------
# Generic elementwise helpers (dispatch on operand type)
# ---------------------------------------------------------------------------

def tanh(x):
    return x.tanh() if isinstance(x, (Var, DualScalar)) else np.tanh(x)


def softplus(x):
    if isinstance(x, (Var, DualScalar)):
        return x.softplus()
    return np.logaddexp(0.0, x)


def exp(x):
    return x.exp() if isinstance(x, (Var, DualScalar)) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, (Var, DualScalar)) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, (Var, DualScalar)) else np.sqrt(x)


def absolute(x):
    if isinstance(x, Var):
        return x.abs()
    if isinstance(x, DualScalar):
        raise NonSmoothPrimitive("absolute value has no forward-mode rule here")
    return np.abs(x)


def sigmoid(x):
    if isinstance(x, (Var, DualScalar)):
        return 0.5 * (tanh(0.5 * x) + 1.0)
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def value_of(x) -> np.ndarray:
    """Plain numpy value of a Var / DualScalar / array-like."""
    while isinstance(x, (Var, DualScalar)):
        x = x.value
    return _as_value(x)


def transpose(x):
    """2-D transpose across all operand kinds."""
    if isinstance(x, Var):
        return Var(x.value.T, ((x, lambda g: _as_value(g).T),))
    if isinstance(x, DualScalar):
        return DualScalar(transpose(x.value), transpose(x.tangent))
    return _as_value(x).T


# ---------------------------------------------------------------------------
# Public differentiation entry points
# ---------------------------------------------------------------------------

def gradients(output: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    """Reverse sweep over the recorded graph; returns d(output)/d(w) per leaf.

    The traversal order is fixed by construction order, so repeated calls on
    identical graphs produce bitwise identical gradients.
    """
    wrt = list(wrt)
    if not isinstance(output, Var):
        return [np.zeros_like(w.value) for w in wrt]

    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    wanted = {id(w) for w in wrt}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            contribution = vjp(g)
            held = grads.get(id(parent))
            grads[id(parent)] = contribution if held is None else held + contribution
        if id(node) not in wanted:
            del grads[id(node)]

    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def derive_wrt_state(model_forward: Callable, tr, rhor) -> dict:
    """Evaluate (theta, phi) and their exact partials w.r.t. the reduced state.

    `model_forward` must be composed of the registered smooth primitives; it
    receives the two state inputs (as DualScalar) and returns (theta, phi).
    """
    def parts(out, seed_value):
        if isinstance(out, DualScalar):
            return out.value, out.tangent
        return out, np.zeros_like(_as_value(seed_value))

    t_tr = model_forward(DualScalar(tr, np.ones_like(_as_value(tr))),
                         DualScalar(rhor, np.zeros_like(_as_value(rhor))))
    t_rho = model_forward(DualScalar(tr, np.zeros_like(_as_value(tr))),
                          DualScalar(rhor, np.ones_like(_as_value(rhor))))

    theta, d_theta_d_tr = parts(t_tr[0], tr)
    phi, d_phi_d_tr = parts(t_tr[1], tr)
    _, d_theta_d_rhor = parts(t_rho[0], tr)
    _, d_phi_d_rhor = parts(t_rho[1], tr)
    return {
        "theta": theta,
        "phi": phi,
        "d_theta_d_tr": d_theta_d_tr,
        "d_theta_d_rhor": d_theta_d_rhor,
        "d_phi_d_tr": d_phi_d_tr,
        "d_phi_d_rhor": d_phi_d_rhor,
    }


def grad_params(loss_forward: Callable[[Mapping[str, Var]], Var],
                params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every named parameter array."""
    leaves = {name: Var(value) for name, value in params.items()}
    loss = loss_forward(leaves)
    if isinstance(loss, Var) and loss.value.ndim != 0:
        raise ValueError("loss_forward must return a scalar")
    names = list(leaves)
    grads = gradients(loss, [leaves[n] for n in names])
    return dict(zip(names, grads))
