"""Tape-based reverse-mode differentiation with forward-mode duals on top.

Values are float64 scalars or dense numpy arrays (at most 2-d).  A ``Tape``
records every operation in order; one backward sweep in fixed reverse order
produces gradients, so repeated evaluation of the same program is
bit-identical.  Forward directional derivatives use ``Dual`` pairs whose
components may themselves be tape variables: because the tangent arithmetic
is recorded on the same tape, an expression that contains an input
derivative of a network (e.g. a time derivative) can be differentiated
again with respect to parameters or sensor values.  Second-order input
derivatives come from nesting duals.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NonFiniteError

__all__ = [
    "Tape",
    "Var",
    "Dual",
    "grad",
    "directional",
    "grad_of_directional",
    "fd_check",
    "tanh",
    "exp",
    "log",
    "square",
    "clip_min",
    "vsum",
    "vmean",
    "dot",
    "transpose",
    "reshape",
]


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape._vals[self.idx]

    @property
    def shape(self):
        return np.shape(self.tape._vals[self.idx])

    def __repr__(self):
        return f"Var(idx={self.idx}, value={self.value!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return self.tape._binary("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return self.tape._binary("sub", self, other)

    def __rsub__(self, other):
        return self.tape._binary("sub", other, self, lift_left=True)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return self.tape._binary("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return self.tape._binary("div", self, other)

    def __rtruediv__(self, other):
        return self.tape._binary("div", other, self, lift_left=True)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return self.tape._binary("matmul", self, other)

    def __rmatmul__(self, other):
        return self.tape._binary("matmul", other, self, lift_left=True)

    def __neg__(self):
        return self.tape._unary("neg", self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        return self.tape._unary("pow", self, aux=float(exponent))


class Tape:
    """Append-only record of operations and their primal values."""

    def __init__(self, check_finite=True):
        self._ops = []  # (op, a_idx, b_idx, aux)
        self._vals = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self._ops)

    # -- node creation ----------------------------------------------------

    def _push(self, op, a, b, val, aux=None):
        if self.check_finite and not np.all(np.isfinite(val)):
            raise NonFiniteError(
                "non-finite value produced", node=len(self._ops), op=op
            )
        self._ops.append((op, a, b, aux))
        self._vals.append(val)
        return Var(self, len(self._ops) - 1)

    def input(self, value):
        """Record a differentiable leaf."""
        return self._push("input", -1, -1, np.asarray(value, dtype=np.float64))

    def const(self, value):
        """Record a non-differentiable leaf."""
        return self._push("const", -1, -1, np.asarray(value, dtype=np.float64))

    def _lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.const(x)

    def _binary(self, op, a, b, lift_left=False):
        a = self._lift(a) if lift_left or not isinstance(a, Var) else a
        b = self._lift(b)
        av, bv = self._vals[a.idx], self._vals[b.idx]
        if op == "add":
            val = av + bv
        elif op == "sub":
            val = av - bv
        elif op == "mul":
            val = av * bv
        elif op == "div":
            if np.any(bv == 0.0):
                raise DomainError("division by zero", node=len(self._ops), op=op)
            val = av / bv
        elif op == "matmul":
            val = av @ bv
        else:  # pragma: no cover
            raise ValueError(f"unknown binary op {op!r}")
        return self._push(op, a.idx, b.idx, val)

    def _unary(self, op, a, aux=None):
        a = self._lift(a)
        av = self._vals[a.idx]
        if op == "neg":
            val = -av
        elif op == "tanh":
            val = np.tanh(av)
        elif op == "exp":
            val = np.exp(av)
        elif op == "log":
            if np.any(av <= 0.0):
                raise DomainError(
                    "log of a non-positive value", node=len(self._ops), op=op
                )
            val = np.log(av)
        elif op == "square":
            val = av * av
        elif op == "pow":
            if aux != int(aux) and np.any(av < 0.0):
                raise DomainError(
                    "fractional power of a negative value",
                    node=len(self._ops),
                    op=op,
                )
            val = av**aux
        elif op == "sum":
            val = av.sum(axis=aux) if aux is not None else np.float64(av.sum())
            aux = (aux, np.shape(av))
        elif op == "transpose":
            val = av.T
        elif op == "reshape":
            val = av.reshape(aux)
            aux = (aux, np.shape(av))
        elif op == "clip_min":
            val = np.maximum(av, aux)
        else:  # pragma: no cover
            raise ValueError(f"unknown unary op {op!r}")
        return self._push(op, a.idx, -1, val, aux)

    # -- reverse sweep ----------------------------------------------------

    def gradients(self, output, wrt):
        """Adjoints of scalar ``output`` with respect to the vars in ``wrt``.

        The sweep visits nodes in strictly decreasing index order and
        accumulates contributions in that fixed order, so the result is
        deterministic down to the last bit.
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise ValueError("output must be a Var of this tape")
        out = output.idx
        if np.size(self._vals[out]) != 1:
            raise ValueError("gradients are defined for scalar outputs only")
        vals = self._vals
        ops = self._ops
        adj = [None] * (out + 1)
        adj[out] = np.ones_like(vals[out])

        def acc(j, contrib):
            contrib = _unbroadcast(contrib, np.shape(vals[j]))
            adj[j] = contrib if adj[j] is None else adj[j] + contrib

        for i in range(out, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op, a, b, aux = ops[i]
            if op in ("input", "const"):
                continue
            av = vals[a]
            if op == "add":
                acc(a, g)
                acc(b, g)
            elif op == "sub":
                acc(a, g)
                acc(b, -g)
            elif op == "mul":
                acc(a, g * vals[b])
                acc(b, g * av)
            elif op == "div":
                bv = vals[b]
                acc(a, g / bv)
                acc(b, -g * av / (bv * bv))
            elif op == "matmul":
                bv = vals[b]
                if av.ndim == 2 and bv.ndim == 2:
                    acc(a, g @ bv.T)
                    acc(b, av.T @ g)
                elif av.ndim == 2 and bv.ndim == 1:
                    acc(a, np.outer(g, bv))
                    acc(b, av.T @ g)
                elif av.ndim == 1 and bv.ndim == 2:
                    acc(a, bv @ g)
                    acc(b, np.outer(av, g))
                else:
                    acc(a, g * bv)
                    acc(b, g * av)
            elif op == "neg":
                acc(a, -g)
            elif op == "tanh":
                acc(a, g * (1.0 - vals[i] * vals[i]))
            elif op == "exp":
                acc(a, g * vals[i])
            elif op == "log":
                acc(a, g / av)
            elif op == "square":
                acc(a, 2.0 * g * av)
            elif op == "pow":
                acc(a, g * aux * av ** (aux - 1.0))
            elif op == "sum":
                axis, shape = aux
                if axis is None:
                    acc(a, np.full(shape, g))
                else:
                    acc(a, np.expand_dims(g, axis))
            elif op == "transpose":
                acc(a, g.T)
            elif op == "reshape":
                _, shape = aux
                acc(a, np.reshape(g, shape))
            elif op == "clip_min":
                acc(a, g * (av >= aux))
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")

        results = []
        for v in wrt:
            g = adj[v.idx] if v.idx <= out else None
            if g is None:
                g = np.zeros_like(vals[v.idx])
            elif self.check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient", node=v.idx, op=ops[v.idx][0])
            results.append(np.array(g, dtype=np.float64))
        return results


# -- forward mode ---------------------------------------------------------

def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _tneg(a):
    return None if a is None else -a


class Dual:
    """Pair (primal, tangent) obeying the chain rule under every operation.

    Components may be floats, arrays, tape :class:`Var` handles, or nested
    ``Dual`` values (for second-order derivatives).  ``tangent=None`` means
    an exactly-zero tangent and is skipped in the arithmetic.
    """

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent=None):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.primal!r}, {self.tangent!r})"

    @staticmethod
    def _parts(x):
        if isinstance(x, Dual):
            return x.primal, x.tangent
        return x, None

    def __add__(self, other):
        p, t = Dual._parts(other)
        return Dual(self.primal + p, _tadd(self.tangent, t))

    __radd__ = __add__

    def __sub__(self, other):
        p, t = Dual._parts(other)
        return Dual(self.primal - p, _tadd(self.tangent, _tneg(t)))

    def __rsub__(self, other):
        p, t = Dual._parts(other)
        return Dual(p - self.primal, _tadd(t, _tneg(self.tangent)))

    def __mul__(self, other):
        p, t = Dual._parts(other)
        dt = None if self.tangent is None else self.tangent * p
        if t is not None:
            dt = _tadd(dt, self.primal * t)
        return Dual(self.primal * p, dt)

    __rmul__ = __mul__

    def __truediv__(self, other):
        p, t = Dual._parts(other)
        val = self.primal / p
        dt = None if self.tangent is None else self.tangent / p
        if t is not None:
            dt = _tadd(dt, _tneg(val * t / p))
        return Dual(val, dt)

    def __rtruediv__(self, other):
        p, t = Dual._parts(other)
        val = p / self.primal
        dt = None if t is None else t / self.primal
        if self.tangent is not None:
            dt = _tadd(dt, _tneg(val * self.tangent / self.primal))
        return Dual(val, dt)

    def __matmul__(self, other):
        p, t = Dual._parts(other)
        dt = None if self.tangent is None else self.tangent @ p
        if t is not None:
            dt = _tadd(dt, self.primal @ t)
        return Dual(self.primal @ p, dt)

    def __rmatmul__(self, other):
        p, t = Dual._parts(other)
        dt = None if self.tangent is None else p @ self.tangent
        if t is not None:
            dt = _tadd(dt, t @ self.primal)
        return Dual(p @ self.primal, dt)

    def __neg__(self):
        return Dual(-self.primal, _tneg(self.tangent))

    def __pow__(self, exponent):
        val = self.primal**exponent
        dt = None
        if self.tangent is not None:
            dt = exponent * self.primal ** (exponent - 1.0) * self.tangent
        return Dual(val, dt)


# -- generic elementwise/reduction functions ------------------------------

def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.primal)
        dt = None if x.tangent is None else (1.0 - square(t)) * x.tangent
        return Dual(t, dt)
    if isinstance(x, Var):
        return x.tape._unary("tanh", x)
    return np.tanh(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.primal)
        return Dual(e, None if x.tangent is None else e * x.tangent)
    if isinstance(x, Var):
        return x.tape._unary("exp", x)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.primal), None if x.tangent is None else x.tangent / x.primal)
    if isinstance(x, Var):
        return x.tape._unary("log", x)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise DomainError("log of a non-positive value")
    return np.log(x)


def square(x):
    if isinstance(x, Dual):
        dt = None if x.tangent is None else 2.0 * x.primal * x.tangent
        return Dual(square(x.primal), dt)
    if isinstance(x, Var):
        return x.tape._unary("square", x)
    return np.asarray(x) * np.asarray(x)


def clip_min(x, floor):
    """max(x, floor); derivative 1 where x >= floor, else 0."""
    if isinstance(x, Dual):
        mask = _clip_mask(x.primal, floor)
        dt = None if x.tangent is None else mask * x.tangent
        return Dual(clip_min(x.primal, floor), dt)
    if isinstance(x, Var):
        return x.tape._unary("clip_min", x, aux=float(floor))
    return np.maximum(x, floor)


def _clip_mask(primal, floor):
    while isinstance(primal, Dual):
        primal = primal.primal
    if isinstance(primal, Var):
        return np.asarray(primal.value >= floor, dtype=np.float64)
    return np.asarray(np.asarray(primal) >= floor, dtype=np.float64)


def vsum(x, axis=None):
    if isinstance(x, Dual):
        dt = None if x.tangent is None else vsum(x.tangent, axis)
        return Dual(vsum(x.primal, axis), dt)
    if isinstance(x, Var):
        return x.tape._unary("sum", x, aux=axis)
    return np.asarray(x).sum(axis=axis)


def vmean(x, axis=None):
    n = np.size(_primal_value(x)) if axis is None else np.shape(_primal_value(x))[axis]
    return vsum(x, axis) / float(n)


def _primal_value(x):
    while isinstance(x, Dual):
        x = x.primal
    return x.value if isinstance(x, Var) else np.asarray(x)


def dot(a, b):
    return a @ b


def transpose(x):
    if isinstance(x, Dual):
        dt = None if x.tangent is None else transpose(x.tangent)
        return Dual(transpose(x.primal), dt)
    if isinstance(x, Var):
        return x.tape._unary("transpose", x)
    return np.asarray(x).T


def reshape(x, shape):
    if isinstance(x, Dual):
        dt = None if x.tangent is None else reshape(x.tangent, shape)
        return Dual(reshape(x.primal, shape), dt)
    if isinstance(x, Var):
        return x.tape._unary("reshape", x, aux=tuple(shape))
    return np.asarray(x).reshape(shape)


# -- top-level entry points ------------------------------------------------

def grad(program, inputs):
    """Gradient of a scalar program with respect to its input vector.

    ``program`` maps one :class:`Var` (or anything obeying the same
    operators) to a scalar.  Accumulation order is fixed, so two calls with
    the same inputs return bit-identical vectors.
    """
    tape = Tape()
    x = tape.input(np.asarray(inputs, dtype=np.float64))
    out = program(x)
    return tape.gradients(out, [x])[0]


def directional(program, inputs, direction):
    """Directional derivative ∇program·direction via dual-number propagation."""
    inputs = np.asarray(inputs, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if inputs.shape != direction.shape:
        raise ValueError(
            f"direction shape {direction.shape} does not match inputs {inputs.shape}"
        )
    out = program(Dual(inputs, direction))
    if not isinstance(out, Dual):
        return 0.0
    return float(out.tangent) if out.tangent is not None else 0.0


def grad_of_directional(program, params, inputs, direction):
    """d/dparams of [∇_inputs program(params, ·) · direction].

    ``program`` takes (params, inputs) and returns a scalar; the inner
    directional derivative is propagated as duals recorded on the tape, so
    the outer reverse sweep yields the mixed partials.
    """
    params = np.asarray(params, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if inputs.shape != direction.shape:
        raise ValueError("direction length must match inputs")
    tape = Tape()
    p = tape.input(params)
    out = program(p, Dual(inputs, direction))
    if not isinstance(out, Dual) or not isinstance(out.tangent, Var):
        return np.zeros_like(params)
    return tape.gradients(out.tangent, [p])[0]


def fd_check(program, inputs, step=1e-5):
    """Max relative mismatch between reverse-mode and central differences.

    The denominator is max(|analytic|, 1e-8) per component.  Nonsmooth
    points show up as a large returned error, never as an exception.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = np.asarray(inputs, dtype=np.float64)
    analytic = grad(program, inputs)
    worst = 0.0
    for i in range(inputs.size):
        hi = inputs.copy()
        lo = inputs.copy()
        hi.flat[i] += step
        lo.flat[i] -= step
        approx = (float(program(hi)) - float(program(lo))) / (2.0 * step)
        denom = max(abs(float(analytic.flat[i])), 1e-8)
        worst = max(worst, abs(approx - float(analytic.flat[i])) / denom)
    return worst
