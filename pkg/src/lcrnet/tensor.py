"""Dense tensors with reverse-mode differentiation on a dynamic tape.

Every operation that touches a gradient-carrying tensor records its parents
and a backward rule on the output; ``Tensor.backward()`` replays the recorded
graph in reverse topological order and accumulates adjoints into every
participating tensor.  Tensors whose inputs carry no gradient are plain
values and record nothing, so inference builds no graph at all.

Conventions:
  * float64 buffers throughout; operations never mutate their operands, and
    a tensor's buffer must not be changed once another operation has
    consumed it (backward rules capture buffers by reference).
  * Broadcasting follows numpy's right-aligned rules over leading batch
    axes; backward rules reduce adjoints back to the operand shapes.
  * A recorded graph is single-threaded: one forward/backward pass owns it.
    Independent units of work must build independent graphs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A structural parameter (head count, ratio, geometry) is invalid."""


class GradCheckError(AssertionError):
    """Analytic and finite-difference gradients disagree."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def assign(self, data):
        """Replace the buffer of a leaf tensor (optimizer updates only).

        Must never be called on a tensor that is part of a live graph.
        """
        if self._parents:
            raise ValueError("assign() is only valid on leaf tensors")
        self.data = np.asarray(data, dtype=np.float64)

    def backward(self, grad=None):
        """Accumulate gradients of ``self`` into every participating tensor.

        ``self`` must be a scalar unless ``grad`` supplies the seed adjoint.
        Tensors that do not feed into ``self`` keep their ``grad`` untouched.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise DimensionError(
                    f"seed adjoint shape {grad.shape} != output shape {self.data.shape}"
                )

        order = []
        seen = set()
        stack = [(self, False)]
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

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name=None):
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def _wrap(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast adjoint back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ----------------------------------------------------------


def add(a, b):
    if not isinstance(b, Tensor):
        data = a.data + b
        return _wrap(data, (a,), lambda g: (g,))
    data = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return _wrap(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def mul(a, b):
    if not isinstance(b, Tensor):
        data = a.data * b
        return _wrap(data, (a,), lambda g: (g * b,))
    data = a.data * b.data
    ad, bd = a.data, b.data
    return _wrap(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    data = a.data / b.data
    ad, bd = a.data, b.data
    return _wrap(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def power(a, exponent):
    n = float(exponent)
    data = a.data**n
    ad = a.data
    return _wrap(data, (a,), lambda g: (g * n * ad ** (n - 1.0),))


def matmul(a, b):
    """Batched matrix product over the last two axes.

    Leading axes broadcast; inner extents must agree exactly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs ndim >= 2 operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _wrap(data, (a, b), backward)


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape):
    old = a.data.shape
    data = a.data.reshape(shape)
    return _wrap(data, (a,), lambda g: (g.reshape(old),))


def take(a, key):
    """Basic (slice/integer) indexing with scatter-add backward."""
    data = a.data[key]
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _wrap(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = list(tensors[0].data.shape)
    for t in tensors[1:]:
        got = list(t.data.shape)
        if len(got) != len(ref) or any(
            i != axis % len(ref) and got[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat extents disagree off axis {axis}: {ref} vs {got}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(data, tuple(tensors), backward)


def tensor_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(data, (a,), backward)


def tensor_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- elementwise nonlinearities -------------------------------------------


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    y = _sigmoid_values(a.data)
    return _wrap(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    y = np.tanh(a.data)
    return _wrap(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    y = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _wrap(y, (a,), lambda g: (g * mask,))


def silu(a):
    s = _sigmoid_values(a.data)
    y = a.data * s
    ad = a.data
    return _wrap(y, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),))


def exp(a):
    y = np.exp(a.data)
    return _wrap(y, (a,), lambda g: (g * y,))


def log(a):
    y = np.log(a.data)
    ad = a.data
    return _wrap(y, (a,), lambda g: (g / ad,))


def square(a):
    ad = a.data
    return _wrap(ad * ad, (a,), lambda g: (g * 2.0 * ad,))


def sqrt(a):
    y = np.sqrt(a.data)
    return _wrap(y, (a,), lambda g: (g * 0.5 / y,))


def sin(a):
    ad = a.data
    return _wrap(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a):
    ad = a.data
    return _wrap(np.cos(ad), (a,), lambda g: (g * -np.sin(ad),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    y = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return _wrap(y, (a,), lambda g: (g * mask,))


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "silu": silu,
    "exp": exp,
    "square": square,
}


def activation(a, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}") from None
    return fn(a)


# -- normalization and softmax ---------------------------------------------


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shape {gain.data.shape}/{bias.data.shape} "
            f"does not match feature width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gb = g.sum(axis=lead)
        gg = (g * xhat).sum(axis=lead)
        gy = g * gd
        gx = (
            gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return gx, gg, gb

    return _wrap(y, (x, gain, bias), backward)


def grouped_layer_norm(x, gain, bias, heads, eps=1e-5):
    """layer_norm applied independently to each of ``heads`` channel groups."""
    d = x.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"feature width {d} not divisible into {heads} heads")
    head_dim = d // heads
    grouped = reshape(x, x.data.shape[:-1] + (heads, head_dim))
    ones = constant(np.ones(head_dim))
    zeros = constant(np.zeros(head_dim))
    normalized = reshape(layer_norm(grouped, ones, zeros, eps=eps), x.data.shape)
    return add(mul(normalized, gain), bias)


def log_softmax(x):
    """Log-softmax over the last axis (stable)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logits = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(logits)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _wrap(logits, (x,), backward)


# -- gradient verification --------------------------------------------------


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None, tol=None):
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed
    from the leaf tensors in ``params`` (a name -> Tensor mapping).  Probes
    every coordinate unless ``max_entries`` caps the per-parameter sample.
    Returns the maximum relative error; raises GradCheckError naming the
    worst coordinate when ``tol`` is given and exceeded.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    out = f()
    out.backward()
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }

    worst = 0.0
    worst_site = None
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        aflat = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            with no_grad():
                hi = f().item()
            flat[i] = old - eps
            with no_grad():
                lo = f().item()
            flat[i] = old
            numeric = (hi - lo) / (2.0 * eps)
            err = relative_error(aflat[i], numeric)
            if err > worst:
                worst = err
                worst_site = (name, int(i), float(aflat[i]), float(numeric))
    if tol is not None and worst > tol:
        name, i, a, n = worst_site
        raise GradCheckError(
            f"gradient mismatch at {name}[{i}]: analytic {a:.3e} vs numeric {n:.3e} "
            f"(relative error {worst:.3e} > {tol:.0e})"
        )
    return worst
