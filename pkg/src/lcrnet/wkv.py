"""Decay-weighted key-value attention kernel.

The kernel produces, for every position t of a token sequence, a per-head
matrix state: a bonus-weighted outer product of the current key and value
plus a sum of past outer products whose rows decay geometrically with
distance.  Three equivalent realizations live here:

  * ``wkv_bruteforce`` -- the literal double sum, O(T^2); the reference.
  * ``wkv_recurrent``  -- a sequential scan, O(T), same values.
  * ``wkv_bidirectional`` -- forward plus mirrored backward scan, with the
    current-token bonus counted once; used when tokens have no causal order.

All three are differentiable through the tape.  ``bruteforce_values`` and
``recurrent_values`` are graph-free numpy evaluators for timing runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, concat, constant, exp, matmul, mul, power, reshape

WKV_MODES = ("causal", "bidirectional")


@dataclass
class WkvParams:
    """Per-head decay exponents and current-token bonus."""

    omega: Tensor  # (heads, head_dim); decay = exp(-exp(omega))
    u: Tensor  # (heads, head_dim)

    def __post_init__(self):
        if self.omega.shape != self.u.shape or len(self.omega.shape) != 2:
            raise DimensionError(
                f"omega {self.omega.shape} and u {self.u.shape} must both be (heads, head_dim)"
            )

    @property
    def heads(self):
        return self.omega.shape[0]

    @property
    def head_dim(self):
        return self.omega.shape[1]


def decay_from_omega(omega):
    """exp(-exp(omega)); strictly inside (0, 1) for finite omega."""
    return exp(mul(exp(omega), -1.0))


def _check_kv(K, V):
    if K.shape != V.shape or K.ndim < 3:
        raise DimensionError(f"K {K.shape} and V {V.shape} must both be (..., T, heads, head_dim)")


def _slice_t(x, t):
    return x[(Ellipsis, t, slice(None), slice(None))]


def _outer(k_t, v_t):
    # (..., h, D) x (..., h, D) -> (..., h, D, D); decay acts on the key axis (rows)
    lead = k_t.shape[:-1]
    d = k_t.shape[-1]
    return matmul(reshape(k_t, lead + (d, 1)), reshape(v_t, lead + (1, d)))


def _stack_time(outs):
    expanded = [reshape(o, o.shape[:-3] + (1,) + o.shape[-3:]) for o in outs]
    return concat(expanded, axis=-4)


def wkv_bruteforce(K, V, params):
    """Literal double sum over past positions; O(T^2), serves as the oracle."""
    _check_kv(K, V)
    T = K.shape[-3]
    w = decay_from_omega(params.omega)
    h, d = params.heads, params.head_dim
    u_col = reshape(params.u, (h, d, 1))
    outers = [_outer(_slice_t(K, t), _slice_t(V, t)) for t in range(T)]
    outs = []
    for t in range(T):
        acc = mul(u_col, outers[t])
        for i in range(t):
            w_pow = reshape(power(w, float(t - 1 - i)), (h, d, 1))
            acc = acc + mul(w_pow, outers[i])
        outs.append(acc)
    return _stack_time(outs)


def wkv_recurrent(K, V, params):
    """Sequential scan equivalent to ``wkv_bruteforce``; O(T)."""
    _check_kv(K, V)
    T = K.shape[-3]
    h, d = params.heads, params.head_dim
    w_col = reshape(decay_from_omega(params.omega), (h, d, 1))
    u_col = reshape(params.u, (h, d, 1))
    state = constant(np.zeros(K.shape[:-3] + (h, d, d)))
    outs = []
    for t in range(T):
        outer_t = _outer(_slice_t(K, t), _slice_t(V, t))
        outs.append(mul(u_col, outer_t) + state)
        state = mul(w_col, state) + outer_t
    return _stack_time(outs)


def wkv_bidirectional(K, V, params):
    """Forward and mirrored backward scans; decay by distance, bonus counted once."""
    _check_kv(K, V)
    T = K.shape[-3]
    h, d = params.heads, params.head_dim
    w_col = reshape(decay_from_omega(params.omega), (h, d, 1))
    u_col = reshape(params.u, (h, d, 1))
    outers = [_outer(_slice_t(K, t), _slice_t(V, t)) for t in range(T)]

    zero = constant(np.zeros(K.shape[:-3] + (h, d, d)))
    forward = []
    state = zero
    for t in range(T):
        forward.append(state)
        state = mul(w_col, state) + outers[t]
    backward = [zero] * T
    state = zero
    for t in range(T - 2, -1, -1):
        state = mul(w_col, state) + outers[t + 1]
        backward[t] = state

    outs = [mul(u_col, outers[t]) + forward[t] + backward[t] for t in range(T)]
    return _stack_time(outs)


def wkv(K, V, params, mode="causal"):
    if mode == "causal":
        return wkv_recurrent(K, V, params)
    if mode == "bidirectional":
        return wkv_bidirectional(K, V, params)
    raise ValueError(f"unknown wkv mode {mode!r}; expected one of {WKV_MODES}")


def apply_receptance(R, wkv_out):
    """Row-vector/matrix product R_t . wkv_t per token and head."""
    if R.ndim < 3 or wkv_out.shape[:-1] != R.shape or wkv_out.shape[-1] != R.shape[-1]:
        raise DimensionError(
            f"receptance {R.shape} does not match kernel output {wkv_out.shape}"
        )
    lead = R.shape[:-1]
    d = R.shape[-1]
    rows = matmul(reshape(R, lead + (1, d)), wkv_out)
    return reshape(rows, R.shape)


# -- graph-free evaluators (benchmarks, references) -------------------------


def recurrent_values(k, v, w, u):
    """Numpy scan on raw arrays; k, v: (T, h, d); w, u: (h, d)."""
    T, h, d = k.shape
    out = np.empty((T, h, d, d))
    state = np.zeros((h, d, d))
    w_col = w[:, :, None]
    u_col = u[:, :, None]
    for t in range(T):
        outer = k[t][:, :, None] * v[t][:, None, :]
        out[t] = u_col * outer + state
        state = w_col * state + outer
    return out


def bruteforce_values(k, v, w, u):
    """Vectorized literal double sum on raw arrays; O(T^2) work by construction."""
    T, h, d = k.shape
    outers = k[:, :, :, None] * v[:, :, None, :]  # (T, h, d, d)
    log_w = np.log(w)  # decay is strictly positive
    out = np.empty((T, h, d, d))
    for t in range(T):
        out[t] = u[:, :, None] * outers[t]
        if t:
            powers = np.arange(t - 1, -1, -1)[:, None, None]  # t-1-i for i < t
            decays = np.exp(powers * log_w[None])  # (t, h, d)
            out[t] += np.einsum("ihd,ihde->hde", decays, outers[:t])
    return out
