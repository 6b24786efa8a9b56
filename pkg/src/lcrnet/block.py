"""Cross-attention gate block: causal input aggregation, spatial mix, channel mix.

The spatial mix builds receptance R and gate G from the causal aggregation of
the current tokens with the previous hidden state, while key K and value V
come from the edge-token stream; the decay-weighted kernel then aggregates
K/V globally and the receptance reads it out per token.  The channel mix is a
squared-ReLU feedforward behind a sigmoid gate.  Both halves are pre-normed
with residual connections, and the output projections start at zero so a
fresh block is the identity on its residual stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wkv as wkv_mod
from .shift import q_shift
from .tensor import (
    ConfigError,
    Tensor,
    concat,
    constant,
    grouped_layer_norm,
    layer_norm,
    matmul,
    mul,
    parameter,
    relu,
    reshape,
    sigmoid,
    silu,
    square,
)
from .wkv import WkvParams, apply_receptance


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def default_omega(heads, head_dim):
    """Spread decay exponents so channels cover long to short memory."""
    row = np.linspace(-5.0, 1.0, head_dim) if head_dim > 1 else np.array([-1.0])
    return np.tile(row, (heads, 1))


def default_bonus(heads, head_dim):
    row = 0.5 * np.linspace(-1.0, 1.0, head_dim) if head_dim > 1 else np.array([0.5])
    return np.tile(row, (heads, 1))


@dataclass
class CrossRwkvBlock:
    """Parameter container for one gate block; forward calls are pure."""

    channels: int
    heads: int
    kernel_size: int
    hidden_ratio: int
    ln1_gain: Tensor
    ln1_bias: Tensor
    conv_kernel: Tensor  # (kernel_size, 2C) depthwise taps along the token axis
    conv_point: Tensor  # (2C, C)
    conv_bias: Tensor
    mix_r: Tensor
    mix_g: Tensor
    mix_k: Tensor
    mix_v: Tensor
    w_r: Tensor
    w_g: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor  # spatial-mix output projection; zero-initialized
    wkv_params: WkvParams
    head_ln_gain: Tensor
    head_ln_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mix_r2: Tensor
    mix_k2: Tensor
    w_r2: Tensor
    w_k2: Tensor  # (C, hidden_ratio*C)
    w_v2: Tensor  # (hidden_ratio*C, C); zero-initialized

    @classmethod
    def create(cls, channels, heads, rng, kernel_size=3, hidden_ratio=4):
        c = channels
        if c % heads != 0:
            raise ConfigError(f"channels {c} not divisible by heads {heads}")
        head_dim = c // heads
        hidden = hidden_ratio * c

        # Depthwise identity tap on the current position plus a pass-through
        # pointwise map keeps the aggregation equal to the token stream at init.
        kernel = np.zeros((kernel_size, 2 * c))
        kernel[-1, :] = 1.0
        point = np.concatenate([np.eye(c), np.zeros((c, c))], axis=0)

        return cls(
            channels=c,
            heads=heads,
            kernel_size=kernel_size,
            hidden_ratio=hidden_ratio,
            ln1_gain=parameter(np.ones(c)),
            ln1_bias=parameter(np.zeros(c)),
            conv_kernel=parameter(kernel),
            conv_point=parameter(point),
            conv_bias=parameter(np.zeros(c)),
            mix_r=parameter(np.full(c, 0.5)),
            mix_g=parameter(np.full(c, 0.5)),
            mix_k=parameter(np.full(c, 0.5)),
            mix_v=parameter(np.full(c, 0.5)),
            w_r=parameter(uniform_init(rng, c, (c, c))),
            w_g=parameter(uniform_init(rng, c, (c, c))),
            w_k=parameter(uniform_init(rng, c, (c, c))),
            w_v=parameter(uniform_init(rng, c, (c, c))),
            w_out=parameter(np.zeros((c, c))),
            wkv_params=WkvParams(
                omega=parameter(default_omega(heads, head_dim)),
                u=parameter(default_bonus(heads, head_dim)),
            ),
            head_ln_gain=parameter(np.ones(c)),
            head_ln_bias=parameter(np.zeros(c)),
            ln2_gain=parameter(np.ones(c)),
            ln2_bias=parameter(np.zeros(c)),
            mix_r2=parameter(np.full(c, 0.5)),
            mix_k2=parameter(np.full(c, 0.5)),
            w_r2=parameter(uniform_init(rng, c, (c, c))),
            w_k2=parameter(uniform_init(rng, c, (c, hidden))),
            w_v2=parameter(np.zeros((hidden, c))),
        )

    def params(self):
        named = {
            "ln1.gain": self.ln1_gain,
            "ln1.bias": self.ln1_bias,
            "conv.kernel": self.conv_kernel,
            "conv.point": self.conv_point,
            "conv.bias": self.conv_bias,
            "mix.r": self.mix_r,
            "mix.g": self.mix_g,
            "mix.k": self.mix_k,
            "mix.v": self.mix_v,
            "w.r": self.w_r,
            "w.g": self.w_g,
            "w.k": self.w_k,
            "w.v": self.w_v,
            "w.out": self.w_out,
            "wkv.omega": self.wkv_params.omega,
            "wkv.u": self.wkv_params.u,
            "head_ln.gain": self.head_ln_gain,
            "head_ln.bias": self.head_ln_bias,
            "ln2.gain": self.ln2_gain,
            "ln2.bias": self.ln2_bias,
            "mix.r2": self.mix_r2,
            "mix.k2": self.mix_k2,
            "w.r2": self.w_r2,
            "w.k2": self.w_k2,
            "w.v2": self.w_v2,
        }
        return named

    def param_count(self):
        return sum(p.size for p in self.params().values())

    @staticmethod
    def expected_param_count(channels, heads, kernel_size=3, hidden_ratio=4):
        """Analytic count; heads rearrange parameters but never add any."""
        c = channels
        del heads
        projections = (4 + 1 + 1) * c * c + 2 * hidden_ratio * c * c
        conv = kernel_size * 2 * c + 2 * c * c + c
        norms = 3 * 2 * c
        mixes = 6 * c
        decay = 2 * c
        return projections + conv + norms + mixes + decay


def causal_aggregate(x, h_prev, block):
    """Fuse tokens with the previous hidden state through a causal conv.

    Channel-concatenates the two streams, applies a depthwise convolution
    along the token axis that sees only current-and-previous positions,
    then projects back down to the token width.
    """
    if x.shape != h_prev.shape:
        raise ValueError(f"token stream {x.shape} and hidden state {h_prev.shape} differ")
    both = concat([x, h_prev], axis=-1)
    n = both.shape[-2]
    lead = both.shape[:-2]
    k = block.kernel_size
    padded = concat([constant(np.zeros(lead + (k - 1, both.shape[-1]))), both], axis=-2)
    acc = None
    for j in range(k):
        tap = block.conv_kernel[(j,)]
        term = mul(padded[(Ellipsis, slice(j, j + n), slice(None))], tap)
        acc = term if acc is None else acc + term
    return matmul(acc, block.conv_point) + block.conv_bias


def _to_heads(x, heads):
    lead = x.shape[:-1]
    return reshape(x, lead + (heads, x.shape[-1] // heads))


def spatial_mix(x, h_prev, edge_tokens, geom, block, mode="bidirectional", rotary=None):
    """Global token mixing; returns the residual-updated stream.

    R and G are projected from the causal aggregation of (x, h_prev); K and V
    are projected from the edge tokens.  The kernel output is read out with R,
    normalized per head, gated by SiLU(G), projected, and added back to x.
    """
    normed = layer_norm(x, block.ln1_gain, block.ln1_bias)
    agg = causal_aggregate(normed, h_prev, block)
    r = matmul(q_shift(agg, geom, block.mix_r), block.w_r)
    g = matmul(q_shift(agg, geom, block.mix_g), block.w_g)
    k = matmul(q_shift(edge_tokens, geom, block.mix_k), block.w_k)
    v = matmul(q_shift(edge_tokens, geom, block.mix_v), block.w_v)
    if rotary is not None:
        r = rotary(r)
        k = rotary(k)
    kernel = wkv_mod.wkv(_to_heads(k, block.heads), _to_heads(v, block.heads), block.wkv_params, mode)
    read = apply_receptance(_to_heads(r, block.heads), kernel)
    read = reshape(read, x.shape)
    gated = mul(silu(g), grouped_layer_norm(read, block.head_ln_gain, block.head_ln_bias, block.heads))
    return x + matmul(gated, block.w_out)


def channel_mix(a, geom, block):
    """Per-token channel fusion behind a sigmoid gate; residual-updated."""
    normed = layer_norm(a, block.ln2_gain, block.ln2_bias)
    r = matmul(q_shift(normed, geom, block.mix_r2), block.w_r2)
    k = matmul(q_shift(normed, geom, block.mix_k2), block.w_k2)
    v = matmul(square(relu(k)), block.w_v2)
    return a + mul(sigmoid(r), v)


def block_forward(x, h_prev, edge_tokens, geom, block, mode="bidirectional", rotary=None):
    mixed = spatial_mix(x, h_prev, edge_tokens, geom, block, mode=mode, rotary=rotary)
    return channel_mix(mixed, geom, block)
