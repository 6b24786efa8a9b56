"""Recurrent cell: edge-gated cell-state update, gated hidden output, classifier.

The cell state only moves where the edge tokens are nonzero; with silent
edges it is carried over bit-exactly.  The hidden output squashes the cell
state and gates it with the sigmoid of the incoming activation, so every
entry stays inside (-1, 1).  Classification reads the CLS rows of the final
hidden output and cell state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    clip,
    concat,
    layer_norm,
    matmul,
    mul,
    parameter,
    reshape,
    sigmoid,
    tanh,
)


@dataclass
class RecurrentState:
    hidden: Tensor  # (..., L+1, C)
    cell: Tensor  # (..., L+1, C)
    t: int = 0

    @classmethod
    def initial(cls, shape):
        zero = np.zeros(shape)
        return cls(hidden=Tensor(zero), cell=Tensor(zero.copy()), t=0)


def cell_step(a_t, edge_tokens, state, clamp=None):
    """One frame update; returns (output, advanced state).

    cell'   = edge * (tanh(a) + cell) + cell
    output  = hidden' = tanh(cell') * sigmoid(a)

    ``clamp`` optionally bounds the cell state at +-clamp (training
    stabilizer; off by default so the update is the literal recurrence).
    """
    if a_t.shape != edge_tokens.shape or a_t.shape != state.cell.shape:
        raise DimensionError(
            f"cell_step shapes disagree: a={a_t.shape} edge={edge_tokens.shape} "
            f"cell={state.cell.shape}"
        )
    new_cell = mul(edge_tokens, tanh(a_t) + state.cell) + state.cell
    if clamp is not None:
        new_cell = clip(new_cell, -clamp, clamp)
    out = mul(tanh(new_cell), sigmoid(a_t))
    return out, RecurrentState(hidden=out, cell=new_cell, t=state.t + 1)


@dataclass
class ClassifierHead:
    ln_gain: Tensor  # (2C,)
    ln_bias: Tensor
    w_class: Tensor  # (2C, num_classes)

    @classmethod
    def create(cls, channels, num_classes, rng):
        bound = 1.0 / np.sqrt(2 * channels)
        return cls(
            ln_gain=parameter(np.ones(2 * channels)),
            ln_bias=parameter(np.zeros(2 * channels)),
            w_class=parameter(rng.uniform(-bound, bound, size=(2 * channels, num_classes))),
        )

    def params(self):
        return {"ln.gain": self.ln_gain, "ln.bias": self.ln_bias, "w": self.w_class}

    @property
    def num_classes(self):
        return self.w_class.shape[1]


def classify(output, cell, head, geom):
    """Logits from the CLS rows of the final output and cell state."""
    if not geom.has_cls:
        raise ConfigError("classification requires a geometry with a CLS token")
    cls_idx = geom.num_tokens - 1
    cls_out = output[(Ellipsis, cls_idx, slice(None))]
    cls_cell = cell[(Ellipsis, cls_idx, slice(None))]
    feat = concat([cls_out, cls_cell], axis=-1)
    normed = layer_norm(feat, head.ln_gain, head.ln_bias)
    lead = normed.shape[:-1]
    two_c = normed.shape[-1]
    logits = matmul(reshape(normed, lead + (1, two_c)), head.w_class)
    return reshape(logits, lead + (head.num_classes,))


def predict(logits):
    """Argmax with lowest-index tie-break."""
    return np.argmax(np.asarray(logits.data if isinstance(logits, Tensor) else logits), axis=-1)
