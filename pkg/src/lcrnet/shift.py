"""Quad-directional token shift over the patch grid.

Each patch token is interpolated with a ``shifted`` companion built from its
four grid neighbors: the first channel quarter comes from the left neighbor,
the second from the right, the third from above, the fourth from below.
Out-of-grid neighbors contribute zeros and the classification token passes
through untouched.  The interpolation weight is a learnable per-channel mix
vector, clamped to [0, 1] at application time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, clip, concat, constant, mul, reshape


@dataclass(frozen=True)
class GridGeometry:
    rows: int
    cols: int
    has_cls: bool = True

    @property
    def num_patches(self):
        return self.rows * self.cols

    @property
    def num_tokens(self):
        return self.num_patches + (1 if self.has_cls else 0)


def quarter_bounds(channels):
    """Channel boundaries of the four direction quarters.

    When ``channels`` is not divisible by four, the first ``channels % 4``
    quarters absorb one extra channel each.
    """
    base, rem = divmod(channels, 4)
    sizes = [base + (1 if i < rem else 0) for i in range(4)]
    edges = np.cumsum([0] + sizes)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(4)]


def _zeros(shape):
    return constant(np.zeros(shape))


def _shift_quarter(grid, direction, lead, rows, cols, width):
    """Neighbor values for one channel quarter; zero-padded at the border."""
    if direction == "left":  # out[i, j] = in[i, j-1]
        body = grid[(Ellipsis, slice(None), slice(0, cols - 1), slice(None))]
        return concat([_zeros(lead + (rows, 1, width)), body], axis=-2)
    if direction == "right":
        body = grid[(Ellipsis, slice(None), slice(1, cols), slice(None))]
        return concat([body, _zeros(lead + (rows, 1, width))], axis=-2)
    if direction == "above":  # out[i, j] = in[i-1, j]
        body = grid[(Ellipsis, slice(0, rows - 1), slice(None), slice(None))]
        return concat([_zeros(lead + (1, cols, width)), body], axis=-3)
    if direction == "below":
        body = grid[(Ellipsis, slice(1, rows), slice(None), slice(None))]
        return concat([body, _zeros(lead + (1, cols, width))], axis=-3)
    raise ValueError(direction)


_DIRECTIONS = ("left", "right", "above", "below")


def q_shift(tokens, geom, mix):
    """Interpolate patch tokens with their grid-neighbor shift.

    tokens: (..., L(+1), C) laid out row-major, CLS last when present.
    mix: (C,) learnable interpolation weights, clamped to [0, 1].
    """
    n = tokens.shape[-2]
    c = tokens.shape[-1]
    if n != geom.num_tokens:
        raise DimensionError(
            f"token count {n} does not match geometry "
            f"{geom.rows}x{geom.cols} (+cls={geom.has_cls})"
        )
    if mix.shape != (c,):
        raise DimensionError(f"mix shape {mix.shape} does not match channels {c}")

    lead = tokens.shape[:-2]
    L = geom.num_patches
    patches = tokens[(Ellipsis, slice(0, L), slice(None))] if geom.has_cls else tokens
    grid = reshape(patches, lead + (geom.rows, geom.cols, c))

    parts = []
    for direction, (a, b) in zip(_DIRECTIONS, quarter_bounds(c)):
        quarter = grid[(Ellipsis, slice(a, b))]
        parts.append(
            _shift_quarter(quarter, direction, lead, geom.rows, geom.cols, b - a)
        )
    shifted = reshape(concat(parts, axis=-1), lead + (L, c))

    m = clip(mix, 0.0, 1.0)
    out = mul(patches, 1.0 - m) + mul(shifted, m)
    if geom.has_cls:
        cls_tok = tokens[(Ellipsis, slice(L, L + 1), slice(None))]
        out = concat([out, cls_tok], axis=-2)
    return out
