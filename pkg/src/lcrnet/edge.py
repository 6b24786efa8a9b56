"""Edge extraction and zero-initialized edge-token embedding.

Per frame: Gaussian smoothing, Sobel gradients, non-maximum suppression,
then double-threshold hysteresis, with both thresholds derived adaptively
from the between-class-variance maximizer of the gradient-magnitude
histogram (high = the maximizer, low = high / 2).  The resulting binary map
is patchified and pushed through an embedding whose weights, bias, and CLS
slot all start at exactly zero, so the edge branch contributes nothing
until training moves it.

Pipeline constants are fixed so an independent reference implementation can
reproduce the output bit for bit: 5x5 Gaussian at sigma 1.4, 3x3 Sobel,
reflect padding, four-bin direction quantization, suppression keeps a pixel
only if it strictly exceeds its earlier neighbor along the gradient axis and
is at least its later neighbor, and magnitudes are rescaled to [0, 255]
before thresholding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ConfigError, Tensor, concat, constant, matmul, parameter, reshape

GAUSSIAN_SIZE = 5
GAUSSIAN_SIGMA = 1.4
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


@dataclass
class EdgeMap:
    pixels: np.ndarray  # (H, W) uint8 in {0, 1}
    frame_index: int = -1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        bad = np.setdiff1d(np.unique(self.pixels), [0, 1])
        if bad.size:
            raise ValueError(f"edge map must be binary, found values {bad.tolist()}")


def to_grayscale(frame):
    """Collapse a (3, H, W) frame to luma; (H, W) passes through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 3:
        r, g, b = LUMA_WEIGHTS
        return r * frame[0] + g * frame[1] + b * frame[2]
    raise ValueError(f"expected (H, W) or (3, H, W) frame, got {frame.shape}")


def gaussian_kernel(size=GAUSSIAN_SIZE, sigma=GAUSSIAN_SIGMA):
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    kernel = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _convolve_reflect(img, kernel):
    half = kernel.shape[0] // 2
    padded = np.pad(img, half, mode="reflect")
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(kernel.shape[0]):
        for dx in range(kernel.shape[1]):
            out += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def gradient_field(frame):
    """Smoothed Sobel gradients and magnitude rescaled to [0, 255]."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale (H, W) frame, got {img.shape}")
    smoothed = _convolve_reflect(img, gaussian_kernel())
    gx = _convolve_reflect(smoothed, SOBEL_X)
    gy = _convolve_reflect(smoothed, SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag * (255.0 / peak)
    return gx, gy, mag


def _suppress_nonmaxima(mag, gx, gy):
    """Keep only ridge pixels along the quantized gradient direction.

    A pixel survives when it strictly exceeds the neighbor on the negative
    side of its gradient axis and is >= the neighbor on the positive side,
    so plateau ties resolve to a single one-pixel line.
    """
    h, w = mag.shape
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3

    offsets = {
        0: (0, 1),  # horizontal gradient: compare left / right
        1: (1, 1),  # down-right diagonal
        2: (1, 0),  # vertical gradient: compare above / below
        3: (1, -1),  # down-left diagonal
    }
    padded = np.pad(mag, 1, mode="constant")
    out = np.zeros_like(mag)
    for b, (dy, dx) in offsets.items():
        mask = bins == b
        before = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        after = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        keep = mask & (mag > before) & (mag >= after)
        out[keep] = mag[keep]
    return out


def otsu_threshold(histogram):
    """Bin index maximizing between-class variance; ties go to the lower index.

    Classes split as [0, k) vs [k, 256); k = 0 leaves the low class empty.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError(f"expected a 256-bin histogram, got shape {hist.shape}")
    total = hist.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    levels = np.arange(256, dtype=np.float64)
    cum_mass = np.cumsum(hist)
    cum_first = np.cumsum(hist * levels)

    best_k, best_var = 0, -1.0
    for k in range(256):
        mass0 = cum_mass[k - 1] if k > 0 else 0.0
        mass1 = total - mass0
        if mass0 == 0.0 or mass1 == 0.0:
            var = 0.0
        else:
            w0 = mass0 / total
            w1 = mass1 / total
            mu0 = (cum_first[k - 1] if k > 0 else 0.0) / mass0
            mu1 = (cum_first[255] - (cum_first[k - 1] if k > 0 else 0.0)) / mass1
            var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_k = k
    return best_k


def magnitude_histogram(mag):
    counts, _ = np.histogram(mag, bins=256, range=(0.0, 256.0))
    return counts


def canny(frame, low, high, frame_index=-1):
    """Edge map from smoothing, Sobel, suppression, and hysteresis.

    Thresholds apply to the magnitude rescaled to [0, 255]; weak pixels in
    [low, high) survive only when 8-connected to a strong (>= high) pixel.
    """
    if not (high >= low >= 0):
        raise ValueError(f"need high >= low >= 0, got low={low} high={high}")
    gx, gy, mag = gradient_field(frame)
    ridges = _suppress_nonmaxima(mag, gx, gy)

    strong = (ridges >= high) & (ridges > 0)
    weak = (ridges >= low) & (ridges > 0)
    if not strong.any():
        return EdgeMap(np.zeros(mag.shape, dtype=np.uint8), frame_index)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep_ids = np.unique(labels[strong])
    edges = np.isin(labels, keep_ids[keep_ids > 0])
    return EdgeMap(edges.astype(np.uint8), frame_index)


def adaptive_thresholds(frame):
    """(low, high) from the gradient histogram: high = maximizer, low = high/2."""
    _, _, mag = gradient_field(frame)
    high = float(otsu_threshold(magnitude_histogram(mag)))
    return high / 2.0, high


def compute_edge_map(frame, frame_index=-1):
    gray = to_grayscale(frame)
    low, high = adaptive_thresholds(gray)
    return canny(gray, low, high, frame_index)


@dataclass
class EdgeEmbed:
    """Patch embedding of edge maps; starts contributing exactly zero.

    Weights, bias, and the learnable CLS slot are all zero-initialized, so
    the edge branch is silent at the start of training and wakes up only
    through gradient updates.
    """

    patch_size: int
    weight: Tensor  # (patch_size**2, C)
    bias: Tensor  # (C,)
    cls_slot: Tensor  # (C,)

    @classmethod
    def create(cls, patch_size, channels):
        return cls(
            patch_size=patch_size,
            weight=parameter(np.zeros((patch_size * patch_size, channels))),
            bias=parameter(np.zeros(channels)),
            cls_slot=parameter(np.zeros(channels)),
        )

    def params(self):
        return {"weight": self.weight, "bias": self.bias, "cls": self.cls_slot}


def patchify_maps(maps, patch_size):
    """(..., H, W) binary maps -> (..., L, patch_size**2) float patches."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ConfigError(f"frame {h}x{w} not divisible by patch size {patch_size}")
    r, c = h // patch_size, w // patch_size
    lead = maps.shape[:-2]
    grid = maps.reshape(lead + (r, patch_size, c, patch_size))
    axes = tuple(range(len(lead))) + tuple(
        len(lead) + i for i in (0, 2, 1, 3)
    )
    return grid.transpose(axes).reshape(lead + (r * c, patch_size * patch_size))


def embed_edge_maps(maps, embed):
    """Edge tokens for precomputed maps; appends the learnable CLS slot."""
    patches = constant(patchify_maps(maps, embed.patch_size))
    tokens = matmul(patches, embed.weight) + embed.bias
    lead = tokens.shape[:-2]
    c = tokens.shape[-1]
    cls_row = constant(np.zeros(lead + (1, c))) + reshape(embed.cls_slot, (1, c))
    return concat([tokens, cls_row], axis=-2)


def edge_prompt(frame, embed, frame_index=-1):
    """Edge tokens of one frame: adaptive-threshold edges, zero-embedded."""
    edge_map = compute_edge_map(frame, frame_index)
    return embed_edge_maps(edge_map.pixels, embed)


def write_pgm(edge_map, path):
    """Dump an edge map as a binary portable graymap for inspection."""
    pixels = edge_map.pixels * np.uint8(255)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
