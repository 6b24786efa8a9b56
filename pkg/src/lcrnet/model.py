"""Full network assembly and accounting.

A video is processed frame by frame: each frame is patch-embedded with a
CLS token and positional information, passed through a stack of
cross-attention gate blocks that also see the previous hidden state and the
frame's edge tokens, and the final block's activation drives the recurrent
cell.  Classification reads the CLS rows after the last frame.  The
streaming interface consumes one frame at a time and retains nothing between
frames beyond the recurrent state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .block import CrossRwkvBlock, block_forward
from .cell import ClassifierHead, RecurrentState, cell_step, classify
from .edge import EdgeEmbed, compute_edge_map, embed_edge_maps
from .shift import GridGeometry
from .tensor import (
    ConfigError,
    Tensor,
    concat,
    constant,
    cos,
    matmul,
    mul,
    no_grad,
    parameter,
    reshape,
    sin,
)
from .wkv import WKV_MODES

POS_MODES = ("additive", "rotary")
EDGE_INJECT_MODES = ("every", "first")


@dataclass
class ModelConfig:
    frame_size: tuple = (112, 112)
    patch_size: int = 8
    depth: int = 1
    hidden: int = 192
    heads: int = 4
    num_classes: int = 27
    frames: int = 32
    tube_mask_ratio: float = 0.5
    wkv_mode: str = "bidirectional"
    cell_clamp: float = 0.0  # 0 disables; positive values bound the cell state
    pos_mode: str = "additive"
    edge_inject: str = "every"
    conv_kernel: int = 3
    hidden_ratio: int = 4

    def __post_init__(self):
        if isinstance(self.frame_size, int):
            self.frame_size = (self.frame_size, self.frame_size)
        else:
            self.frame_size = tuple(self.frame_size)
        self.validate()

    def validate(self):
        h, w = self.frame_size
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"frame {h}x{w} not divisible by patch size {p}")
        if self.hidden % (4 * self.heads):
            raise ConfigError(
                f"hidden width {self.hidden} must divide into 4 channel quarters "
                f"x {self.heads} heads"
            )
        if not 0.0 <= self.tube_mask_ratio < 1.0:
            raise ConfigError(f"tube mask ratio {self.tube_mask_ratio} outside [0, 1)")
        if self.wkv_mode not in WKV_MODES:
            raise ConfigError(f"wkv mode {self.wkv_mode!r} not in {WKV_MODES}")
        if self.pos_mode not in POS_MODES:
            raise ConfigError(f"pos mode {self.pos_mode!r} not in {POS_MODES}")
        if self.edge_inject not in EDGE_INJECT_MODES:
            raise ConfigError(f"edge inject {self.edge_inject!r} not in {EDGE_INJECT_MODES}")
        if self.depth < 1 or self.frames < 1 or self.num_classes < 1:
            raise ConfigError("depth, frames, and num_classes must be positive")

    @property
    def grid_rows(self):
        return self.frame_size[0] // self.patch_size

    @property
    def grid_cols(self):
        return self.frame_size[1] // self.patch_size

    @property
    def num_patches(self):
        return self.grid_rows * self.grid_cols

    @property
    def num_tokens(self):
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def geometry(self):
        return GridGeometry(self.grid_rows, self.grid_cols, has_cls=True)


def _preset(frame, patch, depth, hidden, heads, num_classes, frames=32):
    return ModelConfig(
        frame_size=frame,
        patch_size=patch,
        depth=depth,
        hidden=hidden,
        heads=heads,
        num_classes=num_classes,
        frames=frames,
    )


PRESETS = {
    "LCR-S/112": _preset(112, 8, 1, 192, 4, 27),
    "LCR/112": _preset(112, 8, 2, 384, 4, 27),
    "LCR-L/112": _preset(112, 8, 4, 384, 4, 27),
    "LCR/224": _preset(224, 16, 4, 768, 12, 400),
    "LCR-L/224": _preset(224, 16, 8, 768, 12, 400),
    "LCR-XL/224": _preset(224, 16, 12, 768, 12, 400),
    "tiny": _preset(32, 8, 1, 64, 4, 4, frames=8),
}

# Reported sizes for the published variants, in millions of parameters.
REPORTED_PARAMS_M = {
    "LCR-S/112": 0.82,
    "LCR/112": 5.14,
    "LCR-L/112": 9.97,
    "LCR/224": 37.62,
    "LCR-L/224": 74.62,
    "LCR-XL/224": 111.63,
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return replace(cfg, **overrides) if overrides else replace(cfg)


# -- patchification ----------------------------------------------------------


def patchify_frames(frames, patch_size):
    """(..., 3, H, W) -> (..., L, 3*P*P); channel-major within each patch."""
    frames = np.asarray(frames, dtype=np.float64)
    h, w = frames.shape[-2:]
    p = patch_size
    r, c = h // p, w // p
    lead = frames.shape[:-3]
    nl = len(lead)
    grid = frames.reshape(lead + (3, r, p, c, p))
    # (..., 3, r, p, c, p) -> (..., r, c, 3, p, p)
    grid = grid.transpose(tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4))
    return grid.reshape(lead + (r * c, 3 * p * p))


# -- tube masking ------------------------------------------------------------


def draw_tube_mask(num_patches, ratio, rng):
    """Spatial positions masked in every frame of a clip; never the CLS slot."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"tube mask ratio {ratio} outside [0, 1)")
    count = int(math.floor(ratio * num_patches))
    idx = rng.choice(num_patches, size=count, replace=False)
    return np.sort(idx)


def apply_tube_mask(tokens, mask_indices, mask_token, num_patches):
    """Replace masked patch rows with the shared learnable mask embedding.

    ``mask_indices`` is either a single index vector or one per batch element.
    """
    n = tokens.shape[-2]
    selector = np.zeros(tokens.shape[:-1] + (1,))
    flags = np.zeros((n,))
    if np.ndim(mask_indices) == 1 or len(tokens.shape) == 2:
        flags = np.zeros(n)
        flags[np.asarray(mask_indices, dtype=int)] = 1.0
        selector = flags.reshape((n, 1)) if len(tokens.shape) == 2 else flags.reshape((1, n, 1))
        selector = np.broadcast_to(selector, tokens.shape[:-1] + (1,)).copy()
    else:
        for b, idx in enumerate(mask_indices):
            selector[b, np.asarray(idx, dtype=int), 0] = 1.0
    sel = constant(selector)
    c = tokens.shape[-1]
    keep = mul(tokens, constant(1.0 - selector))
    fill = mul(sel, reshape(mask_token, (1, c)))
    return keep + fill


# -- rotary option -----------------------------------------------------------


@dataclass
class Rotary:
    """Learnable per-pair frequencies rotating tokens by their grid index."""

    freqs: Tensor  # (C/2,)
    num_tokens: int

    @classmethod
    def create(cls, channels, num_tokens):
        if channels % 2:
            raise ConfigError("rotary position encoding needs an even channel count")
        i = np.arange(channels // 2, dtype=np.float64)
        return cls(
            freqs=parameter(1.0 / (10000.0 ** (2.0 * i / channels))),
            num_tokens=num_tokens,
        )

    def __call__(self, tokens):
        n = tokens.shape[-2]
        c = tokens.shape[-1]
        half = c // 2
        positions = constant(np.arange(n, dtype=np.float64).reshape(n, 1))
        angles = matmul(positions, reshape(self.freqs, (1, half)))  # (n, half)
        ca, sa = cos(angles), sin(angles)
        lead = tokens.shape[:-1]
        pairs = reshape(tokens, lead + (half, 2))
        x1 = pairs[(Ellipsis, 0)]
        x2 = pairs[(Ellipsis, 1)]
        y1 = mul(x1, ca) + mul(mul(x2, sa), -1.0)
        y2 = mul(x1, sa) + mul(x2, ca)
        stacked = concat(
            [reshape(y1, lead + (half, 1)), reshape(y2, lead + (half, 1))], axis=-1
        )
        return reshape(stacked, tokens.shape)


# -- the classifier ----------------------------------------------------------


@dataclass
class StreamState:
    """Everything retained between frames in streaming inference."""

    rec: RecurrentState
    frames_seen: int = 0


class VideoClassifier:
    def __init__(self, config, seed=0):
        self.config = config
        self.geom = config.geometry
        rng = np.random.default_rng(seed)
        c = config.hidden
        p = config.patch_size
        n = config.num_tokens

        in_width = 3 * p * p
        bound = 1.0 / np.sqrt(in_width)
        self.patch_weight = parameter(rng.uniform(-bound, bound, size=(in_width, c)))
        self.patch_bias = parameter(np.zeros(c))
        self.cls_token = parameter(rng.normal(0.0, 0.02, size=c))
        self.pos = (
            parameter(rng.normal(0.0, 0.02, size=(n, c)))
            if config.pos_mode == "additive"
            else None
        )
        self.rotary = Rotary.create(c, n) if config.pos_mode == "rotary" else None
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=c))
        self.blocks = [
            CrossRwkvBlock.create(
                c,
                config.heads,
                rng,
                kernel_size=config.conv_kernel,
                hidden_ratio=config.hidden_ratio,
            )
            for _ in range(config.depth)
        ]
        self.edge_embed = EdgeEmbed.create(p, c)
        self.head = ClassifierHead.create(c, config.num_classes, rng)

    # -- parameters ---------------------------------------------------------

    def params(self):
        named = {
            "patch.weight": self.patch_weight,
            "patch.bias": self.patch_bias,
            "cls": self.cls_token,
            "mask_token": self.mask_token,
        }
        if self.pos is not None:
            named["pos"] = self.pos
        if self.rotary is not None:
            named["rotary.freqs"] = self.rotary.freqs
        for i, blk in enumerate(self.blocks):
            named.update({f"block{i}.{k}": v for k, v in blk.params().items()})
        named.update({f"edge.{k}": v for k, v in self.edge_embed.params().items()})
        named.update({f"head.{k}": v for k, v in self.head.params().items()})
        return named

    def param_count(self):
        return sum(p.size for p in self.params().values())

    def param_breakdown(self):
        groups = {}
        for name, p in self.params().items():
            top = name.split(".")[0]
            if top.startswith("block"):
                top = "blocks"
            elif top in ("patch", "cls", "pos", "mask_token", "rotary"):
                top = "embedding"
            groups[top] = groups.get(top, 0) + p.size
        return groups

    # -- per-frame pieces ----------------------------------------------------

    def embed_frames(self, frames):
        """Patch tokens with CLS appended and positional information applied."""
        patches = constant(patchify_frames(frames, self.config.patch_size))
        tok = matmul(patches, self.patch_weight) + self.patch_bias
        lead = tok.shape[:-2]
        c = self.config.hidden
        cls_row = constant(np.zeros(lead + (1, c))) + reshape(self.cls_token, (1, c))
        tok = concat([tok, cls_row], axis=-2)
        if self.pos is not None:
            tok = tok + self.pos
        return tok

    def edge_tokens(self, edge_maps):
        return embed_edge_maps(edge_maps, self.edge_embed)

    def _frame_update(self, frame_tokens, edge_tok, state):
        """Run the block stack and advance the recurrent state."""
        cfg = self.config
        x = frame_tokens
        zero_edge = None
        for i, blk in enumerate(self.blocks):
            if cfg.edge_inject == "every" or i == 0:
                e = edge_tok
            else:
                if zero_edge is None:
                    zero_edge = constant(np.zeros(edge_tok.shape))
                e = zero_edge
            x = block_forward(
                x, state.hidden, e, self.geom, blk, mode=cfg.wkv_mode, rotary=self.rotary
            )
        clamp = cfg.cell_clamp if cfg.cell_clamp > 0 else None
        return cell_step(x, edge_tok, state, clamp=clamp)

    def _edge_maps_for(self, frame):
        if frame.ndim == 3:  # (3, H, W)
            return compute_edge_map(frame).pixels
        return np.stack([compute_edge_map(f).pixels for f in frame])

    # -- whole-video forward ---------------------------------------------------

    def forward_video(
        self,
        video,
        training=False,
        mask_rng=None,
        edge_maps=None,
        tail_average=False,
    ):
        """Logits for one video (3, T, H, W) or a batch (B, 3, T, H, W).

        ``edge_maps`` optionally supplies precomputed per-frame edge maps of
        shape (..., T, H, W); otherwise they are extracted on the fly.
        Masking applies only when ``training`` is set and the configured
        ratio is positive.
        """
        video = np.asarray(video, dtype=np.float64)
        if video.ndim not in (4, 5):
            raise ConfigError(f"expected (3,T,H,W) or (B,3,T,H,W), got {video.shape}")
        batched = video.ndim == 5
        t_total = video.shape[-3]
        lead = (video.shape[0],) if batched else ()
        cfg = self.config

        mask_indices = None
        if training and cfg.tube_mask_ratio > 0:
            if mask_rng is None:
                mask_rng = np.random.default_rng(0)
            if batched:
                mask_indices = [
                    draw_tube_mask(cfg.num_patches, cfg.tube_mask_ratio, mask_rng)
                    for _ in range(lead[0])
                ]
            else:
                mask_indices = draw_tube_mask(cfg.num_patches, cfg.tube_mask_ratio, mask_rng)

        state = RecurrentState.initial(lead + (cfg.num_tokens, cfg.hidden))
        tail_from = t_total - math.ceil(t_total / 3)
        tail_logits = []
        for t in range(t_total):
            frame = video[(Ellipsis, t, slice(None), slice(None))]
            maps = (
                edge_maps[(Ellipsis, t, slice(None), slice(None))]
                if edge_maps is not None
                else self._edge_maps_for(frame)
            )
            tokens = self.embed_frames(frame)
            if mask_indices is not None:
                tokens = apply_tube_mask(
                    tokens, mask_indices, self.mask_token, cfg.num_patches
                )
            edge_tok = self.edge_tokens(maps)
            out, state = self._frame_update(tokens, edge_tok, state)
            if tail_average and t >= tail_from:
                tail_logits.append(classify(out, state.cell, self.head, self.geom))

        if tail_average:
            acc = tail_logits[0]
            for extra in tail_logits[1:]:
                acc = acc + extra
            return mul(acc, 1.0 / len(tail_logits))
        return classify(state.hidden, state.cell, self.head, self.geom)

    # -- frame streaming ---------------------------------------------------------

    def begin_stream(self):
        cfg = self.config
        return StreamState(
            rec=RecurrentState.initial((cfg.num_tokens, cfg.hidden)), frames_seen=0
        )

    def step_frame(self, stream, frame, edge_map=None):
        """Consume one (3, H, W) frame; retains only the recurrent state."""
        frame = np.asarray(frame, dtype=np.float64)
        with no_grad():
            maps = edge_map if edge_map is not None else self._edge_maps_for(frame)
            tokens = self.embed_frames(frame)
            edge_tok = self.edge_tokens(maps)
            _, rec = self._frame_update(tokens, edge_tok, stream.rec)
        return StreamState(rec=rec, frames_seen=stream.frames_seen + 1)

    def finish(self, stream):
        if stream.frames_seen == 0:
            raise ConfigError("finish() before any frame was streamed")
        with no_grad():
            return classify(stream.rec.hidden, stream.rec.cell, self.head, self.geom)


# -- multiply-accumulate accounting -------------------------------------------


def flops_estimate(config):
    """Multiply-accumulates of one forward pass at the configured frame count.

    Counts matmul and convolution MACs only; elementwise gates, shifts, and
    normalizations are excluded.
    """
    cfg = config
    L = cfg.num_patches
    n = cfg.num_tokens
    c = cfg.hidden
    dh = cfg.head_dim
    k = cfg.conv_kernel
    rho = cfg.hidden_ratio
    scan_passes = 3 if cfg.wkv_mode == "causal" else 5

    patch = L * (3 * cfg.patch_size**2) * c
    edge = L * cfg.patch_size**2 * c
    conv = n * 2 * c * k + n * 2 * c * c
    projections = 5 * n * c * c
    kernel = n * cfg.heads * dh * dh * scan_passes + n * cfg.heads * dh * dh
    channel = n * c * c * (1 + 2 * rho)
    per_frame = patch + edge + cfg.depth * (conv + projections + kernel + channel)
    classifier = 2 * c * cfg.num_classes
    return cfg.frames * per_frame + classifier


def build(config_or_name, seed=0, **overrides):
    cfg = preset(config_or_name, **overrides) if isinstance(config_or_name, str) else config_or_name
    return VideoClassifier(cfg, seed=seed)
