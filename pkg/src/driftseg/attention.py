"""Differentiable attention blocks: coordinate, CBAM, 2-D multi-head
self-attention with split height/width position encodings, and their serial
(dual) composition.  Every block maps (N,C,H,W) -> (N,C,H,W)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Structurally invalid attention configuration."""


ATTENTION_KINDS = ("none", "coord", "cbam", "mhsa", "dual")


@dataclass
class AttentionConfig:
    """Mechanism kind plus structural hyperparameters.

    ``mhsa_extent`` is the side of the square attention neighborhood; None
    means global (all-to-all).  ``cbam_reduction`` defaults to
    min(16, max(1, C//2)) when unset.
    """

    kind: str = "none"
    channels: int = 16
    coord_reduction: int = 8
    cbam_reduction: int | None = None
    mhsa_heads: int = 4
    mhsa_extent: int | None = None

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.cbam_reduction is None:
            self.cbam_reduction = min(16, max(1, self.channels // 2))
        if self.coord_reduction < 1 or self.cbam_reduction < 1:
            raise ConfigError("reduction ratios must be >= 1")
        if self.kind in ("mhsa", "dual"):
            if self.mhsa_heads < 1:
                raise ConfigError("mhsa_heads must be >= 1")
            if self.channels % self.mhsa_heads != 0:
                raise ConfigError(
                    f"channels ({self.channels}) not divisible by heads ({self.mhsa_heads})")
            if self.mhsa_extent is not None and self.mhsa_extent % 2 == 0:
                raise ConfigError("mhsa_extent must be odd (centered neighborhood)")

    @property
    def head_dim(self) -> int:
        return self.channels // self.mhsa_heads

    @property
    def coord_hidden(self) -> int:
        return max(1, self.channels // self.coord_reduction)

    @property
    def cbam_hidden(self) -> int:
        return max(1, self.channels // self.cbam_reduction)


# ---------------------------------------------------------------------------
# parameter construction


def _init_kernel(rng: np.random.Generator, shape) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return T.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zero_bias(channels: int) -> Tensor:
    return T.zeros((1, channels, 1, 1), requires_grad=True)


def init_coord_params(cfg: AttentionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, hid = cfg.channels, cfg.coord_hidden
    return {
        "reduce_w": _init_kernel(rng, (hid, c, 1, 1)),
        "reduce_b": _zero_bias(hid),
        "expand_h_w": _init_kernel(rng, (c, hid, 1, 1)),
        "expand_h_b": _zero_bias(c),
        "expand_w_w": _init_kernel(rng, (c, hid, 1, 1)),
        "expand_w_b": _zero_bias(c),
    }


def init_cbam_params(cfg: AttentionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, hid = cfg.channels, cfg.cbam_hidden
    return {
        "mlp1_w": _init_kernel(rng, (hid, c, 1, 1)),
        "mlp1_b": _zero_bias(hid),
        "mlp2_w": _init_kernel(rng, (c, hid, 1, 1)),
        "mlp2_b": _zero_bias(c),
        "spatial_w": _init_kernel(rng, (1, 2, 7, 7)),
        "spatial_b": _zero_bias(1),
    }


def init_mhsa_params(cfg: AttentionConfig, rng: np.random.Generator,
                     feat_h: int, feat_w: int) -> dict[str, Tensor]:
    c, d = cfg.channels, cfg.head_dim
    return {
        "q_w": _init_kernel(rng, (c, c, 1, 1)),
        "q_b": _zero_bias(c),
        "k_w": _init_kernel(rng, (c, c, 1, 1)),
        "k_b": _zero_bias(c),
        "v_w": _init_kernel(rng, (c, c, 1, 1)),
        "v_b": _zero_bias(c),
        "pos_h": _init_kernel(rng, (1, 1, d, feat_h)),
        "pos_w": _init_kernel(rng, (1, 1, d, feat_w)),
    }


def init_dual_params(cfg: AttentionConfig, rng: np.random.Generator,
                     feat_h: int, feat_w: int) -> dict[str, Tensor]:
    params = {f"cbam.{k}": v for k, v in init_cbam_params(cfg, rng).items()}
    params.update({f"mhsa.{k}": v
                   for k, v in init_mhsa_params(cfg, rng, feat_h, feat_w).items()})
    return params


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator,
                          feat_h: int = 0, feat_w: int = 0) -> dict[str, Tensor]:
    """Build the named parameter set for ``cfg.kind`` (mhsa/dual need the
    feature-map extent for the position tables)."""
    if cfg.kind == "none":
        return {}
    if cfg.kind == "coord":
        return init_coord_params(cfg, rng)
    if cfg.kind == "cbam":
        return init_cbam_params(cfg, rng)
    if cfg.kind == "mhsa":
        return init_mhsa_params(cfg, rng, feat_h, feat_w)
    return init_dual_params(cfg, rng, feat_h, feat_w)


def zero_params(params: dict[str, Tensor]) -> None:
    """In-place zeroing of every parameter (used by identity tests)."""
    for p in params.values():
        p.data[...] = 0.0


# ---------------------------------------------------------------------------
# blocks


def _expand_row_gate(gate: Tensor, width: int) -> Tensor:
    # (N,C,H,1) -> (N,C,H,W) via matmul with a constant ones row
    ones = T.tensor(np.ones((1, 1, 1, width)))
    return T.matmul(gate, ones)


def _expand_col_gate(gate: Tensor, height: int) -> Tensor:
    # (N,C,1,W) -> (N,C,H,W)
    ones = T.tensor(np.ones((1, 1, height, 1)))
    return T.matmul(ones, gate)


def coord_attention(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Coordinate attention: direction-wise pooled descriptors produce a
    per-row gate g_h (N,C,H,1) and per-column gate g_w (N,C,1,W); the output
    is x * g_h * g_w."""
    n, c, h, w = x.shape
    zh = T.pool_directional(x, "width")                   # (N,C,H,1)
    zw = T.pool_directional(x, "height")                  # (N,C,1,W)
    zh_t = T.transpose(zh, (0, 1, 3, 2))                  # (N,C,1,H)
    joint = T.concat([zh_t, zw], axis=3)                  # (N,C,1,H+W)
    hidden = T.pointwise(T.conv2d(joint, p["reduce_w"], p["reduce_b"]), "relu")
    part_h, part_w = T.split(hidden, 3, [h, w])
    gate_h = T.pointwise(T.conv2d(part_h, p["expand_h_w"], p["expand_h_b"]), "sigmoid")
    gate_w = T.pointwise(T.conv2d(part_w, p["expand_w_w"], p["expand_w_b"]), "sigmoid")
    gate_h = T.transpose(gate_h, (0, 1, 3, 2))            # (N,C,H,1)
    full = T.elementwise(_expand_row_gate(gate_h, w),
                         _expand_col_gate(gate_w, h), "mul")
    return T.elementwise(x, full, "mul")


def _cbam_mlp(v: Tensor, p: dict[str, Tensor], prefix: str = "") -> Tensor:
    hidden = T.pointwise(T.conv2d(v, p[prefix + "mlp1_w"], p[prefix + "mlp1_b"]), "relu")
    return T.conv2d(hidden, p[prefix + "mlp2_w"], p[prefix + "mlp2_b"])


def cbam_channel_gate(x: Tensor, p: dict[str, Tensor], prefix: str = "") -> Tensor:
    """sigma(MLP(AvgPool(x)) + MLP(MaxPool(x))) -> (N,C,1,1), shared MLP."""
    avg = _cbam_mlp(T.pool_global(x, "avg"), p, prefix)
    mx = _cbam_mlp(T.pool_global(x, "max"), p, prefix)
    return T.pointwise(T.elementwise(avg, mx, "add"), "sigmoid")


def cbam_spatial_gate(x: Tensor, p: dict[str, Tensor], prefix: str = "") -> Tensor:
    """sigma(conv7x7([avg-over-channels; max-over-channels])) -> (N,1,H,W)."""
    stacked = T.concat([T.pool_across_channels(x, "avg"),
                        T.pool_across_channels(x, "max")], axis=1)
    logits = T.conv2d(stacked, p[prefix + "spatial_w"], p[prefix + "spatial_b"], pad=3)
    return T.pointwise(logits, "sigmoid")


def cbam_block(x: Tensor, p: dict[str, Tensor], prefix: str = "") -> Tensor:
    """Channel gate first, then spatial gate on the channel-gated features."""
    gated = T.elementwise(x, cbam_channel_gate(x, p, prefix), "mul")
    return T.elementwise(gated, cbam_spatial_gate(gated, p, prefix), "mul")


def _neighborhood_mask(h: int, w: int, extent: int) -> np.ndarray:
    """(1,1,HW,HW) additive mask: 0 inside the centered extent x extent
    neighborhood, a large negative constant outside (exp underflows to 0)."""
    rows = np.arange(h)
    cols = np.arange(w)
    same_r = np.abs(rows[:, None] - rows[None, :]) <= extent // 2
    same_c = np.abs(cols[:, None] - cols[None, :]) <= extent // 2
    inside = np.einsum("ij,kl->ikjl", same_r, same_c).reshape(h * w, h * w)
    mask = np.where(inside, 0.0, -1e30)
    return mask.reshape(1, 1, h * w, h * w)


def _position_table(p: dict[str, Tensor], h: int, w: int, prefix: str = "") -> Tensor:
    """Combine R_h (d,H) and R_w (d,W) into a (1,1,d,HW) table where column
    a*W+b holds R_h[:,a] + R_w[:,b]; built with constant selector matmuls so
    it stays on the gradient tape."""
    sel_h = np.zeros((1, 1, h, h * w))
    sel_w = np.zeros((1, 1, w, h * w))
    for a in range(h):
        sel_h[0, 0, a, a * w:(a + 1) * w] = 1.0
    for b in range(w):
        sel_w[0, 0, b, b::w] = 1.0
    return T.elementwise(T.matmul(p[prefix + "pos_h"], T.tensor(sel_h)),
                         T.matmul(p[prefix + "pos_w"], T.tensor(sel_w)), "add")


def self_attention_2d(x: Tensor, p: dict[str, Tensor], cfg: AttentionConfig,
                      prefix: str = "") -> Tensor:
    """Multi-head self-attention over a 2-D feature map.

    Per head and output position ij, logits over neighborhood positions ab
    are q_ij.k_ab + q_ij.(R_h[:,a] + R_w[:,b]); the output is the
    softmax-weighted sum of values, heads concatenated on channels.
    """
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise T.ShapeError(f"self_attention_2d: input has {c} channels, config says {cfg.channels}")
    heads, d = cfg.mhsa_heads, cfg.head_dim
    hw = h * w

    q = T.conv2d(x, p[prefix + "q_w"], p[prefix + "q_b"])
    k = T.conv2d(x, p[prefix + "k_w"], p[prefix + "k_b"])
    v = T.conv2d(x, p[prefix + "v_w"], p[prefix + "v_b"])

    q_r = T.transpose(T.reshape(q, (n, heads, d, hw)), (0, 1, 3, 2))   # (N,heads,HW,d)
    k_r = T.reshape(k, (n, heads, d, hw))                              # (N,heads,d,HW)
    v_r = T.transpose(T.reshape(v, (n, heads, d, hw)), (0, 1, 3, 2))   # (N,heads,HW,d)

    logits = T.matmul(q_r, k_r)                                        # (N,heads,HW,HW)
    pos = T.matmul(q_r, _position_table(p, h, w, prefix))
    logits = T.elementwise(logits, pos, "add")
    if cfg.mhsa_extent is not None:
        if cfg.mhsa_extent % 2 == 0:
            raise ConfigError("mhsa_extent must be odd")
        mask = np.broadcast_to(_neighborhood_mask(h, w, cfg.mhsa_extent),
                               (n, heads, hw, hw)).copy()
        logits = T.elementwise(logits, T.tensor(mask), "add")

    weights = T.softmax_last(logits)
    y = T.matmul(weights, v_r)                                         # (N,heads,HW,d)
    return T.reshape(T.transpose(y, (0, 1, 3, 2)), (n, c, h, w))


def dual_attention(x: Tensor, p: dict[str, Tensor], cfg: AttentionConfig) -> Tensor:
    """CBAM first, self-attention second (fixed composition order)."""
    return self_attention_2d(cbam_block(x, p, prefix="cbam."), p, cfg, prefix="mhsa.")


def apply_attention(x: Tensor, kind: str, p: dict[str, Tensor],
                    cfg: AttentionConfig) -> Tensor:
    if kind == "none":
        return x
    if kind == "coord":
        return coord_attention(x, p)
    if kind == "cbam":
        return cbam_block(x, p)
    if kind == "mhsa":
        return self_attention_2d(x, p, cfg)
    if kind == "dual":
        return dual_attention(x, p, cfg)
    raise ConfigError(f"unknown attention kind {kind!r}")
