"""Toy single-class anchor-free segmentation network.

Encoder: stem conv, then ``depth`` stride-2 stages (width doubles each
stage), each followed by a stage block (two 3x3 conv+ReLU, or a C2f block).
Attention insertion points: CBAM sits after the last backbone stage
(point A); coordinate attention, MHSA and dual attention sit at the head
entry (point B).  Decoder: ``depth`` nearest-2x upsample + 3x3 conv+ReLU
steps (width halves), then a 1x1 conv to a single logit map.  ``forward``
returns the sigmoid probability map; instances are recovered by
thresholding and 4-connected components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .attention import (AttentionConfig, ConfigError, apply_attention,
                        init_attention_params)
from .metrics import Detection
from .tensor import Tensor

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_width: int = 16
    depth: int = 3
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    use_c2f: bool = False
    c2f_bottlenecks: int = 2
    instance_threshold: float = 0.5
    mhsa_repeats: int = 1  # how many self-attention blocks at the head entry

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ConfigError("depth, base_width and in_channels must be >= 1")
        if not 0.0 < self.instance_threshold < 1.0:
            raise ConfigError("instance_threshold must be in (0,1)")
        if self.mhsa_repeats < 1:
            raise ConfigError("mhsa_repeats must be >= 1")
        bottleneck = self.base_width * 2 ** self.depth
        if self.attention.kind in ("mhsa", "dual") and \
                bottleneck % self.attention.mhsa_heads != 0:
            raise ConfigError(
                f"bottleneck width {bottleneck} not divisible by "
                f"{self.attention.mhsa_heads} heads")

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 2 ** self.depth

    def to_dict(self) -> dict:
        a = self.attention
        return {
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "use_c2f": self.use_c2f,
            "c2f_bottlenecks": self.c2f_bottlenecks,
            "instance_threshold": self.instance_threshold,
            "mhsa_repeats": self.mhsa_repeats,
            "attention": {
                "kind": a.kind,
                "channels": a.channels,
                "coord_reduction": a.coord_reduction,
                "cbam_reduction": a.cbam_reduction,
                "mhsa_heads": a.mhsa_heads,
                "mhsa_extent": a.mhsa_extent,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        a = dict(d["attention"])
        return cls(
            in_channels=d["in_channels"],
            base_width=d["base_width"],
            depth=d["depth"],
            attention=AttentionConfig(**a),
            use_c2f=d["use_c2f"],
            c2f_bottlenecks=d["c2f_bottlenecks"],
            instance_threshold=d["instance_threshold"],
            mhsa_repeats=d.get("mhsa_repeats", 1),
        )


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    seed: int
    feat_hw: tuple[int, int]  # feature-map extent at the attention points

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _kernel(rng: np.random.Generator, shape) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return T.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _bias(c: int) -> Tensor:
    return T.zeros((1, c, 1, 1), requires_grad=True)


def _add_conv(params: dict[str, Tensor], rng, name: str, c_in: int, c_out: int,
              k: int) -> None:
    params[f"{name}.w"] = _kernel(rng, (c_out, c_in, k, k))
    params[f"{name}.b"] = _bias(c_out)


def _add_c2f(params: dict[str, Tensor], rng, name: str, c: int, n: int) -> None:
    if c % 2 != 0:
        raise ConfigError(f"c2f block needs an even channel count, got {c}")
    half = c // 2
    _add_conv(params, rng, f"{name}.proj_in", c, c, 1)
    for j in range(n):
        _add_conv(params, rng, f"{name}.bn{j}.c1", half, half, 3)
        _add_conv(params, rng, f"{name}.bn{j}.c2", half, half, 3)
    _add_conv(params, rng, f"{name}.proj_out", (2 + n) * half, c, 1)


def build_model(cfg: ModelConfig, seed: int, input_size: int = 64) -> Model:
    """Construct all named parameters deterministically from (cfg, seed).

    ``input_size`` fixes the feature-map extent at the attention points
    (input_size / 2**depth), which the MHSA position tables need.

    With attention 'none' and use_c2f False the parameter count has the
    closed form (bw = base_width, d = depth, ci = in_channels):

        stem:    9*ci*bw + bw
        stage i: 9*w*2w + 2w  +  2*(9*(2w)^2 + 2w)   with w = bw*2^i
        up i:    9*2w*w + w                          with w = bw*2^i, i = d-1..0
        out:     bw + 1
    """
    if input_size % (2 ** cfg.depth) != 0:
        raise ConfigError(
            f"input size {input_size} not divisible by 2^depth = {2 ** cfg.depth}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    bw, d = cfg.base_width, cfg.depth

    _add_conv(params, rng, "stem", cfg.in_channels, bw, 3)
    for i in range(d):
        w_in, w_out = bw * 2 ** i, bw * 2 ** (i + 1)
        _add_conv(params, rng, f"down{i}", w_in, w_out, 3)
        if cfg.use_c2f:
            _add_c2f(params, rng, f"stage{i}.c2f", w_out, cfg.c2f_bottlenecks)
        else:
            _add_conv(params, rng, f"stage{i}.c1", w_out, w_out, 3)
            _add_conv(params, rng, f"stage{i}.c2", w_out, w_out, 3)

    feat = input_size // 2 ** d
    kind = cfg.attention.kind
    if kind != "none":
        acfg = AttentionConfig(
            kind=kind, channels=cfg.bottleneck_width,
            coord_reduction=cfg.attention.coord_reduction,
            cbam_reduction=cfg.attention.cbam_reduction
            if cfg.attention.cbam_reduction != min(16, max(1, cfg.attention.channels // 2))
            else None,
            mhsa_heads=cfg.attention.mhsa_heads,
            mhsa_extent=cfg.attention.mhsa_extent)
        repeats = cfg.mhsa_repeats if kind == "mhsa" else 1
        for r in range(repeats):
            block = init_attention_params(acfg, rng, feat, feat)
            params.update({f"attn{r}.{k}": v for k, v in block.items()})
        cfg.attention = acfg

    for i in reversed(range(d)):
        w_in, w_out = bw * 2 ** (i + 1), bw * 2 ** i
        _add_conv(params, rng, f"up{i}", w_in, w_out, 3)
    _add_conv(params, rng, "out", bw, 1, 1)
    return Model(config=cfg, params=params, seed=seed, feat_hw=(feat, feat))


def baseline_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for attention='none', use_c2f=False."""
    bw, d, ci = cfg.base_width, cfg.depth, cfg.in_channels
    total = 9 * ci * bw + bw
    for i in range(d):
        w = bw * 2 ** i
        total += 9 * w * 2 * w + 2 * w                 # down conv
        total += 2 * (9 * (2 * w) ** 2 + 2 * w)        # stage block
    for i in range(d):
        w = bw * 2 ** i
        total += 9 * 2 * w * w + w                     # up conv
    total += bw + 1                                    # 1x1 output conv
    return total


def _conv_relu(x: Tensor, params: dict[str, Tensor], name: str,
               stride: int = 1, pad: int = 1) -> Tensor:
    y = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=pad)
    return T.pointwise(y, "relu")


def c2f_block(x: Tensor, params: dict[str, Tensor], name: str, n: int) -> Tensor:
    """Split-transform-concat block: 1x1 in-projection, channel split, ``n``
    sequential residual bottlenecks on the second half with every
    intermediate retained, concat of all branches, 1x1 out-projection."""
    c = x.shape[1]
    if c % 2 != 0:
        raise ConfigError(f"c2f block needs an even channel count, got {c}")
    y = T.conv2d(x, params[f"{name}.proj_in.w"], params[f"{name}.proj_in.b"])
    first, cur = T.split(y, 1, [c // 2, c // 2])
    branches = [first, cur]
    for j in range(n):
        h = _conv_relu(cur, params, f"{name}.bn{j}.c1")
        h = T.conv2d(h, params[f"{name}.bn{j}.c2.w"], params[f"{name}.bn{j}.c2.b"], pad=1)
        cur = T.elementwise(cur, h, "add")
        branches.append(cur)
    joined = T.concat(branches, axis=1)
    return T.conv2d(joined, params[f"{name}.proj_out.w"], params[f"{name}.proj_out.b"])


def forward(model: Model, batch: Tensor) -> Tensor:
    """Run the network; returns the (N,1,H,W) probability map in (0,1)."""
    cfg = model.config
    n, c, h, w = batch.shape
    if c != cfg.in_channels:
        raise T.ShapeError(f"forward: batch has {c} channels, model expects {cfg.in_channels}")
    if h % 2 ** cfg.depth or w % 2 ** cfg.depth:
        raise T.ShapeError(
            f"forward: spatial dims ({h},{w}) not divisible by 2^depth = {2 ** cfg.depth}")
    p = model.params
    x = _conv_relu(batch, p, "stem")
    for i in range(cfg.depth):
        x = _conv_relu(x, p, f"down{i}", stride=2)
        if cfg.use_c2f:
            x = c2f_block(x, p, f"stage{i}.c2f", cfg.c2f_bottlenecks)
        else:
            x = _conv_relu(x, p, f"stage{i}.c1")
            x = _conv_relu(x, p, f"stage{i}.c2")

    kind = cfg.attention.kind
    if kind != "none":
        repeats = cfg.mhsa_repeats if kind == "mhsa" else 1
        for r in range(repeats):
            block = {k[len(f"attn{r}."):]: v for k, v in p.items()
                     if k.startswith(f"attn{r}.")}
            x = apply_attention(x, kind, block, cfg.attention)

    for i in reversed(range(cfg.depth)):
        x = T.upsample2x(x)
        x = _conv_relu(x, p, f"up{i}")
    logits = T.conv2d(x, p["out.w"], p["out.b"])
    return T.pointwise(logits, "sigmoid")


def extract_instances(prob: np.ndarray, tau: float = 0.5,
                      image_id: str = "") -> list[Detection]:
    """Threshold a probability map and split it into 4-connected components.

    ``prob`` is (H,W) or (1,H,W).  Each component becomes a Detection whose
    confidence is the mean probability over its pixels; the returned list is
    sorted by confidence, descending.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0,1), got {tau}")
    pm = np.asarray(prob, dtype=np.float64)
    if pm.ndim == 3:
        if pm.shape[0] != 1:
            raise ValueError(f"expected a single-channel map, got shape {pm.shape}")
        pm = pm[0]
    labels, count = ndimage.label(pm >= tau, structure=FOUR_CONNECTED)
    dets: list[Detection] = []
    for lab in range(1, count + 1):
        mask = labels == lab
        ys, xs = np.nonzero(mask)
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        dets.append(Detection(mask=mask, box=box,
                              confidence=float(pm[mask].mean()), image_id=image_id))
    dets.sort(key=lambda d: -d.confidence)
    return dets
