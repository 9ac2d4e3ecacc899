"""Full stereo network: shared extractor, edge branch, pyramid fusion,
stacked hourglass aggregation with granular bottlenecks, and disparity
regression heads.

Parameters live in a flat name -> Tensor mapping partitioned by prefix:
``shared.`` (feature extractor used by both views and both tasks),
``edge.`` (depth-edge branch), ``disp.`` (disparity branch). Batch-norm
running statistics are stored alongside as non-gradient buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops, stereo
from .ops import ConvSpec, ShapeError
from .stereo import GranularConvParams
from .tensor import Tensor

PARTITIONS = ("shared", "edge", "disp")


@dataclass
class NetworkConfig:
    base_channels: int = 8
    d_max: int = 16
    downsample: int = 4
    groups: int = 4
    dilation_rates: Tuple[int, ...] = (1, 4, 8, 16)
    k_top: int = 4
    n_agm: int = 3
    use_edge_branch: bool = True
    use_dedge_spp: bool = True
    norm_enabled: bool = True
    pointwise_bias: bool = False  # bias on granular pointwise kernels

    def __post_init__(self):
        self.dilation_rates = tuple(self.dilation_rates)
        if self.d_max % self.downsample != 0:
            raise ValueError(f"d_max {self.d_max} not divisible by downsample {self.downsample}")
        if self.downsample != 4:
            raise ValueError("the extractor downsamples by exactly 4 (two stride-2 stages)")
        if self.base_channels % self.groups != 0:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}")
        if (2 * self.base_channels) % self.groups != 0:
            raise ValueError("bottleneck channels (2x base) must divide into the groups")
        if self.use_dedge_spp and not self.use_edge_branch:
            raise ValueError("edge-aware pyramid fusion needs the edge branch enabled")
        if self.k_top < 1:
            raise ValueError(f"k_top must be >= 1, got {self.k_top}")

    @property
    def d_levels(self) -> int:
        return self.d_max // self.downsample

    @property
    def fusion_channels(self) -> int:
        return self.base_channels


class ModelParams:
    """Named tensors plus non-gradient buffers, partitioned by prefix."""

    def __init__(self):
        self.tensors: Dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if name.split(".", 1)[0] not in PARTITIONS:
            raise ValueError(f"parameter {name!r} outside the known partitions")
        self.tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def get(self, name: str) -> Optional[Tensor]:
        return self.tensors.get(name)

    def trainable(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def partition(self, prefix: str) -> Dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values() if t.requires_grad)


# -- initialization -----------------------------------------------------------


def _kaiming(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    # round through float32 so checkpoints reproduce the values bit-exactly
    return Tensor(w.astype(np.float32).astype(np.float64), requires_grad=True)


def _add_conv(p: ModelParams, rng, name: str, cin: int, cout: int, k: int,
              nd: int = 2, norm: bool = False) -> None:
    shape = (cout, cin) + (k,) * nd
    p.add(name + ".w", _kaiming(rng, shape, cin * k ** nd))
    if norm:
        p.add(name + ".gamma", Tensor(np.ones(cout), requires_grad=True))
        p.add(name + ".beta", Tensor(np.zeros(cout), requires_grad=True))
        p.add(name + ".rmean", Tensor(np.zeros(cout)))
        p.add(name + ".rvar", Tensor(np.ones(cout)))
    else:
        p.add(name + ".b", Tensor(np.zeros(cout), requires_grad=True))


def _add_conv_t(p: ModelParams, rng, name: str, cin: int, cout: int, k: int,
                norm: bool = False) -> None:
    # transposed 3-D conv weight layout is [Cin, Cout, k, k, k]
    p.add(name + ".w", _kaiming(rng, (cin, cout) + (k,) * 3, cin * k ** 3))
    if norm:
        p.add(name + ".gamma", Tensor(np.ones(cout), requires_grad=True))
        p.add(name + ".beta", Tensor(np.zeros(cout), requires_grad=True))
        p.add(name + ".rmean", Tensor(np.zeros(cout)))
        p.add(name + ".rvar", Tensor(np.ones(cout)))


def _add_granular(p: ModelParams, rng, name: str, channels: int, cfg: NetworkConfig,
                  nd: int = 3) -> None:
    g = cfg.groups
    cg = channels // g
    for i in range(g - 1):
        p.add(f"{name}.g{i}.w", _kaiming(rng, (cg, cg) + (3,) * nd, cg * 3 ** nd))
    p.add(name + ".pw.w", _kaiming(rng, (channels, channels) + (1,) * nd, channels))
    if cfg.pointwise_bias:
        p.add(name + ".pw.b", Tensor(np.zeros(channels), requires_grad=True))


def _add_resblock(p: ModelParams, rng, name: str, cin: int, cout: int,
                  stride: int, cfg: NetworkConfig) -> None:
    norm = cfg.norm_enabled
    _add_conv(p, rng, name + ".a", cin, cout, 3, norm=norm)
    _add_conv(p, rng, name + ".b", cout, cout, 3, norm=norm)
    if stride != 1 or cin != cout:
        _add_conv(p, rng, name + ".proj", cin, cout, 1, norm=norm)


def init_params(cfg: NetworkConfig, seed: int) -> ModelParams:
    """Deterministic Kaiming-style initialization of every parameter."""
    rng = np.random.default_rng(seed)
    p = ModelParams()
    c = cfg.base_channels
    norm = cfg.norm_enabled

    # shared extractor
    _add_conv(p, rng, "shared.conv0", 3, c, 3, norm=norm)
    _add_resblock(p, rng, "shared.l1", c, c, 2, cfg)
    _add_resblock(p, rng, "shared.l2", c, c, 2, cfg)
    _add_resblock(p, rng, "shared.l3", c, c, 1, cfg)
    _add_resblock(p, rng, "shared.l4", c, c, 1, cfg)

    # edge branch
    if cfg.use_edge_branch:
        for i in (1, 2, 3):
            _add_conv(p, rng, f"edge.a{i}", c, 1, 1)
        _add_resblock(p, rng, "edge.l5", c, c, 1, cfg)
        _add_conv(p, rng, "edge.l5_top", c, cfg.k_top, 1)
        for k in range(cfg.k_top):
            _add_conv(p, rng, f"edge.cls{k}", 4, 1, 1)

    # pyramid fusion
    spp_in = c + (4 * cfg.k_top if cfg.use_dedge_spp else 0)
    branch_c = max(1, c // 2)
    for i in range(4):
        _add_conv(p, rng, f"disp.spp.branch{i}", spp_in, branch_c, 1, norm=norm)
    fuse_in = c + spp_in + 4 * branch_c  # L2 skip + pooled input + branches
    _add_conv(p, rng, "disp.spp.fuse_a", fuse_in, 2 * cfg.fusion_channels, 3, norm=norm)
    _add_conv(p, rng, "disp.spp.fuse_b", 2 * cfg.fusion_channels, cfg.fusion_channels, 1)

    # pre-hourglass 3-D stem over the dual cost volume (3 * C_f channels)
    _add_conv(p, rng, "disp.pre.a", 3 * cfg.fusion_channels, c, 3, nd=3, norm=norm)
    _add_conv(p, rng, "disp.pre.b", c, c, 3, nd=3, norm=norm)

    # stacked aggregation modules and their regression heads
    for i in range(cfg.n_agm):
        a = f"disp.agm{i}"
        _add_conv(p, rng, a + ".enc1", c, 2 * c, 3, nd=3, norm=norm)
        _add_conv(p, rng, a + ".enc2", 2 * c, 2 * c, 3, nd=3, norm=norm)
        for j, _rate in enumerate(cfg.dilation_rates):
            _add_granular(p, rng, f"{a}.bank{j}", 2 * c, cfg)
        _add_conv(p, rng, a + ".fuse", 2 * c, 2 * c, 1, nd=3, norm=norm)
        _add_conv_t(p, rng, a + ".dec1", 2 * c, 2 * c, 3, norm=norm)
        _add_conv_t(p, rng, a + ".dec2", 2 * c, c, 3, norm=norm)
        _add_conv(p, rng, f"disp.out{i}.a", c, c, 3, nd=3, norm=norm)
        _add_conv(p, rng, f"disp.out{i}.b", c, 1, 3, nd=3)

    return p


# -- forward building blocks --------------------------------------------------


def _conv_block(p: ModelParams, name: str, x: Tensor, mode: str, nd: int = 2,
                stride: int = 1, dilation: int = 1, relu: bool = True) -> Tensor:
    w = p[name + ".w"]
    k = w.shape[-1]
    pad = dilation * (k - 1) // 2
    spec = ConvSpec(stride=stride, dilation=dilation, padding=pad)
    conv = ops.conv2d if nd == 2 else ops.conv3d
    y = conv(x, w, p.get(name + ".b"), spec=spec)
    if name + ".gamma" in p:
        bn_mode = "train" if mode == "train" else "eval"
        y = ops.batch_norm(y, p[name + ".gamma"], p[name + ".beta"], bn_mode,
                           p[name + ".rmean"].data, p[name + ".rvar"].data)
    return y.relu() if relu else y


def _conv_t_block(p: ModelParams, name: str, x: Tensor, mode: str,
                  output_size: Tuple[int, int, int], relu: bool = True) -> Tensor:
    spec = ConvSpec(stride=2, dilation=1, padding=1)
    y = ops.conv3d_transposed(x, p[name + ".w"], spec=spec, output_size=output_size)
    if name + ".gamma" in p:
        bn_mode = "train" if mode == "train" else "eval"
        y = ops.batch_norm(y, p[name + ".gamma"], p[name + ".beta"], bn_mode,
                           p[name + ".rmean"].data, p[name + ".rvar"].data)
    return y.relu() if relu else y


def _resblock(p: ModelParams, name: str, x: Tensor, mode: str,
              stride: int = 1, dilation: int = 1) -> Tensor:
    y = _conv_block(p, name + ".a", x, mode, stride=stride, dilation=dilation)
    y = _conv_block(p, name + ".b", y, mode, dilation=dilation, relu=False)
    skip = x
    if name + ".proj.w" in p:
        skip = _conv_block(p, name + ".proj", x, mode, stride=stride, relu=False)
    return (y + skip).relu()


def _granular_from(p: ModelParams, name: str, cfg: NetworkConfig,
                   dilation: int) -> GranularConvParams:
    kernels = [p[f"{name}.g{i}.w"] for i in range(cfg.groups - 1)]
    return GranularConvParams(cfg.groups, kernels, p[name + ".pw.w"], dilation,
                              p.get(name + ".pw.b"))


# -- network stages -----------------------------------------------------------


def feature_extract(image: Tensor, p: ModelParams, mode: str) -> Dict[str, Tensor]:
    """Shared trunk; returns the taps needed downstream.

    Full-resolution stem, stride-2 at L1 and L2 (total x4), dilated
    resolution-preserving L3/L4.
    """
    if image.shape[2] % 4 or image.shape[3] % 4:
        raise ShapeError(f"image extent {image.shape[2:]} not divisible by 4")
    t0 = _conv_block(p, "shared.conv0", image, mode)
    t1 = _resblock(p, "shared.l1", t0, mode, stride=2)
    t2 = _resblock(p, "shared.l2", t1, mode, stride=2)
    t3 = _resblock(p, "shared.l3", t2, mode, dilation=2)
    t4 = _resblock(p, "shared.l4", t3, mode, dilation=2)
    return {"shallow": t0, "half": t1, "F_L2": t2, "F_L4": t4}


def dedge_branch(taps: Dict[str, Tensor], p: ModelParams, cfg: NetworkConfig,
                 mode: str, with_head: bool) -> Tuple[Optional[Tensor], Tensor]:
    """Side features + top features -> (edge probability, 4K-channel map).

    ``with_head`` controls the per-group classifier; inference for
    disparity alone skips it.
    """
    hw = taps["F_L4"].shape[2:]
    sides = []
    for i, key in enumerate(("shallow", "half", "F_L2"), start=1):
        f = _conv_block(p, f"edge.a{i}", taps[key], mode, relu=False)
        if f.shape[2:] != hw:
            f = ops.upsample_bilinear(f, hw)
        sides.append(f)
    f5 = _resblock(p, "edge.l5", taps["F_L4"], mode, dilation=2)
    f5 = _conv_block(p, "edge.l5_top", f5, mode, relu=False)
    feats = stereo.shared_concat(f5, *sides)

    if not with_head:
        return None, feats
    logits = [
        _conv_block(p, f"edge.cls{k}", feats[:, 4 * k:4 * k + 4], mode, relu=False)
        for k in range(cfg.k_top)
    ]
    probs = ops.concat(logits, axis=1).sigmoid()
    prob = probs.max(axis=1, keepdims=True)
    full = (hw[0] * 4, hw[1] * 4)
    prob = ops.upsample_bilinear(prob, full)
    b = prob.shape[0]
    return prob.reshape(b, *full), feats


def dedge_spp(f_l2: Tensor, f_l4: Tensor, edge_feats: Optional[Tensor],
              p: ModelParams, cfg: NetworkConfig, mode: str) -> Tensor:
    """Pyramid pooling over L4 (optionally fused with edge features)."""
    x = f_l4 if edge_feats is None else ops.concat([f_l4, edge_feats], axis=1)
    h, w = x.shape[2:]
    branches = []
    for i, grid in enumerate((1, 2, 4, 8)):
        gh, gw = min(grid, h), min(grid, w)
        if h % gh or w % gw:
            raise ShapeError(f"extent {h}x{w} not divisible by pooling grid {grid}")
        pooled = ops.pool_avg2d(x, (h // gh, w // gw))
        reduced = _conv_block(p, f"disp.spp.branch{i}", pooled, mode)
        branches.append(ops.upsample_bilinear(reduced, (h, w)))
    fused = ops.concat([f_l2, x] + branches, axis=1)
    fused = _conv_block(p, "disp.spp.fuse_a", fused, mode)
    return _conv_block(p, "disp.spp.fuse_b", fused, mode, relu=False)


def agm_module(volume: Tensor, p: ModelParams, prefix: str, cfg: NetworkConfig,
               mode: str) -> Tuple[Tensor, Tensor]:
    """Hourglass aggregation with a parallel dilated granular bottleneck.

    Output shape equals input shape; the second return is the decoder
    mid-level feature.
    """
    e1 = _conv_block(p, prefix + ".enc1", volume, mode, nd=3, stride=2)
    e2 = _conv_block(p, prefix + ".enc2", e1, mode, nd=3, stride=2)
    bank = None
    for j, rate in enumerate(cfg.dilation_rates):
        gp = _granular_from(p, f"{prefix}.bank{j}", cfg, rate)
        y = stereo.granular_conv(e2, gp)
        bank = y if bank is None else bank + y
    mid = _conv_block(p, prefix + ".fuse", bank, mode, nd=3)
    d1 = _conv_t_block(p, prefix + ".dec1", mid, mode, output_size=e1.shape[2:],
                       relu=False)
    d1 = (d1 + e1).relu()
    d2 = _conv_t_block(p, prefix + ".dec2", d1, mode, output_size=volume.shape[2:],
                       relu=False)
    return d2 + volume, d1


def output_module(volume: Tensor, p: ModelParams, prefix: str,
                  out_hw: Tuple[int, int], d_max: int, mode: str) -> Tensor:
    """Two 3-D convolutions, trilinear upsampling, soft-argmin."""
    y = _conv_block(p, prefix + ".a", volume, mode, nd=3)
    y = _conv_block(p, prefix + ".b", y, mode, nd=3, relu=False)
    cost = ops.upsample_trilinear(y, (d_max,) + tuple(out_hw))
    return stereo.soft_argmin(cost)


def forward(left: Tensor, right: Tensor, p: ModelParams, cfg: NetworkConfig,
            mode: str) -> Dict[str, Tensor]:
    """Run the whole pipeline on a rectified pair.

    Training returns three disparity maps (one per aggregation stage)
    plus the edge probability; inference returns the last disparity only.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if left.shape != right.shape:
        raise ShapeError(f"pair shapes differ: {left.shape} vs {right.shape}")
    out_hw = left.shape[2:]

    taps_l = feature_extract(left, p, mode)
    taps_r = feature_extract(right, p, mode)

    edge_prob = None
    feats_l = feats_r = None
    need_edge = cfg.use_edge_branch and (mode == "train" or cfg.use_dedge_spp)
    if need_edge:
        with_head = mode == "train"
        edge_prob, feats_l = dedge_branch(taps_l, p, cfg, mode, with_head)
        if cfg.use_dedge_spp:
            _, feats_r = dedge_branch(taps_r, p, cfg, mode, with_head=False)
        else:
            feats_l = None

    fl = dedge_spp(taps_l["F_L2"], taps_l["F_L4"],
                   feats_l if cfg.use_dedge_spp else None, p, cfg, mode)
    fr = dedge_spp(taps_r["F_L2"], taps_r["F_L4"],
                   feats_r if cfg.use_dedge_spp else None, p, cfg, mode)

    cv = stereo.build_cost_volume(fl, fr, cfg.d_levels, cfg.d_max, cfg.downsample)
    v = _conv_block(p, "disp.pre.a", cv.values, mode, nd=3)
    v = (_conv_block(p, "disp.pre.b", v, mode, nd=3, relu=False) + v).relu()

    disparities: List[Tensor] = []
    stages = range(cfg.n_agm) if mode == "train" else [cfg.n_agm - 1]
    for i in range(cfg.n_agm):
        v, _skip = agm_module(v, p, f"disp.agm{i}", cfg, mode)
        if i in stages:
            disparities.append(
                output_module(v, p, f"disp.out{i}", out_hw, cfg.d_max, mode))

    out: Dict[str, Tensor] = {}
    if mode == "train":
        for i, d in enumerate(disparities, start=1):
            out[f"d{i}"] = d
        if edge_prob is not None:
            out["edge_prob"] = edge_prob
    else:
        out[f"d{cfg.n_agm}"] = disparities[-1]
    return out
