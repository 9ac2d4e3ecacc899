"""Stereo-specific building blocks.

Granular convolution (channel groups chained through a hierarchical
residual), the dual cost volume (feature concatenation stacked with
per-channel absolute differences), soft-argmin disparity regression,
shared concatenation of edge features, and the parameter/latency
bookkeeping that motivates the granular form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import ConvSpec, ShapeError
from .tensor import Tensor


# -- granular convolution -----------------------------------------------------


@dataclass
class GranularConvParams:
    """Weights of one granular convolution.

    ``group_kernels`` holds G-1 kernels (the first channel group passes
    through untouched); ``pointwise`` mixes the concatenated groups back
    to the output width. Kernels are [C/G, C/G, s(,s),s]; pointwise is
    [Cout, C, 1(,1),1].
    """

    groups: int
    group_kernels: List[Tensor]
    pointwise: Tensor
    dilation: int = 1
    pointwise_bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.groups < 2:
            raise ShapeError(f"granular convolution needs >= 2 groups, got {self.groups}")
        if len(self.group_kernels) != self.groups - 1:
            raise ShapeError(
                f"expected {self.groups - 1} group kernels, got {len(self.group_kernels)}")

    @property
    def spatial_rank(self) -> int:
        return self.group_kernels[0].ndim - 2

    def element_count(self) -> int:
        n = sum(k.size for k in self.group_kernels) + self.pointwise.size
        if self.pointwise_bias is not None:
            n += self.pointwise_bias.size
        return n

    def tensors(self) -> List[Tensor]:
        out = list(self.group_kernels) + [self.pointwise]
        if self.pointwise_bias is not None:
            out.append(self.pointwise_bias)
        return out


def granular_conv(x: Tensor, params: GranularConvParams) -> Tensor:
    """Hierarchical grouped convolution over 2 or 3 spatial axes.

    The input channels split into G groups; group 1 passes through, each
    later group is convolved together with the previous group's output
    (same-padded, dilated), and a pointwise convolution fuses the
    concatenation.
    """
    nd = x.ndim - 2
    if nd not in (2, 3):
        raise ShapeError(f"granular_conv supports 2 or 3 spatial axes, got {nd}")
    c = x.shape[1]
    g = params.groups
    if c % g != 0:
        raise ShapeError(f"channel count {c} not divisible by {g} groups")
    cg = c // g
    conv = ops.conv2d if nd == 2 else ops.conv3d
    for i, w in enumerate(params.group_kernels):
        if w.ndim != nd + 2 or w.shape[0] != cg or w.shape[1] != cg:
            raise ShapeError(
                f"group kernel {i} has shape {w.shape}, expected "
                f"[{cg}, {cg}, ...] with {nd} spatial axes")
    s = params.group_kernels[0].shape[2]
    if s % 2 != 1:
        raise ShapeError(f"same padding needs odd kernel size, got {s}")
    pad = params.dilation * (s - 1) // 2
    spec = ConvSpec(stride=1, dilation=params.dilation, padding=pad)

    groups = [x[:, i * cg:(i + 1) * cg] for i in range(g)]
    outs = [groups[0]]
    for i in range(1, g):
        outs.append(conv(groups[i] + outs[-1], params.group_kernels[i - 1], spec=spec))
    merged = ops.concat(outs, axis=1)
    return conv(merged, params.pointwise, bias=params.pointwise_bias)


def granular_param_count(c_in: int, c_out: int, s: int, groups: int,
                         spatial_rank: int = 2) -> int:
    """Weight element count of the channel-preserving granular form."""
    if groups < 2:
        raise ShapeError(f"granular form is undefined for G={groups}")
    if c_in != c_out:
        raise ShapeError("channel-preserving form requires c_in == c_out")
    if c_in % groups != 0:
        raise ShapeError(f"channels {c_in} not divisible by {groups}")
    cg = c_in // groups
    return cg * cg * s ** spatial_rank * (groups - 1) + c_out * c_out


def standard_param_count(c_in: int, c_out: int, s: int, spatial_rank: int = 2) -> int:
    return c_in * c_out * s ** spatial_rank


def make_granular_params(c_in: int, c_out: int, s: int, groups: int,
                         spatial_rank: int, dilation: int, rng: np.random.Generator,
                         requires_grad: bool = True,
                         pointwise_bias: bool = False) -> GranularConvParams:
    """Kaiming-initialized granular kernels."""
    if c_in % groups != 0:
        raise ShapeError(f"channels {c_in} not divisible by {groups}")
    cg = c_in // groups
    kshape = (cg, cg) + (s,) * spatial_rank
    fan = cg * s ** spatial_rank

    def init(shape, fan_in):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return Tensor(w.astype(np.float32).astype(np.float64), requires_grad=requires_grad)

    kernels = [init(kshape, fan) for _ in range(groups - 1)]
    pw = init((c_out, c_in) + (1,) * spatial_rank, c_in)
    bias = None
    if pointwise_bias:
        bias = Tensor(np.zeros(c_out), requires_grad=requires_grad)
    return GranularConvParams(groups, kernels, pw, dilation, bias)


# -- cost volumes -------------------------------------------------------------


@dataclass
class CostVolume:
    """5-axis matching volume [B, C_v, D_levels, H', W']."""

    values: Tensor
    max_disparity: int
    downsample: int

    def __post_init__(self):
        if self.values.ndim != 5:
            raise ShapeError(f"cost volume must be rank 5, got {self.values.ndim}")
        levels = self.values.shape[2]
        if levels * self.downsample != self.max_disparity:
            raise ShapeError(
                f"{levels} levels * downsample {self.downsample} != "
                f"max disparity {self.max_disparity}")


def _shift_right_feature(f_right: Tensor, d: int) -> Tensor:
    """Right features aligned to left coordinates at disparity d (zero fill)."""
    if d == 0:
        return f_right
    w = f_right.shape[-1]
    if d >= w:
        return Tensor(np.zeros(f_right.shape))
    sliced = f_right[..., : w - d]
    pad = [(0, 0)] * (f_right.ndim - 1) + [(d, 0)]
    return ops.pad_zero(sliced, pad)


def _check_pair(f_left: Tensor, f_right: Tensor, d_levels: int) -> None:
    if f_left.shape != f_right.shape:
        raise ShapeError(f"feature shapes differ: {f_left.shape} vs {f_right.shape}")
    if f_left.ndim != 4:
        raise ShapeError(f"features must be [B,C,H,W], got rank {f_left.ndim}")
    if d_levels < 1:
        raise ShapeError(f"d_levels must be >= 1, got {d_levels}")


def concat_volume(f_left: Tensor, f_right: Tensor, d_levels: int) -> Tensor:
    """[B,2C,D,H,W]: left features stacked with shifted right features."""
    _check_pair(f_left, f_right, d_levels)
    b, c, h, w = f_left.shape
    slices = []
    for d in range(d_levels):
        level = ops.concat([f_left, _shift_right_feature(f_right, d)], axis=1)
        slices.append(level.reshape(b, 2 * c, 1, h, w))
    return ops.concat(slices, axis=2)


def distance_volume(f_left: Tensor, f_right: Tensor, d_levels: int) -> Tensor:
    """[B,C,D,H,W]: per-channel |left - shifted right| at each level."""
    _check_pair(f_left, f_right, d_levels)
    b, c, h, w = f_left.shape
    slices = []
    for d in range(d_levels):
        diff = (f_left - _shift_right_feature(f_right, d)).abs()
        slices.append(diff.reshape(b, c, 1, h, w))
    return ops.concat(slices, axis=2)


def build_cost_volume(f_left: Tensor, f_right: Tensor, d_levels: int,
                      max_disparity: Optional[int] = None,
                      downsample: int = 1) -> CostVolume:
    """Stack the concatenation and distance volumes: C_v = 3C."""
    values = ops.concat(
        [concat_volume(f_left, f_right, d_levels),
         distance_volume(f_left, f_right, d_levels)], axis=1)
    if max_disparity is None:
        max_disparity = d_levels * downsample
    return CostVolume(values, max_disparity, downsample)


# -- disparity regression -----------------------------------------------------


def soft_argmin(cost: Tensor) -> Tensor:
    """Expected disparity under softmax(-cost) along the disparity axis.

    ``cost`` is [B,1,D,H,W] at full resolution; the result is [B,H,W] in
    [0, D-1] and differentiable.
    """
    if cost.ndim != 5:
        raise ShapeError(f"cost must be rank 5, got {cost.ndim}")
    if cost.shape[1] != 1:
        raise ShapeError(f"cost must be single-channel, got {cost.shape[1]}")
    b, _, d, h, w = cost.shape
    prob = ops.softmax(-cost.reshape(b, d, h, w), axis=1)
    levels = Tensor(np.arange(d, dtype=np.float64).reshape(1, d, 1, 1))
    return (prob * levels).sum(axis=1)


# -- shared concatenation -----------------------------------------------------


def shared_concat(f5: Tensor, f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
    """Interleave each top-feature channel with the full side-feature triple.

    Layout: {F5(1), F1, F2, F3, F5(2), F1, F2, F3, ...} -> 4K channels.
    """
    k = f5.shape[1]
    if k < 1:
        raise ShapeError("top feature map needs at least one channel")
    for name, f in (("f1", f1), ("f2", f2), ("f3", f3)):
        if f.shape[1] != 1:
            raise ShapeError(f"{name} must be single-channel, got {f.shape[1]}")
        if f.shape[2:] != f5.shape[2:]:
            raise ShapeError(
                f"{name} spatial extent {f.shape[2:]} != top feature {f5.shape[2:]}")
    pieces = []
    for i in range(k):
        pieces.extend([f5[:, i:i + 1], f1, f2, f3])
    return ops.concat(pieces, axis=1)


# -- structure bookkeeping ----------------------------------------------------


@dataclass
class StructureGraph:
    """Convolution stages with sequential dependencies (must be acyclic)."""

    nodes: List[str] = field(default_factory=list)
    edges: List[Tuple[str, str]] = field(default_factory=list)

    def add_node(self, name: str) -> None:
        if name not in self.nodes:
            self.nodes.append(name)

    def add_edge(self, src: str, dst: str) -> None:
        self.add_node(src)
        self.add_node(dst)
        self.edges.append((src, dst))

    @staticmethod
    def cascade(depth: int) -> "StructureGraph":
        g = StructureGraph()
        for i in range(depth):
            g.add_node(f"stage{i}")
            if i:
                g.add_edge(f"stage{i - 1}", f"stage{i}")
        return g

    @staticmethod
    def parallel(arms: int, depth: int) -> "StructureGraph":
        g = StructureGraph()
        g.add_node("in")
        g.add_node("out")
        for a in range(arms):
            prev = "in"
            for i in range(depth):
                node = f"arm{a}_{i}"
                g.add_edge(prev, node)
                prev = node
            g.add_edge(prev, "out")
        return g


class CycleError(ValueError):
    pass


def sequential_depth(graph: StructureGraph, junction_nodes: Sequence[str] = ("in", "out")) -> int:
    """Longest chain of dependent convolution stages.

    Pure junction nodes (fan-in/fan-out points that do no convolution
    work) are free; a cascade of G stages costs G-1 extra sequential
    steps, while K parallel arms cost only their own depth.
    """
    order: List[str] = []
    marks = {}

    def visit(n):
        state = marks.get(n)
        if state == 1:
            raise CycleError(f"dependency cycle through node {n!r}")
        if state == 2:
            return
        marks[n] = 1
        for s, d in graph.edges:
            if s == n:
                visit(d)
        marks[n] = 2
        order.append(n)

    for n in graph.nodes:
        visit(n)
    order.reverse()

    free = set(junction_nodes)
    longest = {n: 0 for n in graph.nodes}
    for n in order:
        for s, d in graph.edges:
            if s == n:
                cost = 0 if d in free else 1
                longest[d] = max(longest[d], longest[n] + cost)
    return max(longest.values()) if longest else 0
