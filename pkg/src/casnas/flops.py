"""Analytical FLOPs model for the hybrid CNN-transformer blocks.

Every multiply-accumulate costs ``flops_per_mac`` FLOPs (2 by default, 1 for
MAC counting); element-wise additions (residuals, pooling) cost half of that.
Activations and normalization are not counted. All public counters return raw
FLOPs; :func:`subnet_flops` reports MFLOPs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from .space import BlockKind, SpaceSpec, SubnetConfig, check_config

FLOPS_PER_MAC = 2.0


class FlopsError(ValueError):
    pass


def out_size(size: int, stride: int) -> int:
    return math.ceil(size / stride)


def conv_flops(h: int, w: int, cin: int, cout: int, k: int, stride: int = 1, groups: int = 1,
               flops_per_mac: float = FLOPS_PER_MAC) -> float:
    """Cost of a ``k x k`` convolution with 'same' padding."""
    if min(h, w, cin, cout, k, stride, groups) <= 0:
        raise FlopsError("conv dimensions must be positive")
    if cin % groups or cout % groups:
        raise FlopsError(f"cin={cin} and cout={cout} must be divisible by groups={groups}")
    ho, wo = out_size(h, stride), out_size(w, stride)
    return flops_per_mac * ho * wo * cout * (k * k * cin // groups)


def se_flops(channels: int, flops_per_mac: float = FLOPS_PER_MAC) -> float:
    """Squeeze-excite: two FC layers through a ``channels // 4`` bottleneck."""
    return flops_per_mac * channels * max(1, channels // 4) * 2


def mbconv_flops(kind: BlockKind | str, h: int, w: int, cin: int, cout: int, k: int,
                 expansion: int, stride: int, flops_per_mac: float = FLOPS_PER_MAC) -> float:
    """Inverted residual: expand 1x1 (skipped at ratio 1), depthwise k x k, project 1x1.

    MBv3 adds squeeze-excite on the expanded width. The residual addition is
    counted when the block keeps both the spatial size and the channel count.
    """
    kind = BlockKind(kind)
    mid = cin * expansion
    total = 0.0
    if expansion != 1:
        total += conv_flops(h, w, cin, mid, 1, 1, 1, flops_per_mac)
    total += conv_flops(h, w, mid, mid, k, stride, mid, flops_per_mac)
    ho, wo = out_size(h, stride), out_size(w, stride)
    if kind is BlockKind.MBV3:
        total += se_flops(mid, flops_per_mac) + 0.5 * flops_per_mac * ho * wo * mid
    total += conv_flops(ho, wo, mid, cout, 1, 1, 1, flops_per_mac)
    if stride == 1 and cin == cout:
        total += 0.5 * flops_per_mac * ho * wo * cout
    return total


def attention_flops(h: int, w: int, channels: int, vscale: int, head_dim: int = 16,
                    qk_dim: int = 16, flops_per_mac: float = FLOPS_PER_MAC) -> float:
    """Multi-head self-attention with a widened value path.

    With ``T = h*w`` tokens, ``d`` channels, ``d/head_dim`` heads each of Q/K width
    ``qk_dim`` and V width ``vscale*d``: Q/K/V projections, QK^T scores,
    attention-weighted values and the output projection.
    """
    if channels % head_dim:
        raise FlopsError(f"channels={channels} not divisible by head_dim={head_dim}")
    t = h * w
    d = channels
    dqk = (d // head_dim) * qk_dim
    dv = vscale * d
    macs = t * d * (2 * dqk + dv) + t * t * dqk + t * t * dv + t * dv * d
    return flops_per_mac * macs


def mlp_flops(h: int, w: int, channels: int, expansion: int,
              flops_per_mac: float = FLOPS_PER_MAC) -> float:
    """Two pointwise layers ``d -> e*d -> d``."""
    if min(h, w, channels, expansion) <= 0:
        raise FlopsError("mlp dimensions must be positive")
    return 2 * flops_per_mac * h * w * channels * (expansion * channels)


def residual_flops(h: int, w: int, channels: int, flops_per_mac: float = FLOPS_PER_MAC) -> float:
    return 0.5 * flops_per_mac * h * w * channels


@dataclass(frozen=True)
class LayerCost:
    stage: int
    layer: int
    kind: BlockKind
    flops: float
    out_size: int


@dataclass(frozen=True)
class FlopsBreakdown:
    stages: tuple[float, ...]
    total: float
    spatial: tuple[int, ...]

    def as_dict(self) -> dict:
        return {"stages_mflops": list(self.stages), "total_mflops": self.total,
                "spatial": list(self.spatial)}


def layer_costs(space: SpaceSpec, cfg: SubnetConfig) -> list[LayerCost]:
    """Per-layer FLOPs (raw, not MFLOPs) in execution order.

    Transformer stages open with a 3x3 MBv3 transition block (stride = stage
    stride, expansion = ``space.transition_expansion``) that maps the incoming
    width to the stage width; it is reported with kind MBv3. The MBPool stage is
    a 1x1 expansion conv, global average pool, a 1x1 conv to its fixed width and
    the classifier.
    """
    fpm = space.flops_per_mac
    costs: list[LayerCost] = []
    size = cfg.resolution
    cin = space.in_channels
    for si, (st, sc) in enumerate(zip(space.stages, cfg.stages)):
        c = sc.channels
        if st.kind is BlockKind.CONV_STEM:
            f = conv_flops(size, size, cin, c, sc.kernels[0], st.stride, 1, fpm)
            size = out_size(size, st.stride)
            costs.append(LayerCost(si, 0, st.kind, f, size))
        elif st.kind in (BlockKind.MBV2, BlockKind.MBV3):
            for li in range(sc.depth):
                stride = st.stride if li == 0 else 1
                f = mbconv_flops(st.kind, size, size, cin, c, sc.kernels[li], sc.expansions[li],
                                 stride, fpm)
                size = out_size(size, stride)
                cin = c
                costs.append(LayerCost(si, li, st.kind, f, size))
        elif st.kind is BlockKind.TRANSFORMER:
            f = mbconv_flops(BlockKind.MBV3, size, size, cin, c, 3, space.transition_expansion,
                             st.stride, fpm)
            size = out_size(size, st.stride)
            costs.append(LayerCost(si, -1, BlockKind.MBV3, f, size))
            for li in range(sc.depth):
                f = (attention_flops(size, size, c, sc.kernels[li], space.head_dim, space.qk_dim, fpm)
                     + mlp_flops(size, size, c, sc.expansions[li], fpm)
                     + 2 * residual_flops(size, size, c, fpm))
                costs.append(LayerCost(si, li, st.kind, f, size))
        elif st.kind is BlockKind.MB_POOL:
            mid = cin * sc.expansions[0]
            f = (conv_flops(size, size, cin, mid, 1, 1, 1, fpm)
                 + residual_flops(size, size, mid, fpm)  # global average pool
                 + fpm * mid * c
                 + fpm * c * space.num_classes)
            costs.append(LayerCost(si, 0, st.kind, f, 1))
        c_out = sc.channels
        if st.kind is not BlockKind.MB_POOL:
            cin = c_out
    return costs


@lru_cache(maxsize=65536)
def _breakdown(space: SpaceSpec, cfg: SubnetConfig) -> FlopsBreakdown:
    check_config(space, cfg)
    per_stage = [0.0] * len(space.stages)
    spatial = [0] * len(space.stages)
    for lc in layer_costs(space, cfg):
        per_stage[lc.stage] += lc.flops / 1e6
        spatial[lc.stage] = lc.out_size
    return FlopsBreakdown(tuple(per_stage), math.fsum(per_stage), tuple(spatial))


def subnet_flops(space: SpaceSpec, cfg: SubnetConfig) -> FlopsBreakdown:
    """FLOPs breakdown of ``cfg`` in MFLOPs. Raises ``SpaceError`` for invalid configs."""
    return _breakdown(space, cfg)


def mflops(space: SpaceSpec, cfg: SubnetConfig) -> float:
    return _breakdown(space, cfg).total


def level_of(flops: float, ladder) -> int:
    """Index of the nearest ladder level whose tolerance band contains ``flops``."""
    if not ladder.levels:
        raise FlopsError("ladder is empty")
    best = None
    for i, c in enumerate(ladder.levels):
        if c * (1 - ladder.band) <= flops <= c * (1 + ladder.band):
            if best is None or abs(flops - c) < abs(flops - ladder.levels[best]):
                best = i
    if best is None:
        raise FlopsError(f"{flops:.3f} MFLOPs lies outside every ladder band")
    return best
