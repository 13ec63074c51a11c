"""Weight-entangled hybrid CNN-attention supernet.

All parameters are allocated once at the size demanded by the space maxima.
A subnet activates leading-prefix slices along channel, expansion and V-scale
axes, the centre ``k x k`` crop of each kernel, and the first ``depth`` layers
of every stage. The block plan produced by :func:`plan` is the single source of
those slices: :func:`slice_map` reads it, and :func:`forward` executes it.

Blocks keep their topology but drop batch normalization; a per-channel
scale+bias stands in for it. Attention has no talking heads and no layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..space import BlockKind, SpaceSpec, SubnetConfig, check_config
from .autodiff import Tape, Var

Span = tuple[int, int]
SliceMap = dict[str, tuple[Span, ...]]


# --------------------------------------------------------------------------- #
# Parameter layout
# --------------------------------------------------------------------------- #


def _stage_cmax(space: SpaceSpec) -> list[int]:
    return [st.channel_range[1] for st in space.stages]


def param_shapes(space: SpaceSpec) -> dict[str, tuple[int, ...]]:
    """Full shapes of every supernet parameter, derived from the space maxima."""
    shapes: dict[str, tuple[int, ...]] = {}
    cmax = _stage_cmax(space)
    prev = space.in_channels

    def mb(prefix, cin, cout, kmax, emax, se):
        mid = cin * emax
        if emax > 1:
            shapes[f"{prefix}.expand"] = (mid, cin)
            shapes[f"{prefix}.a1.s"] = shapes[f"{prefix}.a1.b"] = (mid,)
        shapes[f"{prefix}.dw"] = (mid, kmax, kmax)
        shapes[f"{prefix}.a2.s"] = shapes[f"{prefix}.a2.b"] = (mid,)
        if se:
            r = max(1, mid // 4)
            shapes[f"{prefix}.se_r"] = (r, mid)
            shapes[f"{prefix}.se_e"] = (mid, r)
        shapes[f"{prefix}.proj"] = (cout, mid)
        shapes[f"{prefix}.a3.s"] = shapes[f"{prefix}.a3.b"] = (cout,)

    for i, st in enumerate(space.stages):
        c = cmax[i]
        kmax, emax = max(st.kernels), max(st.expansions)
        if st.kind is BlockKind.CONV_STEM:
            shapes["stem.w"] = (c, prev, kmax, kmax)
            shapes["stem.a.s"] = shapes["stem.a.b"] = (c,)
        elif st.kind in (BlockKind.MBV2, BlockKind.MBV3):
            for li in range(st.max_depth):
                mb(f"s{i}.l{li}", prev if li == 0 else c, c, kmax, emax, st.kind is BlockKind.MBV3)
        elif st.kind is BlockKind.TRANSFORMER:
            mb(f"s{i}.t", prev, c, 3, space.transition_expansion, True)
            nh = c // space.head_dim
            for li in range(st.max_depth):
                p = f"s{i}.l{li}"
                shapes[f"{p}.n1.s"] = shapes[f"{p}.n1.b"] = (c,)
                shapes[f"{p}.q"] = shapes[f"{p}.k"] = (nh * space.qk_dim, c)
                shapes[f"{p}.v"] = (kmax * c, c)
                shapes[f"{p}.o"] = (c, kmax * c)
                shapes[f"{p}.n2.s"] = shapes[f"{p}.n2.b"] = (c,)
                shapes[f"{p}.fc1"] = (emax * c, c)
                shapes[f"{p}.fc2"] = (c, emax * c)
        elif st.kind is BlockKind.MB_POOL:
            mid = prev * emax
            shapes["head.expand"] = (mid, prev)
            shapes["head.a.s"] = shapes["head.a.b"] = (mid,)
            shapes["head.fc"] = (c, mid)
            shapes["head.cls"] = (space.num_classes, c)
            shapes["head.cls_b"] = (space.num_classes,)
        if st.kind is not BlockKind.MB_POOL:
            prev = c
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 3:
        return shape[1] * shape[2]
    return shape[-1]


def _gain(name: str) -> float:
    # projections feeding a residual sum or the logits get damped gains
    if name.endswith(("head.cls",)):
        return 0.1
    if name.endswith((".o", ".fc2")):
        return 0.5
    if name.endswith((".q", ".k", ".proj", ".se_r", ".se_e")):
        return 1.0
    return 2.0


@dataclass
class SupernetWeights:
    """Full-size shared parameters of one supernet."""

    space: SpaceSpec
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "SupernetWeights":
        return SupernetWeights(self.space, {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def init_weights(space: SpaceSpec, rng: np.random.Generator, dtype=np.float32) -> SupernetWeights:
    """He-style initialisation against the full fan-in; scales 1, biases 0."""
    params = {}
    for name, shape in param_shapes(space).items():
        if name.endswith(".s"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b") or name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(_gain(name) / _fan_in(name, shape))
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return SupernetWeights(space, params)


# --------------------------------------------------------------------------- #
# Block plan and slicing
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Block:
    kind: str  # "stem" | "mb" | "attn" | "head"
    prefix: str
    cin: int = 0
    cout: int = 0
    k: int = 0
    kmax: int = 0
    e: int = 1
    emax: int = 1
    stride: int = 1
    se: bool = False


def plan(space: SpaceSpec, cfg: SubnetConfig) -> list[Block]:
    blocks: list[Block] = []
    prev = space.in_channels
    for i, (st, sc) in enumerate(zip(space.stages, cfg.stages)):
        c = sc.channels
        kmax, emax = max(st.kernels), max(st.expansions)
        if st.kind is BlockKind.CONV_STEM:
            blocks.append(Block("stem", "stem", prev, c, sc.kernels[0], kmax, stride=st.stride))
        elif st.kind in (BlockKind.MBV2, BlockKind.MBV3):
            for li in range(sc.depth):
                blocks.append(Block("mb", f"s{i}.l{li}", prev if li == 0 else c, c, sc.kernels[li],
                                    kmax, sc.expansions[li], emax, st.stride if li == 0 else 1,
                                    st.kind is BlockKind.MBV3))
        elif st.kind is BlockKind.TRANSFORMER:
            te = space.transition_expansion
            blocks.append(Block("mb", f"s{i}.t", prev, c, 3, 3, te, te, st.stride, True))
            for li in range(sc.depth):
                blocks.append(Block("attn", f"s{i}.l{li}", c, c, sc.kernels[li], kmax,
                                    sc.expansions[li], emax))
        elif st.kind is BlockKind.MB_POOL:
            blocks.append(Block("head", "head", prev, c, e=sc.expansions[0], emax=emax))
        if st.kind is not BlockKind.MB_POOL:
            prev = c
    return blocks


def _kspan(k: int, kmax: int) -> Span:
    start = (kmax - k) // 2
    return (start, start + k)


def slice_map(space: SpaceSpec, cfg: SubnetConfig) -> SliceMap:
    """Active region of every parameter touched by ``cfg``.

    Each entry holds one ``(start, stop)`` span per axis. Parameters of inactive
    layers are absent.
    """
    sm: SliceMap = {}
    for b in plan(space, cfg):
        p = b.prefix
        if b.kind == "stem":
            ks = _kspan(b.k, b.kmax)
            sm["stem.w"] = ((0, b.cout), (0, b.cin), ks, ks)
            sm["stem.a.s"] = sm["stem.a.b"] = ((0, b.cout),)
        elif b.kind == "mb":
            mid = b.cin * b.e
            if b.e > 1:
                sm[f"{p}.expand"] = ((0, mid), (0, b.cin))
                sm[f"{p}.a1.s"] = sm[f"{p}.a1.b"] = ((0, mid),)
            ks = _kspan(b.k, b.kmax)
            sm[f"{p}.dw"] = ((0, mid), ks, ks)
            sm[f"{p}.a2.s"] = sm[f"{p}.a2.b"] = ((0, mid),)
            if b.se:
                r = max(1, mid // 4)
                sm[f"{p}.se_r"] = ((0, r), (0, mid))
                sm[f"{p}.se_e"] = ((0, mid), (0, r))
            sm[f"{p}.proj"] = ((0, b.cout), (0, mid))
            sm[f"{p}.a3.s"] = sm[f"{p}.a3.b"] = ((0, b.cout),)
        elif b.kind == "attn":
            d = b.cout
            dqk = (d // space.head_dim) * space.qk_dim
            sm[f"{p}.n1.s"] = sm[f"{p}.n1.b"] = ((0, d),)
            sm[f"{p}.q"] = sm[f"{p}.k"] = ((0, dqk), (0, d))
            sm[f"{p}.v"] = ((0, b.k * d), (0, d))
            sm[f"{p}.o"] = ((0, d), (0, b.k * d))
            sm[f"{p}.n2.s"] = sm[f"{p}.n2.b"] = ((0, d),)
            sm[f"{p}.fc1"] = ((0, b.e * d), (0, d))
            sm[f"{p}.fc2"] = ((0, d), (0, b.e * d))
        elif b.kind == "head":
            mid = b.cin * b.e
            sm["head.expand"] = ((0, mid), (0, b.cin))
            sm["head.a.s"] = sm["head.a.b"] = ((0, mid),)
            sm["head.fc"] = ((0, b.cout), (0, mid))
            sm["head.cls"] = ((0, space.num_classes), (0, b.cout))
            sm["head.cls_b"] = ((0, space.num_classes),)
    return sm


def shared_params(space: SpaceSpec, cfg_a: SubnetConfig, cfg_b: SubnetConfig) -> SliceMap:
    """Per-parameter intersection of the active regions of two subnets."""
    sa, sb = slice_map(space, cfg_a), slice_map(space, cfg_b)
    out: SliceMap = {}
    for name in sa.keys() & sb.keys():
        spans = tuple((max(a0, b0), min(a1, b1)) for (a0, a1), (b0, b1) in zip(sa[name], sb[name]))
        if all(hi > lo for lo, hi in spans):
            out[name] = spans
    return dict(sorted(out.items()))


def as_index(spans: tuple[Span, ...]) -> tuple[slice, ...]:
    return tuple(slice(lo, hi) for lo, hi in spans)


def mask_of(shape: tuple[int, ...], spans: tuple[Span, ...]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[as_index(spans)] = True
    return m


# --------------------------------------------------------------------------- #
# Forward / backward
# --------------------------------------------------------------------------- #


def fan_in_rescale(name: str, shape: tuple[int, ...], spans: tuple[Span, ...]) -> float:
    """sqrt(full fan-in / active fan-in) for weight tensors, 1 for scales and biases.

    Keeps activation variance of narrow subnets comparable to the full network,
    which matters because no normalization layer compensates for slicing.
    """
    if len(shape) < 2:
        return 1.0
    active = int(np.prod([hi - lo for lo, hi in spans[1:]]))
    return float(np.sqrt(_fan_in(name, shape) / active))


@dataclass
class ForwardCache:
    tape: Tape
    leaves: dict[str, Var]
    logits: Var
    weights: SupernetWeights
    extras: dict = field(default_factory=dict)


def resize_inputs(inputs: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbour resize of an NCHW batch to ``resolution`` x ``resolution``."""
    h, w = inputs.shape[-2:]
    if h == resolution and w == resolution:
        return inputs
    rows = (np.arange(resolution) * h) // resolution
    cols = (np.arange(resolution) * w) // resolution
    return inputs[..., rows[:, None], cols[None, :]]


def forward(weights: SupernetWeights, space: SpaceSpec, cfg: SubnetConfig, inputs: np.ndarray) -> ForwardCache:
    """Run ``cfg`` on an NCHW batch whose spatial size equals ``cfg.resolution``."""
    check_config(space, cfg)
    if inputs.ndim != 4 or inputs.shape[1] != space.in_channels:
        raise ValueError(f"expected (B, {space.in_channels}, H, W) inputs, got {inputs.shape}")
    if inputs.shape[2] != cfg.resolution or inputs.shape[3] != cfg.resolution:
        raise ValueError(f"input size {inputs.shape[2:]} != subnet resolution {cfg.resolution}")
    sm = slice_map(space, cfg)
    tape = Tape()
    leaves: dict[str, Var] = {}

    def P(name: str) -> Var:
        leaf = leaves.get(name)
        if leaf is None:
            leaf = leaves[name] = Var(weights.params[name])
        spans = sm[name]
        return tape.take(leaf, as_index(spans), fan_in_rescale(name, leaf.data.shape, spans))

    dtype = weights.dtype
    x = Var(np.ascontiguousarray(inputs.transpose(0, 2, 3, 1), dtype=dtype))

    def mb_block(x: Var, b: Block) -> Var:
        p = b.prefix
        h = x
        if b.e > 1:
            h = tape.hswish(tape.affine(tape.linear(h, P(f"{p}.expand")), P(f"{p}.a1.s"), P(f"{p}.a1.b")))
        h = tape.hswish(tape.affine(tape.depthwise(h, P(f"{p}.dw"), b.stride), P(f"{p}.a2.s"), P(f"{p}.a2.b")))
        if b.se:
            s = tape.spatial_mean(h)
            s = tape.hsigmoid(tape.linear(tape.relu(tape.linear(s, P(f"{p}.se_r"))), P(f"{p}.se_e")))
            h = tape.channel_gate(h, s)
        h = tape.affine(tape.linear(h, P(f"{p}.proj")), P(f"{p}.a3.s"), P(f"{p}.a3.b"))
        if b.stride == 1 and b.cin == b.cout:
            h = tape.add(x, h)
        return h

    def attn_block(x: Var, b: Block) -> Var:
        p = b.prefix
        bsz, hh, ww, d = x.shape
        t = tape.reshape(x, (bsz, hh * ww, d))
        nh = d // space.head_dim
        u = tape.affine(t, P(f"{p}.n1.s"), P(f"{p}.n1.b"))
        q = tape.reshape(tape.linear(u, P(f"{p}.q")), (bsz, hh * ww, nh, space.qk_dim))
        k = tape.reshape(tape.linear(u, P(f"{p}.k")), (bsz, hh * ww, nh, space.qk_dim))
        v = tape.reshape(tape.linear(u, P(f"{p}.v")), (bsz, hh * ww, nh, b.k * space.head_dim))
        ctx = tape.attention(q, k, v, 1.0 / np.sqrt(space.qk_dim))
        t = tape.add(t, tape.linear(tape.hswish(ctx), P(f"{p}.o")))
        u = tape.affine(t, P(f"{p}.n2.s"), P(f"{p}.n2.b"))
        t = tape.add(t, tape.linear(tape.hswish(tape.linear(u, P(f"{p}.fc1"))), P(f"{p}.fc2")))
        return tape.reshape(t, (bsz, hh, ww, d))

    for b in plan(space, cfg):
        if b.kind == "stem":
            x = tape.hswish(tape.affine(tape.conv2d(x, P("stem.w"), b.stride), P("stem.a.s"), P("stem.a.b")))
        elif b.kind == "mb":
            x = mb_block(x, b)
        elif b.kind == "attn":
            x = attn_block(x, b)
        elif b.kind == "head":
            x = tape.hswish(tape.affine(tape.linear(x, P("head.expand")), P("head.a.s"), P("head.a.b")))
            x = tape.spatial_mean(x)
            x = tape.hswish(tape.linear(x, P("head.fc")))
            x = tape.linear(x, P("head.cls"), P("head.cls_b"))
    return ForwardCache(tape, leaves, x, weights)


def logits_of(weights: SupernetWeights, space: SpaceSpec, cfg: SubnetConfig, inputs: np.ndarray) -> np.ndarray:
    return forward(weights, space, cfg, inputs).logits.data


@dataclass
class BackwardResult:
    loss: float
    grads: dict[str, np.ndarray]
    logits: np.ndarray


def backward(cache: ForwardCache, labels: np.ndarray, loss_scale: float = 1.0,
             full: bool = True) -> BackwardResult:
    """Cross-entropy loss and its gradient for every supernet parameter.

    With ``full`` the result has one full-shape array per parameter (exact zeros
    outside the active slices); otherwise only touched parameters are present.
    ``loss_scale`` multiplies the loss before differentiation.
    """
    tape = cache.tape
    labels = np.asarray(labels)
    loss = tape.cross_entropy(cache.logits, labels)
    tape.backward(loss, seed=loss_scale)
    grads = {}
    if full:
        for name, p in cache.weights.params.items():
            leaf = cache.leaves.get(name)
            grads[name] = leaf.grad if leaf is not None and leaf.grad is not None else np.zeros_like(p)
    else:
        grads = {n: v.grad for n, v in cache.leaves.items() if v.grad is not None}
    return BackwardResult(float(loss.data) * loss_scale, grads, cache.logits.data)


def loss_and_grads(weights: SupernetWeights, space: SpaceSpec, cfg: SubnetConfig, inputs: np.ndarray,
                   labels: np.ndarray, full: bool = True) -> BackwardResult:
    return backward(forward(weights, space, cfg, resize_inputs(inputs, cfg.resolution)), labels, full=full)


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #


@dataclass
class SGDState:
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    updates: int = 0


@dataclass(frozen=True)
class SGDHyper:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float | None = None


def apply_update(weights: SupernetWeights, grads: dict[str, np.ndarray], state: SGDState,
                 hyper: SGDHyper) -> None:
    """One in-place SGD step (with heavy-ball momentum unless ``momentum`` is 0).

    With ``clip_norm`` the gradients are first rescaled to at most that global L2 norm.
    """
    factor = 1.0
    if hyper.clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
        if norm > hyper.clip_norm:
            factor = hyper.clip_norm / norm
    for name, w in weights.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if factor != 1.0:
            g = g * g.dtype.type(factor)
        if hyper.weight_decay:
            g = g + hyper.weight_decay * w
        if hyper.momentum:
            buf = state.momentum_buffers.get(name)
            if buf is None:
                buf = state.momentum_buffers[name] = np.zeros_like(w)
            buf *= hyper.momentum
            buf += g
            g = buf
        w -= (hyper.lr * g).astype(w.dtype, copy=False)
    state.updates += 1
