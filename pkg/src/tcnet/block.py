"""TCNet block (trajectory and correlation modules side by side), the tiny
multi-stage backbone that hosts it, and multiply-accumulate accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .correlation import GATE_HIDDEN, CorrelationModule
from .tensor import ShapeError, Tensor
from .trajectory import TrajectoryModule, TrajectoryPlan, encoder_width, make_plan

COMBINE_MODES = ("multiply", "sum", "concat")


@dataclass
class BlockConfig:
    channels: int
    window: int = 2
    horizon: int = 12
    heads: int = 2
    combine: str = "multiply"
    trajectory: bool = True
    correlation: bool = True

    def validate(self) -> None:
        if not (self.trajectory or self.correlation):
            raise ValueError("a TCNet block needs at least one of trajectory/correlation enabled")
        if self.combine not in COMBINE_MODES:
            raise ValueError(f"combine must be one of {COMBINE_MODES}, got {self.combine!r}")
        if self.channels % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide {self.channels} channels")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class BackboneConfig:
    channels: tuple = (16, 32, 64)
    block_stages: tuple = (2, 3)  # 1-based stage numbers
    in_channels: int = 3

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


def combine(traj_out: Tensor, corr_out: Tensor, mode: str, fuse: Optional[dict] = None) -> Tensor:
    """Merge the two module outputs: Hadamard product, sum, or channel
    concatenation followed by a 1x1 projection back to C."""
    if traj_out.shape != corr_out.shape:
        raise ShapeError(f"cannot combine {traj_out.shape} with {corr_out.shape}")
    if mode == "multiply":
        return T.mul(traj_out, corr_out)
    if mode == "sum":
        return T.add(traj_out, corr_out)
    if mode == "concat":
        if fuse is None:
            raise ValueError("concat mode needs fuse parameters")
        cat = T.concat([traj_out, corr_out], axis=-1)
        return T.linear(cat, fuse["fuse_w"], fuse["fuse_b"])
    raise ValueError(f"unknown combine mode {mode!r}")


@dataclass
class BlockOutput:
    features: Tensor
    l1: Optional[Tensor]
    density: float
    degenerate: int
    traj_weights: Optional[np.ndarray] = None
    gate_maps: Optional[np.ndarray] = None


class TCNetBlock:
    def __init__(self, config: BlockConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config.channels
        self.trajectory = TrajectoryModule(c, config.horizon, config.heads, rng) if config.trajectory else None
        # a multiplicative combine starts close to the trajectory branch alone
        out_bias = 1.0 if (config.combine == "multiply" and config.trajectory) else 0.0
        self.correlation = (
            CorrelationModule(c, config.window, config.heads, rng, out_bias) if config.correlation else None
        )
        self.fuse = None
        if config.combine == "concat" and config.trajectory and config.correlation:
            self.fuse = {
                "fuse_w": Tensor(rng.normal(0.0, np.sqrt(1.0 / (2 * c)), (2 * c, c)), requires_grad=True),
                "fuse_b": Tensor(np.zeros(c), requires_grad=True),
            }

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        if self.trajectory is not None:
            out.update({f"{prefix}traj.{k}": v for k, v in self.trajectory.params.items()})
        if self.correlation is not None:
            out.update({f"{prefix}corr.{k}": v for k, v in self.correlation.params.items()})
        if self.fuse is not None:
            out.update({f"{prefix}{k}": v for k, v in self.fuse.items()})
        return out

    def __call__(
        self,
        feats: Tensor,
        plan: Optional[TrajectoryPlan],
        training: bool = False,
        coin=0,
        keep_maps: bool = False,
    ) -> BlockOutput:
        """feats [F, h, w, C]; every frame is the current frame of its own
        trajectory described by ``plan``. ``coin`` is scalar or one per frame."""
        traj_out = corr_out = None
        weights = None
        l1 = None
        density = 1.0
        degenerate = 0
        gate_maps = None
        if self.trajectory is not None:
            if plan is None:
                raise ValueError("trajectory module needs a trajectory plan")
            traj_out, weights = self.trajectory(feats, plan, keep_weights=keep_maps)
        if self.correlation is not None:
            res = self.correlation(feats, training, coin, keep_maps)
            corr_out, l1, density, degenerate = res.output, res.l1, res.density, res.degenerate
            if keep_maps:
                gate_maps = res.gate.active.data
        if traj_out is None:
            out = corr_out
        elif corr_out is None:
            out = traj_out
        else:
            out = combine(traj_out, corr_out, self.config.combine, self.fuse)
        return BlockOutput(out, l1, density, degenerate, weights, gate_maps)


def block_forward(
    frames: Tensor,
    flows: Sequence[np.ndarray],
    config: BlockConfig,
    block: TCNetBlock,
    training: bool = False,
    coin=0,
) -> BlockOutput:
    """One subsequence: ``frames`` [N, h, w, C] newest-first with N-1 integer
    flows (newest-first). The correlation branch sees the current frame only."""
    n, h, w, c = frames.shape
    if n != config.horizon:
        raise ShapeError(f"expected {config.horizon} frames, got {n}")
    plan = None
    if block.trajectory is not None:
        # reorder oldest-first so frame n-1 is the current frame of a single window
        chron = T.take(frames, np.arange(n)[::-1], axis=0)
        stacked = np.zeros((n, h, w, 2), dtype=np.int64)
        for j, f in enumerate(flows):
            stacked[n - 1 - j] = f
        plan = make_plan(stacked, [n], n, 1)
        traj_out, _ = block.trajectory(chron, plan)
        traj_out = T.reshape(T.slice_axis(traj_out, n - 1, n, axis=0), (h, w, c))
    current = T.reshape(T.slice_axis(frames, 0, 1, axis=0), (h, w, c))
    corr_out = None
    l1, density, degenerate = None, 1.0, 0
    if block.correlation is not None:
        res = block.correlation(current, training, coin)
        corr_out, l1, density, degenerate = res.output, res.l1, res.density, res.degenerate
    if block.trajectory is None:
        out = corr_out
    elif block.correlation is None:
        out = traj_out
    else:
        out = combine(traj_out, corr_out, config.combine, block.fuse)
    return BlockOutput(out, l1, density, degenerate)


# -- backbone ------------------------------------------------------------------


@dataclass
class BackboneOutput:
    features: Tensor  # [F, d]
    l1: list = field(default_factory=list)
    density: list = field(default_factory=list)
    degenerate: int = 0
    maps: list = field(default_factory=list)


class Backbone:
    """Stride-2 3x3 conv + ReLU per stage; TCNet blocks are added residually
    after the configured stages; global average pool gives one vector per frame."""

    def __init__(
        self,
        config: BackboneConfig,
        block_template: Optional[BlockConfig],
        rng: np.random.Generator,
        stage_flow: str = "sample",
    ):
        self.config = config
        self.stage_flow = stage_flow
        self.convs = []
        cin = config.in_channels
        for cout in config.channels:
            self.convs.append(
                {
                    "w": Tensor(rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)), requires_grad=True),
                    "b": Tensor(np.zeros(cout), requires_grad=True),
                }
            )
            cin = cout
        self.blocks: dict[int, TCNetBlock] = {}
        if block_template is not None:
            for stage in config.block_stages:
                if not 1 <= stage <= config.stages:
                    raise ValueError(f"block stage {stage} outside 1..{config.stages}")
                cfg = BlockConfig(**{**block_template.__dict__, "channels": config.channels[stage - 1]})
                self.blocks[stage] = TCNetBlock(cfg, rng)

    def named_parameters(self) -> dict:
        out = {}
        for i, conv in enumerate(self.convs, start=1):
            out[f"stage{i}.w"] = conv["w"]
            out[f"stage{i}.b"] = conv["b"]
        for stage, block in self.blocks.items():
            out.update(block.named_parameters(f"block{stage}."))
        return out

    def __call__(
        self,
        frames: Tensor,
        flows: Optional[np.ndarray],
        lengths: Sequence[int],
        training: bool = False,
        coins: Optional[np.ndarray] = None,
        keep_maps: bool = False,
    ) -> BackboneOutput:
        """frames [F, H, W, 3] for videos of ``lengths`` concatenated; flows
        [F, H, W, 2] int with flows[f] pointing from frame f into f-1.
        ``coins`` is [F, n_blocks] (one coin per sample, repeated per frame)."""
        out = BackboneOutput(frames)
        x = frames
        hh = frames.shape[1]
        for i, conv in enumerate(self.convs, start=1):
            x = T.relu(T.conv2d(x, conv["w"], conv["b"], padding=1, stride=2))
            block = self.blocks.get(i)
            if block is None:
                continue
            plan = None
            if block.trajectory is not None:
                factor = hh // x.shape[1]
                plan = make_plan(flows, lengths, block.config.horizon, factor, self.stage_flow)
            bi = sorted(self.blocks).index(i)
            coin = 0 if coins is None else coins[:, bi]
            res = block(x, plan, training, coin, keep_maps)
            x = T.add(x, res.features)
            if res.l1 is not None:
                out.l1.append(res.l1)
                out.density.append(res.density)
                out.degenerate += res.degenerate
            if keep_maps:
                out.maps.append((i, res.traj_weights, res.gate_maps, plan))
        nf, h, w, c = x.shape
        out.features = T.mean(T.reshape(x, (nf, h * w, c)), axis=1)
        return out


def backbone_forward(frames: np.ndarray, flows: Optional[np.ndarray], backbone: Backbone, training: bool = False):
    """Single video [T, H, W, 3] with flows [T-1, H, W, 2] -> features [T, d]."""
    t = frames.shape[0]
    full = np.zeros((t, *frames.shape[1:3], 2), dtype=np.int64)
    if flows is not None and t > 1:
        full[1:] = flows
    return backbone(Tensor(frames), full, [t], training).features


# -- FLOPs ---------------------------------------------------------------------


def flops_count(config: BlockConfig, gate_density: float, extents: tuple, gate_hidden: int = GATE_HIDDEN) -> dict:
    """Multiply-accumulate counts for one TCNet block on an h x w x C map.

    Attention terms (correlation branch, per frame):
      affinity     every query against every key:      (hw)^2 * C
      gating       one multiply per affinity entry:     heads * (hw)^2
      aggregation  weights times values:                (hw)^2 * C
    The gate needs the full affinity, so only gating and aggregation shrink
    with density. Everything else (projections, gate convolutions,
    trajectory branch, fusion) is counted at full cost in ``projection_macs``.
    """
    if not 0.0 <= gate_density <= 1.0:
        raise ValueError("gate density must lie in [0, 1]")
    h, w = extents
    c = config.channels
    hw = h * w
    heads = config.heads
    n = config.horizon
    aff = gating = aggregation = 0
    proj = 0
    if config.correlation:
        aff = hw * hw * c
        gating = heads * hw * hw
        aggregation = hw * hw * c
        proj += 4 * hw * c * c  # q, k, v, output
        gate_pixels = heads * hw * hw  # every A^r image, all regions
        proj += gate_pixels * 9 * gate_hidden + gate_pixels * 9 * gate_hidden
    if config.trajectory:
        mid = encoder_width(c, n)
        proj += hw * (2 * n * mid + mid * c)  # location encoder
        proj += 4 * hw * c * c  # q, k, v, output projections
        proj += 2 * hw * n * c  # logits and weighted values along trajectories
        proj += hw * c * c  # final 1x1 convolution
    if config.trajectory and config.correlation:
        proj += hw * c if config.combine != "concat" else hw * 2 * c * c
    product = gating + aggregation
    dense = aff + product
    sparse = aff + gate_density * product
    return {
        "affinity_macs": aff,
        "attention_product_macs": product,
        "sparse_attention_product_macs": gate_density * product,
        "dense_attention_macs": dense,
        "sparse_attention_macs": sparse,
        "projection_macs": proj,
        "total_dense": proj + dense,
        "total": proj + sparse,
        "attention_ratio": sparse / dense if dense else 1.0,
        "ratio": (proj + sparse) / (proj + dense) if (proj + dense) else 1.0,
    }
