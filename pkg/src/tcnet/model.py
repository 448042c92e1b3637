"""Sequence recognizer: backbone with TCNet blocks -> BiLSTM -> gloss classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .block import Backbone, BackboneConfig, BlockConfig
from .sequence import bilstm_forward, classifier_forward, init_classifier_params, init_lstm_params
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int = 10
    channels: tuple = (16, 32, 64)
    block_stages: tuple = (2, 3)
    window: int = 2
    horizon: int = 12
    heads: int = 2
    combine: str = "multiply"
    trajectory: bool = True
    correlation: bool = True
    stage_flow: str = "sample"
    hidden: int = 64
    layers: int = 2

    @property
    def has_blocks(self) -> bool:
        return self.trajectory or self.correlation


@dataclass
class Batch:
    frames: np.ndarray  # [F, H, W, 3] float64, episodes concatenated in time
    flows: np.ndarray  # [F, H, W, 2] int, flows[f] maps frame f into f-1 (zero at episode starts)
    lengths: list
    references: list

    @property
    def size(self) -> int:
        return len(self.lengths)


def make_batch(episodes: Sequence) -> Batch:
    frames = np.concatenate([ep.frames for ep in episodes]).astype(np.float64)
    flows = np.concatenate([ep.full_flows() for ep in episodes]).astype(np.int64)
    return Batch(frames, flows, [ep.length for ep in episodes], [list(ep.reference) for ep in episodes])


@dataclass
class ForwardResult:
    lattice: Tensor  # [B, T_max, V+1] log-probabilities, right-padded
    lengths: list
    l1: list = field(default_factory=list)
    density: list = field(default_factory=list)
    degenerate: int = 0
    maps: list = field(default_factory=list)

    @property
    def mean_density(self) -> float:
        return float(np.mean(self.density)) if self.density else float("nan")


def pad_index(lengths: Sequence[int]) -> np.ndarray:
    """Row index into the flat [F, d] frame features that lays them out as a
    right-padded [B, T_max, d] block (padding repeats an episode's last frame)."""
    t_max = max(lengths)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    steps = np.arange(t_max)
    return (starts[:, None] + np.minimum(steps[None, :], np.asarray(lengths)[:, None] - 1)).reshape(-1)


def standardize_segments(x: Tensor, lengths: Sequence[int], eps: float = 1e-5) -> Tensor:
    """Per-episode temporal standardization of flat [F, d] frame features.

    Each episode's features are shifted to zero mean and scaled to unit
    variance over its frames, dimension by dimension. A static background
    contributes a near-constant vector to a globally pooled feature; this
    removes it so that the moving content sets the feature scale.
    """
    data = x.data
    out = np.empty_like(data)
    inv = []
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = data[a:b]
        centred = seg - seg.mean(axis=0)
        s = 1.0 / np.sqrt((centred**2).mean(axis=0) + eps)
        out[a:b] = centred * s
        inv.append(s)

    def backward(g):
        gx = np.empty_like(g)
        for (a, b), s in zip(zip(bounds[:-1], bounds[1:]), inv):
            y, gy = out[a:b], g[a:b]
            gx[a:b] = s * (gy - gy.mean(axis=0) - y * (gy * y).mean(axis=0))
        return (gx,)

    return T.make_op(out, (x,), backward)


class Recognizer:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        template = None
        if config.has_blocks:
            template = BlockConfig(
                channels=0,
                window=config.window,
                horizon=config.horizon,
                heads=config.heads,
                combine=config.combine,
                trajectory=config.trajectory,
                correlation=config.correlation,
            )
        bb_cfg = BackboneConfig(channels=tuple(config.channels), block_stages=tuple(config.block_stages))
        self.backbone = Backbone(bb_cfg, template, rng, config.stage_flow)
        self.lstm = init_lstm_params(rng, bb_cfg.feature_dim, config.hidden, config.layers)
        self.classifier = init_classifier_params(rng, 2 * config.hidden, config.vocab_size + 1)

    @property
    def block_count(self) -> int:
        return len(self.backbone.blocks)

    def named_parameters(self) -> dict:
        out = {f"backbone.{k}": v for k, v in self.backbone.named_parameters().items()}
        out.update({f"lstm.{k}": v for k, v in self.lstm.items()})
        out.update({f"cls.{k}": v for k, v in self.classifier.items()})
        return out

    def __call__(
        self,
        batch: Batch,
        training: bool = False,
        coins: Optional[np.ndarray] = None,
        keep_maps: bool = False,
    ) -> ForwardResult:
        """``coins`` [B, n_blocks]: one relaxed/hard draw per sample and block."""
        frame_coins = None
        if coins is not None:
            frame_coins = np.repeat(np.asarray(coins), batch.lengths, axis=0)
        bb = self.backbone(Tensor(batch.frames), batch.flows, batch.lengths, training, frame_coins, keep_maps)
        b, t_max = batch.size, max(batch.lengths)
        d = bb.features.shape[-1]
        feats = standardize_segments(bb.features, batch.lengths)
        seq = T.reshape(T.gather_rows(feats, pad_index(batch.lengths)), (b, t_max, d))
        hid = bilstm_forward(seq, self.lstm, self.config.hidden, self.config.layers, batch.lengths)
        lattice = classifier_forward(hid, self.classifier["weight"], self.classifier["bias"])
        return ForwardResult(lattice, list(batch.lengths), bb.l1, bb.density, bb.degenerate, bb.maps)
