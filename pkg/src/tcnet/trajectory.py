"""Trajectory module: trace pixels back through backward flow, encode the
traced coordinates, gather features along each trajectory and attend over
them from the current frame.

Conventions
-----------
* A flow field is an array ``[h, w, 2]`` of (dx, dy) stored on the LATER
  frame's grid; ``(x + dx, y + dy)`` is the source pixel in the earlier frame.
* Coordinates are (x, y) = (column, row).
* Frame lists and trajectory steps run newest-first: step 0 is the current
  frame, step j is j frames earlier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_flow(raw: np.ndarray, width: Optional[int] = None, height: Optional[int] = None) -> np.ndarray:
    """Round a float flow field to integers (ties away from zero) and clamp
    every traced source coordinate into the frame."""
    raw = np.asarray(raw, dtype=np.float64)
    h, w = raw.shape[:2]
    if width is not None and width != w or height is not None and height != h:
        raise ShapeError(f"flow extent {(h, w)} does not match frame {(height, width)}")
    d = round_half_away(raw).astype(np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.clip(xs + d[..., 0], 0, w - 1)
    ty = np.clip(ys + d[..., 1], 0, h - 1)
    return np.stack([tx - xs, ty - ys], axis=-1)


@dataclass
class LocationMap:
    """Per-pixel traced coordinates, ``coords[y, x, j] = (x_j, y_j)``."""

    coords: np.ndarray  # int64 [h, w, N, 2]

    @property
    def horizon(self) -> int:
        return self.coords.shape[2]

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def channels(self) -> np.ndarray:
        """Depth-2N view with alternating x and y per step."""
        h, w, n, _ = self.coords.shape
        return self.coords.reshape(h, w, 2 * n)


def build_location_map(flows: Sequence[np.ndarray], shape: Optional[tuple] = None) -> LocationMap:
    """Recursively back-trace every pixel through ``flows`` (newest-first).

    ``flows[j]`` lives on the grid of frame t-j and points into frame t-j-1.
    ``shape`` gives (h, w) and is required only when ``flows`` is empty.
    """
    flows = [np.asarray(f, dtype=np.int64) for f in flows]
    if flows:
        h, w = flows[0].shape[:2]
        for f in flows:
            if f.shape != (h, w, 2):
                raise ShapeError(f"inconsistent flow extents {f.shape} vs {(h, w, 2)}")
        if shape is not None and tuple(shape) != (h, w):
            raise ShapeError(f"flow extent {(h, w)} does not match {tuple(shape)}")
    elif shape is None:
        raise ValueError("shape is required when no flows are given")
    else:
        h, w = shape
    n = len(flows) + 1
    coords = np.empty((h, w, n, 2), dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = xs, ys
    coords[:, :, 0, 0] = cx
    coords[:, :, 0, 1] = cy
    for j, f in enumerate(flows, start=1):
        d = f[cy, cx]
        cx = np.clip(cx + d[..., 0], 0, w - 1)
        cy = np.clip(cy + d[..., 1], 0, h - 1)
        coords[:, :, j, 0] = cx
        coords[:, :, j, 1] = cy
    return LocationMap(coords)


def normalize_coords(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    """Map pixel coordinates to [-1, 1] per axis; shape [..., N, 2] -> [..., 2N]."""
    sx = (width - 1) / 2.0 if width > 1 else 1.0
    sy = (height - 1) / 2.0 if height > 1 else 1.0
    c = coords.astype(np.float64)
    out = np.empty(c.shape)
    out[..., 0] = c[..., 0] / sx - 1.0 if width > 1 else 0.0
    out[..., 1] = c[..., 1] / sy - 1.0 if height > 1 else 0.0
    return out.reshape(*c.shape[:-2], 2 * c.shape[-2])


def encoder_width(channels: int, horizon: int) -> int:
    return max(channels, 2 * horizon)


def init_trajectory_params(rng: np.random.Generator, channels: int, horizon: int) -> dict:
    c, n = channels, horizon
    mid = encoder_width(c, n)

    def w(fan_in, shape, gain=1.0):
        return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return {
        "enc_w1": w(2 * n, (1, 1, 2 * n, mid), 2.0),
        "enc_b1": zeros(mid),
        "enc_w2": w(mid, (1, 1, mid, c)),
        "enc_b2": zeros(c),
        "wq": w(c, (c, c)),
        "bq": zeros(c),
        "wk": w(c, (c, c)),
        "wv": w(c, (c, c)),
        "bv": zeros(c),
        "wo": w(c, (c, c)),
        "bo": zeros(c),
        "out_w": w(c, (1, 1, c, c)),
        "out_b": zeros(c),
    }


def encode_location_map(coords: np.ndarray, params: dict, height: int, width: int) -> Tensor:
    """Two 1x1 convolutions (ReLU between) over normalized coordinates.

    ``coords`` is [..., h, w, N, 2]; the result is [..., h, w, C].
    """
    x = Tensor(normalize_coords(coords, height, width))
    if x.shape[-1] != params["enc_w1"].shape[2]:
        raise ShapeError(
            f"location map depth {x.shape[-1]} does not match encoder input {params['enc_w1'].shape[2]}"
        )
    hmid = T.relu(T.conv2d(x, params["enc_w1"], params["enc_b1"]))
    return T.conv2d(hmid, params["enc_w2"], params["enc_b2"])


def gather_tokens(feats: Tensor, src_frame: np.ndarray, coords: np.ndarray) -> Tensor:
    """Pick features along trajectories.

    feats     [F, h, w, C]   pool of frame feature maps
    src_frame [Q, N]         frame index for each query's trajectory step
    coords    [Q, h, w, N, 2] traced (x, y) per query pixel and step
    returns   [Q, h, w, N, C]
    """
    nf, h, w, c = feats.shape
    q, n = src_frame.shape
    if coords.shape != (q, h, w, n, 2):
        raise ShapeError(f"coords {coords.shape} do not match frames {(q, h, w, n, 2)}")
    flat = (src_frame[:, None, None, :] * h + coords[..., 1]) * w + coords[..., 0]
    rows = T.gather_rows(T.reshape(feats, (nf * h * w, c)), flat.reshape(-1))
    return T.reshape(rows, (q, h, w, n, c))


def gather_trajectory_features(frames: Tensor, loc: LocationMap) -> Tensor:
    """Temporally pre-aligned tokens for one subsequence.

    ``frames`` is [N, h, w, C], newest-first. Returns [h, w, N, C].
    """
    n, h, w, _ = frames.shape
    if n != loc.horizon or (h, w) != (loc.height, loc.width):
        raise ShapeError(f"frames {frames.shape} do not match location map {loc.coords.shape}")
    out = gather_tokens(frames, np.arange(n)[None, :], loc.coords[None])
    return T.reshape(out, out.shape[1:])


def attend(q: Tensor, k: Tensor, v: Tensor, valid: Optional[np.ndarray], heads: int):
    """Multi-head scaled dot-product attention of one query per row.

    q [M, C], k and v [M, N, C], valid [M, N] (None = all valid).
    Returns ([M, C] concatenated head outputs, attention weights [M, heads, N]).
    """
    m, n, c = k.shape
    if c % heads:
        raise ShapeError(f"{heads} heads do not divide {c} channels")
    dh = c // heads
    qh = T.reshape(q, (m, heads, 1, dh))
    kh = T.transpose(T.reshape(k, (m, n, heads, dh)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (m, n, heads, dh)), (0, 2, 1, 3))
    logits = T.matmul(qh, kh)  # [M, heads, 1, N]
    if valid is None:
        mask = np.ones(logits.shape, dtype=bool)
    else:
        mask = np.broadcast_to(valid[:, None, None, :], logits.shape)
    probs, _ = T.masked_softmax(logits, mask, 1.0 / np.sqrt(dh))
    out = T.matmul(probs, vh)  # [M, heads, 1, dh]
    return T.reshape(out, (m, c)), probs.data.reshape(m, heads, n)


def trajectory_attention(tokens: Tensor, params: dict, heads: int, valid: Optional[np.ndarray] = None):
    """Self-attention along each trajectory from the current-frame token.

    tokens [..., N, C] -> [..., C]. Token 0 supplies the query; all N tokens
    supply keys and values. Returns (output, attention weights [..., heads, N]).
    """
    *lead, n, c = tokens.shape
    m = int(np.prod(lead)) if lead else 1
    tok = T.reshape(tokens, (m, n, c))
    q = T.linear(T.reshape(T.slice_axis(tok, 0, 1, axis=1), (m, c)), params["wq"], params["bq"])
    k = T.linear(tok, params["wk"])
    v = T.linear(tok, params["wv"], params["bv"])
    vm = None if valid is None else np.asarray(valid, dtype=bool).reshape(m, n)
    out, weights = attend(q, k, v, vm, heads)
    out = T.linear(out, params["wo"], params["bo"])
    return T.reshape(out, (*lead, c)), weights.reshape(*lead, heads, n)


def trajectory_module_forward(frames: Tensor, flows: Sequence[np.ndarray], params: dict, heads: int):
    """conv1x1(TA + E) for the newest frame of one subsequence.

    ``frames`` [N, h, w, C] newest-first; ``flows`` the N-1 integer flows.
    """
    n, h, w, c = frames.shape
    if len(flows) != n - 1:
        raise ShapeError(f"{n} frames need {n - 1} flows, got {len(flows)}")
    loc = build_location_map(flows, (h, w))
    enc = encode_location_map(loc.coords, params, h, w)
    tokens = gather_trajectory_features(frames, loc)
    ta, _ = trajectory_attention(tokens, params, heads)
    return T.conv2d(T.add(ta, enc), params["out_w"], params["out_b"])


# -- batched path used inside the backbone ------------------------------------


@dataclass
class TrajectoryPlan:
    """Trajectory bookkeeping for a flat batch of F frames at one resolution.

    Every frame is a query; its trajectory runs back over the previous N-1
    frames, shortened near the start of a video. Steps past the horizon
    repeat the last traced coordinate and are masked out of attention.
    """

    src_frame: np.ndarray  # [F, N] int
    valid: np.ndarray  # [F, N] bool
    coords: np.ndarray  # [F, h, w, N, 2] int

    @property
    def horizon(self) -> int:
        return self.src_frame.shape[1]


def window_horizons(lengths: Sequence[int], n: int) -> np.ndarray:
    """Per-frame horizon of a sliding N-frame window: frame t of a video sees
    min(t + 1, n) frames, so windows are shortened, never padded, at the start."""
    return np.concatenate([np.minimum(np.arange(t) + 1, n) for t in lengths]).astype(np.int64)


def trace_batch(flows: np.ndarray, horizons: np.ndarray, n: int, start: np.ndarray) -> np.ndarray:
    """Trace ``start`` pixels of every frame back through flows.

    flows    [F, H, W, 2] int; flows[f] maps frame f into frame f-1
    horizons [F] valid steps per frame (<= n)
    start    [P, 2] (x, y) starting pixels (same for every frame)
    returns  [F, P, n, 2]
    """
    nf, hh, ww, _ = flows.shape
    p = start.shape[0]
    out = np.empty((nf, p, n, 2), dtype=np.int64)
    cx = np.broadcast_to(start[:, 0], (nf, p)).copy()
    cy = np.broadcast_to(start[:, 1], (nf, p)).copy()
    out[:, :, 0, 0] = cx
    out[:, :, 0, 1] = cy
    fidx = np.arange(nf)[:, None]
    for j in range(1, n):
        live = (j < horizons)[:, None]
        src = np.maximum(fidx - (j - 1), 0)  # grid the step-j flow lives on
        d = flows[np.broadcast_to(src, (nf, p)), cy, cx]
        cx = np.where(live, np.clip(cx + d[..., 0], 0, ww - 1), cx)
        cy = np.where(live, np.clip(cy + d[..., 1], 0, hh - 1), cy)
        out[:, :, j, 0] = cx
        out[:, :, j, 1] = cy
    return out


def downsample_flow(flow: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a float/int flow by ``factor``, rescale magnitudes and
    re-quantize at the coarse grid."""
    h, w, _ = flow.shape
    pooled = flow.reshape(h // factor, factor, w // factor, factor, 2).mean(axis=(1, 3)) / factor
    return quantize_flow(pooled)


def make_plan(
    flows: np.ndarray,
    lengths: Sequence[int],
    n: int,
    factor: int,
    mode: str = "sample",
) -> TrajectoryPlan:
    """Build the trajectory plan for a stage downsampled by ``factor``.

    ``mode="sample"`` traces at input resolution from the centre pixel of each
    coarse cell and maps traced coordinates to cells by floor division, so
    sub-cell motion accumulates. ``mode="pool"`` downsamples each flow field
    and traces on the coarse grid directly.
    """
    nf, hh, ww, _ = flows.shape
    h, w = hh // factor, ww // factor
    horizons = window_horizons(lengths, n)
    if horizons.size != nf:
        raise ShapeError(f"lengths sum to {horizons.size}, flows hold {nf} frames")
    steps = np.arange(n)
    src_frame = np.arange(nf)[:, None] - np.minimum(steps[None, :], horizons[:, None] - 1)
    valid = steps[None, :] < horizons[:, None]
    if mode == "sample":
        ys, xs = np.mgrid[0:h, 0:w]
        start = np.stack([xs * factor + factor // 2, ys * factor + factor // 2], axis=-1).reshape(-1, 2)
        traced = trace_batch(flows, horizons, n, start) // factor
    elif mode == "pool":
        coarse = np.stack([downsample_flow(f, factor) for f in flows]) if factor > 1 else flows
        ys, xs = np.mgrid[0:h, 0:w]
        start = np.stack([xs, ys], axis=-1).reshape(-1, 2)
        traced = trace_batch(coarse, horizons, n, start)
    else:
        raise ValueError(f"unknown stage flow mode {mode!r}")
    return TrajectoryPlan(src_frame, valid, traced.reshape(nf, h, w, n, 2))


class TrajectoryModule:
    def __init__(self, channels: int, horizon: int, heads: int, rng: np.random.Generator):
        if channels % heads:
            raise ShapeError(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.horizon = horizon
        self.heads = heads
        self.params = init_trajectory_params(rng, channels, horizon)

    def __call__(self, feats: Tensor, plan: TrajectoryPlan, keep_weights: bool = False):
        """feats [F, h, w, C] -> ([F, h, w, C], attention weights or None)."""
        p = self.params
        nf, h, w, c = feats.shape
        n = plan.horizon
        if n != self.horizon:
            raise ShapeError(f"plan horizon {n} != module horizon {self.horizon}")
        enc = encode_location_map(plan.coords, p, h, w)
        # projections are per-token, so project whole frames before gathering
        q = T.reshape(T.linear(feats, p["wq"], p["bq"]), (nf * h * w, c))
        k = gather_tokens(T.linear(feats, p["wk"]), plan.src_frame, plan.coords)
        v = gather_tokens(T.linear(feats, p["wv"], p["bv"]), plan.src_frame, plan.coords)
        m = nf * h * w
        valid = np.broadcast_to(plan.valid[:, None, None, :], (nf, h, w, n)).reshape(m, n)
        ta, weights = attend(q, T.reshape(k, (m, n, c)), T.reshape(v, (m, n, c)), valid, self.heads)
        ta = T.reshape(T.linear(ta, p["wo"], p["bo"]), (nf, h, w, c))
        out = T.conv2d(T.add(ta, enc), p["out_w"], p["out_b"])
        return out, (weights.reshape(nf, h, w, self.heads, n) if keep_weights else None)
