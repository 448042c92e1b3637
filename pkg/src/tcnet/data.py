"""Synthetic gloss videos with exact integer backward flow, a block-matching
flow estimator, flip/temporal-rescale augmentation and the episode file format.

Flow convention: ``flows[t]`` lives on the pixel grid of frame t+1 and holds
the displacement from each pixel to its source in frame t. A blob moving by
``v`` between the two frames therefore carries flow ``-v`` on its pixels.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .trajectory import trace_batch

SHAPES = ("disc", "square", "bar")
PATTERNS = ("line", "arc", "zigzag", "hold")
SHAPE_COLORS = {
    "disc": (0.95, 0.25, 0.2),
    "square": (0.2, 0.85, 0.3),
    "bar": (0.25, 0.4, 0.95),
}
MAGIC = b"TCEP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH6I")


@dataclass(frozen=True)
class GestureSpec:
    gloss: int
    shape: str
    pattern: str
    speed: int = 2  # max per-axis displacement per frame
    duration: tuple = (6, 10)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.gloss < 1:
            raise ValueError("gloss ids start at 1; 0 is the CTC blank")
        if not 1 <= self.duration[0] <= self.duration[1]:
            raise ValueError(f"bad duration range {self.duration}")


def default_vocabulary() -> list:
    """Nine moving gestures (every shape with every moving pattern) plus a
    stationary disc that doubles as the neutral rest gloss."""
    vocab = []
    for shape in SHAPES:
        for pattern in ("line", "arc", "zigzag"):
            vocab.append(GestureSpec(len(vocab) + 1, shape, pattern))
    vocab.append(GestureSpec(len(vocab) + 1, "disc", "hold"))
    return vocab


@dataclass
class Episode:
    """frames [T, h, w, 3] float32 in [0, 1]; flows [T-1, h, w, 2] int16."""

    frames: np.ndarray
    flows: np.ndarray
    reference: list
    seed: int
    vocab_size: int
    spans: list = field(default_factory=list)  # (gloss, start, stop) frame spans
    positions: Optional[np.ndarray] = None  # [T, 2] blob top-left, -1 when absent

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def full_flows(self) -> np.ndarray:
        """[T, h, w, 2] with a zero field in front so index t maps t -> t-1."""
        t, h, w, _ = self.frames.shape
        out = np.zeros((t, h, w, 2), dtype=np.int16)
        out[1:] = self.flows
        return out


# -- rendering -----------------------------------------------------------------


def _mask(shape: str) -> np.ndarray:
    if shape == "disc":
        yy, xx = np.mgrid[-3:4, -3:4]
        return (xx * xx + yy * yy) <= 10
    if shape == "square":
        return np.ones((6, 6), dtype=bool)
    return np.ones((3, 9), dtype=bool)


def _surface(shape: str) -> np.ndarray:
    """Fixed brightness texture carried rigidly by a blob, so block matching
    has something to lock onto inside the blob."""
    mask = _mask(shape)
    rng = np.random.default_rng(SHAPES.index(shape) + 101)
    return 0.7 + 0.3 * rng.random(mask.shape)


def _velocities(pattern: str, steps: int, speed: int, sx: int, sy: int) -> np.ndarray:
    """Integer per-frame displacements for ``steps`` moves."""
    s = speed
    if pattern == "hold":
        v = np.zeros((steps, 2), dtype=np.int64)
    elif pattern == "line":
        v = np.tile([s, 0], (steps, 1))
    elif pattern == "zigzag":
        v = np.array([[s, s if (i // 2) % 2 == 0 else -s] for i in range(steps)])
    else:  # arc: turn half a circle, sweeping the heading from +x over to -x
        angles = np.linspace(0.0, np.pi, steps) if steps > 1 else np.zeros(1)
        v = np.stack([np.rint(s * np.cos(angles)), np.rint(-s * np.sin(angles))], axis=-1)
    v = np.asarray(v, dtype=np.int64).reshape(steps, 2)
    return v * np.array([sx, sy])


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    noise = rng.random((h, w, 3))
    smooth = ndimage.uniform_filter(noise, size=(3, 3, 1), mode="wrap")
    return 0.25 + 0.25 * smooth + 0.05 * noise


def generate_episode(
    seed: int,
    vocab: Optional[Sequence[GestureSpec]] = None,
    num_glosses: Optional[int] = None,
    extent: tuple = (32, 32),
    t_range: tuple = (24, 48),
    gap: tuple = (1, 3),
) -> Episode:
    """Render one episode deterministically from ``seed``.

    Glosses play one after another separated by short blob-free gaps over a
    static textured background. ``num_glosses=None`` draws 2-4; 0 produces a
    static video labelled with the stationary (rest) gloss.
    """
    vocab = list(default_vocabulary() if vocab is None else vocab)
    if not vocab:
        raise ValueError("vocabulary must not be empty")
    h, w = extent
    t_lo, t_hi = t_range
    rng = np.random.default_rng(seed)
    dmin = min(g.duration[0] for g in vocab)
    length = int(rng.integers(t_lo, t_hi + 1))

    if num_glosses == 0:
        rest = [g for g in vocab if g.pattern == "hold"]
        if not rest:
            raise ValueError("vocabulary has no stationary gesture to use as rest gloss")
        plan = [rest[0]]
        durations = [length]
        gaps = [0]
    else:
        if num_glosses is None:
            top = max(1, min(4, (t_hi - gap[0]) // (dmin + gap[0])))
            num_glosses = int(rng.integers(min(2, top), top + 1))
        need = num_glosses * dmin + (num_glosses + 1) * gap[0]
        if need > t_hi:
            raise ValueError(f"{num_glosses} glosses need {need} frames, range tops out at {t_hi}")
        for _ in range(1000):
            plan = [vocab[i] for i in rng.integers(0, len(vocab), size=num_glosses)]
            durations = [int(rng.integers(g.duration[0], g.duration[1] + 1)) for g in plan]
            gaps = [int(rng.integers(gap[0], gap[1] + 1)) for _ in plan]
            used = sum(durations) + sum(gaps) + gap[0]
            if used <= t_hi:
                length = max(length, used)  # trailing frames are blob-free rest
                break
        else:
            raise ValueError("could not fit the gloss plan into the frame budget")

    background = _texture(rng, h, w)
    frames = np.repeat(background[None], length, axis=0)
    flows = np.zeros((max(length - 1, 0), h, w, 2), dtype=np.int16)
    positions = np.full((length, 2), -1, dtype=np.int64)
    spans = []
    t = 0
    for spec, dur, g in zip(plan, durations, gaps):
        t += g
        sx, sy = (int(s) for s in rng.choice([-1, 1], size=2))
        vel = _velocities(spec.pattern, dur - 1, spec.speed, sx, sy)
        path = np.vstack([np.zeros((1, 2), dtype=np.int64), np.cumsum(vel, axis=0)])
        mask = _mask(spec.shape)
        mh, mw = mask.shape
        lo = -path.min(axis=0)
        hi = np.array([w - mw, h - mh]) - path.max(axis=0)
        if np.any(hi < lo):
            raise ValueError(f"gesture {spec.gloss} does not fit a {w}x{h} frame")
        start = np.array([rng.integers(lo[0], hi[0] + 1), rng.integers(lo[1], hi[1] + 1)])
        ys, xs = np.nonzero(mask)
        color = np.array(SHAPE_COLORS[spec.shape]) * _surface(spec.shape)[ys, xs, None]
        for i in range(dur):
            x0, y0 = start + path[i]
            frames[t + i, ys + y0, xs + x0] = color
            positions[t + i] = (x0, y0)
            if i > 0:
                flows[t + i - 1, ys + y0, xs + x0] = -vel[i - 1]
        spans.append((spec.gloss, t, t + dur))
        t += dur
    frames = frames.astype(np.float32)
    return Episode(frames, flows, [s.gloss for s in plan], seed, len(vocab), spans, positions)


# -- flow estimation -----------------------------------------------------------


def block_matching_flow(frame_prev: np.ndarray, frame_next: np.ndarray, search_radius: int = 2) -> np.ndarray:
    """Integer backward flow on ``frame_next``'s grid by exhaustive 3x3 SAD search.

    Candidates whose source pixel leaves the frame are skipped. Ties go to the
    smaller displacement magnitude, then to the earlier candidate in row-major
    (dy, dx) order.
    """
    if frame_prev.shape != frame_next.shape:
        raise ValueError(f"frame shapes differ: {frame_prev.shape} vs {frame_next.shape}")
    if search_radius < 1:
        raise ValueError("search radius must be >= 1")
    prev = np.asarray(frame_prev, dtype=np.float64)
    nxt = np.asarray(frame_next, dtype=np.float64)
    if prev.ndim == 2:
        prev, nxt = prev[..., None], nxt[..., None]
    h, w, _ = prev.shape
    r = search_radius
    cands = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    cands.sort(key=lambda d: d[0] * d[0] + d[1] * d[1])  # stable: keeps row-major among equals
    padded = np.pad(prev, ((r, r), (r, r), (0, 0)), mode="edge")
    ys, xs = np.mgrid[0:h, 0:w]
    best = np.full((h, w), np.inf)
    flow = np.zeros((h, w, 2), dtype=np.int16)
    for dy, dx in cands:
        shifted = padded[r + dy : r + dy + h, r + dx : r + dx + w]
        cost = ndimage.uniform_filter(np.abs(nxt - shifted).sum(axis=-1), size=3, mode="nearest") * 9.0
        inside = (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
        better = inside & (cost < best - 1e-12)
        best[better] = cost[better]
        flow[better] = (dx, dy)
    return flow


def estimate_flows(frames: np.ndarray, search_radius: int = 2) -> np.ndarray:
    return np.stack(
        [block_matching_flow(frames[t - 1], frames[t], search_radius) for t in range(1, len(frames))]
    ) if len(frames) > 1 else np.zeros((0, *frames.shape[1:3], 2), dtype=np.int16)


# -- augmentation --------------------------------------------------------------


def flip_episode(ep: Episode) -> Episode:
    """Mirror horizontally; flow x components change sign."""
    flows = ep.flows[:, :, ::-1].copy()
    flows[..., 0] = -flows[..., 0]
    # the motion log stores top-left corners and blob widths are not kept,
    # so a mirrored episode carries no log
    return Episode(
        np.ascontiguousarray(ep.frames[:, :, ::-1]), flows, list(ep.reference), ep.seed, ep.vocab_size,
        list(ep.spans), None,
    )


def rescale_index(length: int, factor: float) -> np.ndarray:
    """Nearest-neighbour source frame for each output frame."""
    new_len = int(np.floor(length * factor + 0.5))
    if new_len < 1:
        raise ValueError(f"temporal rescale {factor} leaves no frames out of {length}")
    return np.minimum(np.floor((np.arange(new_len) + 0.5) / factor).astype(np.int64), length - 1)


def rescale_episode(ep: Episode, factor: float) -> Episode:
    """Resample frames by nearest neighbour and rebuild flows: repeated frames
    get zero flow, skipped frames are bridged by composing traced steps."""
    idx = rescale_index(ep.length, factor)
    if len(idx) == ep.length and np.array_equal(idx, np.arange(ep.length)):
        return ep
    t, h, w, _ = ep.frames.shape
    full = ep.full_flows().astype(np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    start = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    flows = np.zeros((len(idx) - 1, h, w, 2), dtype=np.int16)
    for i in range(1, len(idx)):
        a, b = idx[i - 1], idx[i]
        steps = b - a
        if steps <= 0:
            continue
        # trace frame b back ``steps`` frames through flows b, b-1, ..., a+1
        traced = trace_batch(full[a + 1 : b + 1], np.array([steps + 1] * steps), steps + 1, start)[-1, :, -1]
        flows[i - 1] = (traced - start).reshape(h, w, 2)
    inverse = np.searchsorted(idx, np.arange(t))  # first output frame showing source frame
    spans = [(g, int(inverse[s]) if s < t else len(idx), int(inverse[e]) if e < t else len(idx)) for g, s, e in ep.spans]
    pos = ep.positions[idx] if ep.positions is not None else None
    return Episode(ep.frames[idx], flows, list(ep.reference), ep.seed, ep.vocab_size, spans, pos)


def augment(
    ep: Episode,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    temporal_rescale: float = 0.2,
) -> Episode:
    out = ep
    if rng.random() < flip_prob:
        out = flip_episode(out)
    if temporal_rescale > 0:
        out = rescale_episode(out, float(rng.uniform(1.0 - temporal_rescale, 1.0 + temporal_rescale)))
    return out


# -- episode files -------------------------------------------------------------


def encode_episode(ep: Episode) -> bytes:
    t, h, w, _ = ep.frames.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, t, h, w, ep.vocab_size, len(ep.reference), ep.seed)
    return b"".join(
        [
            header,
            np.ascontiguousarray(ep.frames, dtype="<f4").tobytes(),
            np.ascontiguousarray(ep.flows, dtype="<i2").tobytes(),
            np.asarray(ep.reference, dtype="<u2").tobytes(),
        ]
    )


def decode_episode(buf: bytes) -> Episode:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated episode header")
    magic, version, t, h, w, v, n_ref, seed = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported episode format version {version}")
    off = _HEADER.size
    n_frames = t * h * w * 3
    n_flow = max(t - 1, 0) * h * w * 2
    expected = off + 4 * n_frames + 2 * n_flow + 2 * n_ref
    if len(buf) != expected:
        raise ValueError(f"episode payload is {len(buf)} bytes, expected {expected}")
    frames = np.frombuffer(buf, "<f4", n_frames, off).reshape(t, h, w, 3).astype(np.float32)
    off += 4 * n_frames
    flows = np.frombuffer(buf, "<i2", n_flow, off).reshape(max(t - 1, 0), h, w, 2).astype(np.int16)
    off += 2 * n_flow
    ref = np.frombuffer(buf, "<u2", n_ref, off).astype(int).tolist()
    return Episode(frames, flows, ref, seed, v)


def write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_episode(ep: Episode, path) -> None:
    write_atomic(Path(path), encode_episode(ep))


def load_episode(path) -> Episode:
    return decode_episode(Path(path).read_bytes())


def episode_filename(split: str, seed: int) -> str:
    return f"{split}_{seed:08d}.tcep"


def default_manifest(seed: int = 0, train: int = 2000, dev: int = 200) -> list:
    """(seed, split) rows; episode seeds are drawn from ``seed`` without repeats."""
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=train + dev, replace=False)
    return [(int(s), "train") for s in seeds[:train]] + [(int(s), "dev") for s in seeds[train:]]


def write_manifest(rows: Sequence[tuple], path) -> None:
    text = "".join(f"{seed}\t{split}\n" for seed, split in rows)
    write_atomic(Path(path), text.encode())


def read_manifest(path) -> list:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].isdigit():
            raise ValueError(f"manifest line {n}: expected 'seed<TAB>split', got {line!r}")
        rows.append((int(parts[0]), parts[1]))
    return rows


def generate_dataset(rows: Sequence[tuple], out_dir, **episode_kwargs) -> None:
    """Render every manifest row into ``out_dir``; the manifest is written last
    so a failed run never leaves one behind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed, split in rows:
        save_episode(generate_episode(seed, **episode_kwargs), out / episode_filename(split, seed))
    write_manifest(rows, out / "manifest.tsv")


def load_split(data_dir, split: str, limit: int = 0) -> list:
    """Episodes of ``split`` in manifest order; ``limit`` > 0 keeps the first ``limit``."""
    data_dir = Path(data_dir)
    seeds = [seed for seed, s in read_manifest(data_dir / "manifest.tsv") if s == split]
    if limit:
        seeds = seeds[:limit]
    return [load_episode(data_dir / episode_filename(split, seed)) for seed in seeds]
