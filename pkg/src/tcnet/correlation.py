"""Correlation module: region-windowed global attention whose key-value pairs
are pruned by a learned, input-dependent binary gate.

The gate is token-to-token: for every query region it sees the region's
affinity block (K^2 queries x all R*K^2 keys) as a one-channel image and
predicts a same-sized pre-activation map. Training mixes the relaxed gate
(saturating sigmoid) and the hard gate (threshold at 0) per sample; the hard
gate back-propagates the relaxed gate's derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, make_op, sat_sigmoid_grad_np, sat_sigmoid_np

GATE_HIDDEN = 4


@dataclass
class RegionPartition:
    """Non-overlapping K x K tiles in row-major tile order.

    ``tokens`` is [..., R, K*K, c]; tokens inside a tile are row-major too.
    """

    tokens: Tensor
    window: int
    height: int
    width: int

    @property
    def regions(self) -> int:
        return self.tokens.shape[-3]

    def departition(self, tokens: Optional[Tensor] = None) -> Tensor:
        """Inverse of :func:`partition_regions` (optionally for other tokens
        laid out the same way, e.g. attention outputs)."""
        t = self.tokens if tokens is None else tokens
        k = self.window
        *lead, r, kk, c = t.shape
        gh, gw = self.height // k, self.width // k
        x = T.reshape(t, (*lead, gh, gw, k, k, c))
        nl = len(lead)
        axes = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
        x = T.transpose(x, axes)
        return T.reshape(x, (*lead, self.height, self.width, c))


def partition_regions(x: Tensor, window: int) -> RegionPartition:
    *lead, h, w, c = x.shape
    k = window
    if k < 1 or h % k or w % k:
        raise ShapeError(f"window {k} does not divide frame extent {h}x{w}")
    gh, gw = h // k, w // k
    nl = len(lead)
    t = T.reshape(x, (*lead, gh, k, gw, k, c))
    t = T.transpose(t, list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4])
    t = T.reshape(t, (*lead, gh * gw, k * k, c))
    return RegionPartition(t, k, h, w)


@dataclass
class QKVBundle:
    q: Tensor
    k: Tensor
    v: Tensor


def project_qkv(part: RegionPartition, weights: dict) -> QKVBundle:
    """Per-token linear projections with the 1x1 weights wq, wk, wv (c -> c)."""
    c = part.tokens.shape[-1]
    for name in ("wq", "wk", "wv"):
        if weights[name].shape[0] != c:
            raise ShapeError(f"{name} depth {weights[name].shape[0]} does not match channels {c}")
    proj = lambda w, b: T.linear(part.tokens, weights[w], weights.get(b))  # noqa: E731
    return QKVBundle(proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv"))


def affinity(q: Tensor, k: Tensor) -> Tensor:
    """Dot products of each region's queries against every region's keys.

    q, k [..., R, K2, c] -> [..., R, K2, R*K2], key columns in region order.
    """
    if q.shape != k.shape:
        raise ShapeError(f"query {q.shape} and key {k.shape} layouts differ")
    *lead, r, kk, c = q.shape
    nl = len(lead)
    keys = T.reshape(k, (*lead, 1, r * kk, c))
    keys_t = T.transpose(keys, list(range(nl)) + [nl, nl + 2, nl + 1])  # [..., 1, c, RK2]
    qf = T.reshape(q, (*lead, 1, r * kk, c))
    a = T.matmul(qf, keys_t)  # [..., 1, RK2, RK2]
    return T.reshape(a, (*lead, r, kk, r * kk))


def init_gate_params(rng: np.random.Generator, hidden: int = GATE_HIDDEN, bias: float = 0.5) -> dict:
    return {
        "gate_w1": Tensor(rng.normal(0.0, np.sqrt(2.0 / 9.0) * 0.1, size=(3, 3, 1, hidden)), requires_grad=True),
        "gate_b1": Tensor(np.zeros(hidden), requires_grad=True),
        "gate_w2": Tensor(rng.normal(0.0, np.sqrt(1.0 / (9.0 * hidden)), size=(3, 3, hidden, 1)), requires_grad=True),
        "gate_b2": Tensor(np.full(1, bias), requires_grad=True),
    }


def gate_preactivation(a: Tensor, params: dict) -> Tensor:
    """Two 3x3 convolutions (padding 1, stride 1) over each A^r image.

    a [..., K2, RK2] -> g' with the same extent.
    """
    for name in ("gate_w1", "gate_w2"):
        if params[name].shape[0] != 3 or params[name].shape[1] != 3:
            raise ShapeError(f"{name} must be a 3x3 kernel, got {params[name].shape}")
    *lead, kk, n = a.shape
    img = T.reshape(a, (*lead, kk, n, 1))
    hid = T.relu(T.conv2d(img, params["gate_w1"], params["gate_b1"], padding=1, stride=1))
    g = T.conv2d(hid, params["gate_w2"], params["gate_b2"], padding=1, stride=1)
    return T.reshape(g, (*lead, kk, n))


def semhash(g_prime: Tensor, soft: Union[bool, np.ndarray]) -> Tensor:
    """Improved SemHash gate.

    Forward picks sat_sigmoid(g') where ``soft`` is true and 1(g' > 0)
    elsewhere; ``soft`` broadcasts over the leading axes (e.g. one flag per
    sample). Backward always uses the saturating sigmoid's derivative.
    """
    x = g_prime.data
    soft = np.asarray(soft, dtype=bool)
    soft_b = soft.reshape(soft.shape + (1,) * (x.ndim - soft.ndim))
    g = np.where(soft_b, sat_sigmoid_np(x), (x > 0).astype(np.float64))
    return make_op(g, (g_prime,), lambda grad: (grad * sat_sigmoid_grad_np(x),))


@dataclass
class GateBundle:
    g_prime: Tensor
    g_alpha: np.ndarray
    g_beta: np.ndarray
    soft: np.ndarray  # which samples use g_alpha
    active: Tensor


def gate_forward(a: Tensor, params: dict, training: bool, coin: Union[int, np.ndarray] = 0) -> GateBundle:
    """Gate map for affinity blocks ``a`` [..., K2, RK2].

    Evaluation always uses the hard gate. In training, ``coin`` = 1 selects
    the relaxed gate; it may be an array over leading axes (per sample).
    """
    gp = gate_preactivation(a, params)
    coin = np.asarray(coin)
    soft = (coin == 1) if training else np.zeros(coin.shape, dtype=bool)
    active = semhash(gp, soft)
    return GateBundle(gp, sat_sigmoid_np(gp.data), (gp.data > 0).astype(np.float64), soft, active)


def gate_l1(g: Tensor) -> Tensor:
    """Mean absolute gate entry (gates are non-negative, so this is mean(g))."""
    return T.mean(g)


def sparse_attention(
    a: Tensor,
    gate: Tensor,
    hard: np.ndarray,
    values: Tensor,
    scale: float,
):
    """Gated attention for all query regions of a frame.

    a      [..., R, K2, RK2] affinities
    gate   [..., R, K2, RK2] active gate (relaxed or hard)
    hard   bool over the leading axes: True where ``gate`` is the hard gate
    values [..., RK2, d] values of every key token in region order

    With a hard gate the kept entries of I = A * g enter a masked softmax;
    a row with no kept entry falls back to its own value token. With a
    relaxed gate scale * (A * g) enters a full softmax.
    Returns (output [..., R, K2, d], probabilities, degenerate-row count).
    """
    if a.shape != gate.shape:
        raise ShapeError(f"affinity {a.shape} and gate {gate.shape} differ")
    *lead, r, kk, n = a.shape
    nl = len(lead)
    hard = np.asarray(hard, dtype=bool)
    hard_b = hard.reshape(hard.shape + (1,) * (a.ndim - hard.ndim))
    mask = np.where(hard_b, gate.data > 0, True)
    degenerate = ~mask.any(axis=-1)
    if degenerate.any():
        mask = mask.copy()
        self_idx = np.arange(r * kk).reshape(r, kk)
        lead_idx = np.nonzero(degenerate)
        mask[lead_idx + (self_idx[lead_idx[-2], lead_idx[-1]],)] = True
    logits = T.mul(a, gate)
    probs, _ = T.masked_softmax(logits, mask, scale)
    pf = T.reshape(probs, (*lead, r * kk, n))
    out = T.matmul(pf, values)
    d = values.shape[-1]
    return T.reshape(out, (*lead, r, kk, d)), probs, int(degenerate.sum())


def init_correlation_params(rng: np.random.Generator, channels: int, out_bias: float = 0.0) -> dict:
    c = channels

    def w(shape):
        return Tensor(rng.normal(0.0, np.sqrt(1.0 / c), size=shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    p = {
        "wq": w((c, c)),
        "bq": zeros(c),
        "wk": w((c, c)),
        "bk": zeros(c),
        "wv": w((c, c)),
        "bv": zeros(c),
        "wo": w((c, c)),
        "bo": Tensor(np.full(c, out_bias), requires_grad=True),
    }
    p.update(init_gate_params(rng))
    return p


@dataclass
class CorrelationResult:
    output: Tensor  # [..., h, w, c]
    l1: Tensor  # scalar, gradient reaches gate parameters only
    density: float
    degenerate: int
    gate: Optional[GateBundle] = None
    probs: Optional[np.ndarray] = None


def correlation_module_forward(
    x: Tensor,
    params: dict,
    window: int,
    heads: int = 1,
    training: bool = False,
    coin: Union[int, np.ndarray] = 0,
    keep_maps: bool = False,
    isolate_l1: bool = True,
) -> CorrelationResult:
    """x [..., h, w, c] -> gated region attention output of the same extent.

    ``coin`` broadcasts over the leading (sample) axes of ``x``. The L1 term
    is computed from a gate evaluated on detached affinities so its gradient
    stops at the gate parameters.
    """
    *lead, h, w, c = x.shape
    if c % heads:
        raise ShapeError(f"{heads} heads do not divide {c} channels")
    dh = c // heads
    nl = len(lead)
    part = partition_regions(x, window)
    qkv = project_qkv(part, params)
    r, kk = part.regions, window * window
    n = r * kk

    def split_heads(t):  # [..., R, K2, c] -> [..., heads, R, K2, dh]
        t = T.reshape(t, (*lead, r, kk, heads, dh))
        return T.transpose(t, list(range(nl)) + [nl + 2, nl, nl + 1, nl + 3])

    qh, kh, vh = split_heads(qkv.q), split_heads(qkv.k), split_heads(qkv.v)
    a = affinity(qh, kh)  # [..., heads, R, K2, RK2]

    coin = np.asarray(coin)
    if coin.ndim and coin.shape != tuple(lead):
        raise ShapeError(f"coin shape {coin.shape} must be scalar or match leading axes {tuple(lead)}")
    gate = gate_forward(a, params, training, coin)
    hard = ~gate.soft

    values = T.reshape(vh, (*lead, heads, n, dh))
    out, probs, degenerate = sparse_attention(a, gate.active, hard, values, 1.0 / np.sqrt(dh))
    # [..., heads, R, K2, dh] -> [..., R, K2, c]
    out = T.transpose(out, list(range(nl)) + [nl + 1, nl + 2, nl, nl + 3])
    out = T.reshape(out, (*lead, r, kk, c))
    out = part.departition(out)
    out = T.linear(out, params["wo"], params["bo"])

    if isolate_l1 and T.active_tape() is not None:
        iso = gate_forward(T.detach(a), params, training, coin)
        l1 = gate_l1(iso.active)
    else:
        l1 = gate_l1(gate.active)
    density = float(gate.active.data.mean())
    return CorrelationResult(
        out,
        l1,
        density,
        degenerate,
        gate if keep_maps else None,
        probs.data if keep_maps else None,
    )


class CorrelationModule:
    def __init__(self, channels: int, window: int, heads: int, rng: np.random.Generator, out_bias: float = 0.0):
        self.channels = channels
        self.window = window
        self.heads = heads
        self.params = init_correlation_params(rng, channels, out_bias)

    def __call__(self, x: Tensor, training: bool = False, coin=0, keep_maps: bool = False) -> CorrelationResult:
        return correlation_module_forward(x, self.params, self.window, self.heads, training, coin, keep_maps)
