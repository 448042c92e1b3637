"""Temporal encoder, gloss classifier, CTC loss and decoding, WER.

Gloss id 0 is the CTC blank; references use ids 1..V.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, make_op

BLANK = 0


class CTCInfeasibleError(ValueError):
    """The target cannot be aligned to the available number of frames."""


# -- LSTM --------------------------------------------------------------------


def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_recurrence(xw: Tensor, w_h: Tensor) -> Tensor:
    """Run an LSTM over pre-projected inputs.

    xw  [B, T, 4H] input contribution x_t W_x + b, gate order (i, f, g, o)
    w_h [H, 4H]    recurrent weights
    Returns hidden states [B, T, H]; initial state is zero.
    """
    b, t, h4 = xw.shape
    hdim = h4 // 4
    if w_h.shape != (hdim, h4):
        raise ShapeError(f"recurrent weight {w_h.shape} does not match hidden size {hdim}")
    x = xw.data
    wh = w_h.data
    hs = np.zeros((b, t + 1, hdim))
    cs = np.zeros((b, t + 1, hdim))
    gates = np.empty((b, t, h4))
    for s in range(t):
        z = x[:, s] + hs[:, s] @ wh
        i = _sig(z[:, :hdim])
        f = _sig(z[:, hdim : 2 * hdim])
        g = np.tanh(z[:, 2 * hdim : 3 * hdim])
        o = _sig(z[:, 3 * hdim :])
        gates[:, s] = np.concatenate([i, f, g, o], axis=1)
        cs[:, s + 1] = f * cs[:, s] + i * g
        hs[:, s + 1] = o * np.tanh(cs[:, s + 1])

    def backward(gh):
        dx = np.empty_like(x)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((b, hdim))
        dc_next = np.zeros((b, hdim))
        for s in range(t - 1, -1, -1):
            i, f, g, o = np.split(gates[:, s], 4, axis=1)
            tc = np.tanh(cs[:, s + 1])
            dh = gh[:, s] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * cs[:, s] * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    dh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dx[:, s] = dz
            dwh += hs[:, s].T @ dz
            dh_next = dz @ wh.T
            dc_next = dc * f
        return dx, dwh

    return make_op(hs[:, 1:].copy(), (xw, w_h), backward)


def init_lstm_params(rng: np.random.Generator, input_size: int, hidden: int, layers: int) -> dict:
    params = {}
    bound = 1.0 / np.sqrt(hidden)
    for layer in range(layers):
        d = input_size if layer == 0 else 2 * hidden
        for direction in ("fw", "bw"):
            key = f"l{layer}.{direction}"
            params[f"{key}.w_x"] = Tensor(rng.uniform(-bound, bound, (d, 4 * hidden)), requires_grad=True)
            params[f"{key}.w_h"] = Tensor(rng.uniform(-bound, bound, (hidden, 4 * hidden)), requires_grad=True)
            bias = np.zeros(4 * hidden)
            bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
            params[f"{key}.b"] = Tensor(bias, requires_grad=True)
    return params


def reverse_index(lengths: Sequence[int], t_max: int) -> np.ndarray:
    """Flat row index that reverses each sequence inside its own length."""
    rows = []
    for b, n in enumerate(lengths):
        idx = np.arange(t_max)
        idx[:n] = idx[:n][::-1]
        rows.append(b * t_max + idx)
    return np.concatenate(rows)


def _reverse(x: Tensor, rev: np.ndarray) -> Tensor:
    b, t, d = x.shape
    return T.reshape(T.gather_rows(T.reshape(x, (b * t, d)), rev), (b, t, d))


def bilstm_forward(
    features: Tensor,
    params: dict,
    hidden: int,
    layers: int,
    lengths: Optional[Sequence[int]] = None,
) -> Tensor:
    """Stacked bidirectional LSTM.

    features [B, T, d] (or [T, d]) -> [B, T, 2*hidden]; per step the forward
    direction's state comes first. Sequences shorter than T are right-padded;
    the backward direction reverses each sequence within its own length.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    squeeze = features.ndim == 2
    x = T.reshape(features, (1, *features.shape)) if squeeze else features
    b, t, _ = x.shape
    lengths = [t] * b if lengths is None else list(lengths)
    rev = reverse_index(lengths, t)
    for layer in range(layers):
        outs = []
        for direction in ("fw", "bw"):
            key = f"l{layer}.{direction}"
            inp = x if direction == "fw" else _reverse(x, rev)
            xw = T.linear(inp, params[f"{key}.w_x"], params[f"{key}.b"])
            hseq = lstm_recurrence(xw, params[f"{key}.w_h"])
            outs.append(hseq if direction == "fw" else _reverse(hseq, rev))
        x = T.concat(outs, axis=-1)
    return T.reshape(x, x.shape[1:]) if squeeze else x


# -- classifier ----------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_classifier_params(rng: np.random.Generator, hidden: int, classes: int) -> dict:
    return {
        "weight": Tensor(xavier_uniform(rng, hidden, classes), requires_grad=True),
        "bias": Tensor(np.zeros(classes), requires_grad=True),
    }


def classifier_forward(hidden: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-frame affine map followed by log-softmax over blank + glosses."""
    if weight.shape[0] != hidden.shape[-1]:
        raise ShapeError(f"classifier weight {weight.shape} does not match features {hidden.shape}")
    return T.log_softmax(T.linear(hidden, weight, bias))


# -- CTC -----------------------------------------------------------------------


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp(*xs):
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = sum(np.exp(x - safe) for x in xs)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(s), -np.inf)


def ctc_forward_backward(logp: np.ndarray, target: Sequence[int]):
    """Log-space alpha/beta recursions for one sequence.

    logp [T, C] per-frame log-probabilities. Returns (loss, grad) where grad
    is d loss / d logp, i.e. minus the posterior occupancy of each class.
    """
    tlen, ncls = logp.shape
    target = list(target)
    if any(y == BLANK or y < 0 or y >= ncls for y in target):
        raise ValueError("target ids must lie in [1, C-1]")
    if tlen < ctc_min_frames(target):
        raise CTCInfeasibleError(f"{len(target)} glosses cannot be aligned to {tlen} frames")
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    s = ext.size
    # transitions s-2 -> s allowed for non-blank labels differing from ext[s-2]
    skip = np.zeros(s, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    ninf = -np.inf
    emit = logp[:, ext]  # [T, S]

    alpha = np.full((tlen, s), ninf)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, tlen):
        prev = alpha[t - 1]
        a1 = np.concatenate([[ninf], prev[:-1]])
        a2 = np.where(skip, np.concatenate([[ninf, ninf], prev[:-2]]), ninf)
        alpha[t] = _logsumexp(prev, a1, a2) + emit[t]

    # beta excludes the emission at t
    beta = np.full((tlen, s), ninf)
    beta[-1, -1] = 0.0
    if s > 1:
        beta[-1, -2] = 0.0
    skip_next = np.concatenate([skip[2:], [False, False]])
    for t in range(tlen - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b1 = np.concatenate([nxt[1:], [ninf]])
        b2 = np.where(skip_next, np.concatenate([nxt[2:], [ninf, ninf]]), ninf)
        beta[t] = _logsumexp(nxt, b1, b2)

    tail = [alpha[-1, -1]] + ([alpha[-1, -2]] if s > 1 else [])
    log_p = _logsumexp(*[np.asarray(v) for v in tail])
    if not np.isfinite(log_p):
        raise CTCInfeasibleError("target has zero probability under the lattice")
    occ = np.exp(alpha + beta - log_p)  # [T, S]
    grad = np.zeros_like(logp)
    for k in np.unique(ext):
        grad[:, k] = -occ[:, ext == k].sum(axis=1)
    return float(-log_p), grad


def ctc_loss(lattice: Tensor, target: Sequence[int]) -> Tensor:
    """Negative log-probability of ``target`` summed over all alignments.

    ``lattice`` holds per-frame log-probabilities [T, V+1].
    """
    loss, grad = ctc_forward_backward(lattice.data, target)
    return make_op(np.array(loss), (lattice,), lambda g: (g * grad,))


def ctc_loss_batch(lattice: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int]) -> Tensor:
    """Mean CTC loss over a right-padded batch [B, T, V+1]."""
    b, t, c = lattice.shape
    grad = np.zeros_like(lattice.data)
    total = 0.0
    for i, (y, n) in enumerate(zip(targets, lengths)):
        li, gi = ctc_forward_backward(lattice.data[i, :n], y)
        total += li
        grad[i, :n] = gi
    grad /= b
    return make_op(np.array(total / b), (lattice,), lambda g: (g * grad,))


def greedy_decode(lattice) -> list:
    """Best-path decoding: per-frame argmax (ties to the lower id), collapse
    repeats, drop blanks."""
    lp = lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice)
    path = lp.argmax(axis=-1)
    out = []
    prev = None
    for k in path.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


# -- WER -----------------------------------------------------------------------


@dataclass
class WERResult:
    wer: float
    sub: int
    ins: int
    dele: int

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dele


def edit_counts(reference: Sequence, hypothesis: Sequence) -> tuple:
    """Unit-cost Levenshtein alignment; returns (sub, ins, del).

    The backtrace prefers the diagonal (match/substitution), then deletion,
    then insertion, so counts are reproducible.
    """
    r, h = list(reference), list(hypothesis)
    n, m = len(r), len(h)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if r[i - 1] == h[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    sub = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if r[i - 1] == h[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + cost:
                sub += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return sub, ins, dele


def wer(reference: Sequence, hypothesis: Sequence) -> WERResult:
    """(sub + ins + del) / len(reference); may exceed 1."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    sub, ins, dele = edit_counts(reference, hypothesis)
    return WERResult((sub + ins + dele) / len(reference), sub, ins, dele)


def corpus_wer(references: Sequence[Sequence], hypotheses: Sequence[Sequence]) -> WERResult:
    """Pooled WER: total edits over total reference length."""
    sub = ins = dele = words = 0
    for ref, hyp in zip(references, hypotheses):
        s, i, d = edit_counts(ref, hyp)
        sub, ins, dele, words = sub + s, ins + i, dele + d, words + len(ref)
    if words == 0:
        raise ValueError("references must be non-empty")
    return WERResult((sub + ins + dele) / words, sub, ins, dele)


# -- total loss ------------------------------------------------------------------


@dataclass
class LossBreakdown:
    ctc: float
    gate_l1: float
    ve: float = 0.0
    va: float = 0.0
    total: float = 0.0


def total_loss(ctc: Tensor, gate_l1_values: Sequence[Tensor], l1_weight: float = 1.0):
    """CTC plus the weighted mean gate L1 term; the visual-enhancement and
    visual-alignment terms are disabled hooks fixed at zero.

    Returns (total tensor, LossBreakdown).
    """
    total = ctc
    l1_val = 0.0
    if gate_l1_values and l1_weight:
        l1 = T.scale(gate_l1_values[0], 1.0)
        for v in gate_l1_values[1:]:
            l1 = T.add(l1, v)
        l1 = T.scale(l1, l1_weight / len(gate_l1_values))
        l1_val = l1.item()
        total = T.add(ctc, l1)
    return total, LossBreakdown(ctc.item(), l1_val, 0.0, 0.0, ctc.item() + l1_val)
