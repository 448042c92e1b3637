"""Training, evaluation, checkpoints and metrics logging."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Episode, augment, estimate_flows, load_split
from .model import Recognizer, make_batch
from .optim import Adam, AdamState
from .sequence import corpus_wer, ctc_loss_batch, greedy_decode, total_loss
from .tensor import Tape

CHECKPOINT_VERSION = 1
METRIC_FIELDS = (
    "epoch",
    "lr",
    "loss_total",
    "loss_ctc",
    "loss_gate_l1",
    "loss_ve",
    "loss_va",
    "dev_wer",
    "dev_sub",
    "dev_ins",
    "dev_del",
    "gate_density",
    "dev_gate_density",
    "degenerate_rows",
)
_PURPOSES = {"init": 1, "shuffle": 2, "augment": 3, "coin": 4}


class TrainingDiverged(FloatingPointError):
    pass


def stream(seed: int, purpose: str, epoch: int = 0) -> np.random.Generator:
    """Independent generator per (seed, purpose, epoch); resuming at an epoch
    boundary therefore needs no saved generator state."""
    return np.random.default_rng([seed, _PURPOSES[purpose], epoch])


# -- data ----------------------------------------------------------------------

_DATA_CACHE: dict = {}


def _with_estimated_flows(ep: Episode, radius: int) -> Episode:
    return Episode(ep.frames, estimate_flows(ep.frames, radius), ep.reference, ep.seed, ep.vocab_size, ep.spans)


def load_data(cfg: RunConfig) -> tuple:
    """(train, dev) episode lists for ``cfg``; cached per process."""
    key = (str(Path(cfg.data_dir).resolve()), cfg.train_limit, cfg.dev_limit, cfg.flow_source, cfg.search_radius)
    if key not in _DATA_CACHE:
        train = load_split(cfg.data_dir, "train", cfg.train_limit)
        dev = load_split(cfg.data_dir, "dev", cfg.dev_limit)
        if not train or not dev:
            raise ValueError(f"dataset at {cfg.data_dir} has an empty train or dev split")
        if cfg.flow_source == "estimated":
            train = [_with_estimated_flows(ep, cfg.search_radius) for ep in train]
            dev = [_with_estimated_flows(ep, cfg.search_radius) for ep in dev]
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = (train, dev)
    train, dev = _DATA_CACHE[key]
    for ep in train[:1] + dev[:1]:
        if ep.vocab_size != cfg.vocab_size:
            raise ValueError(f"dataset vocabulary {ep.vocab_size} does not match config vocab_size {cfg.vocab_size}")
    return train, dev


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict  # name -> ndarray
    adam: AdamState
    epoch: int  # last completed epoch
    best_wer: float = float("inf")
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned npz with named tensors, written to a temp file then renamed."""
    arrays = {
        "format_version": np.array(ckpt.version),
        "config": np.frombuffer(ckpt.config.to_text().encode(), dtype=np.uint8),
        "epoch": np.array(ckpt.epoch),
        "best_wer": np.array(ckpt.best_wer),
        "adam_step": np.array(ckpt.adam.step),
    }
    for name, value in ckpt.params.items():
        arrays[f"param/{name}"] = value
    for name, value in ckpt.adam.m.items():
        arrays[f"adam_m/{name}"] = value
    for name, value in ckpt.adam.v.items():
        arrays[f"adam_v/{name}"] = value
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path)) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = RunConfig.from_text(z["config"].tobytes().decode())
        params, m, v = {}, {}, {}
        for key in z.files:
            group, _, name = key.partition("/")
            if group == "param":
                params[name] = z[key].copy()
            elif group == "adam_m":
                m[name] = z[key].copy()
            elif group == "adam_v":
                v[name] = z[key].copy()
        return Checkpoint(cfg, params, AdamState(int(z["adam_step"]), m, v), int(z["epoch"]), float(z["best_wer"]), version)


def build_model(cfg: RunConfig, params: Optional[dict] = None) -> Recognizer:
    model = Recognizer(cfg.model_config(), stream(cfg.seed, "init"))
    if params is not None:
        named = model.named_parameters()
        if set(named) != set(params):
            missing = sorted(set(named) ^ set(params))[:5]
            raise ValueError(f"checkpoint parameters do not match the model: {missing}")
        for name, tensor in named.items():
            if tensor.shape != params[name].shape:
                raise ValueError(f"parameter {name}: checkpoint {params[name].shape} vs model {tensor.shape}")
            tensor.data[...] = params[name]
    return model


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    wer: float
    sub: int
    ins: int
    dele: int
    gate_density: float
    degenerate: int
    episodes: int
    hypotheses: list = field(default_factory=list)

    def lines(self) -> list:
        return [
            f"episodes        {self.episodes}",
            f"wer             {self.wer:.4f}",
            f"sub/ins/del     {self.sub}/{self.ins}/{self.dele}",
            f"gate density    {self.gate_density:.4f}",
            f"degenerate rows {self.degenerate}",
        ]


def decode_batch(lattice: np.ndarray, lengths: Sequence[int]) -> list:
    return [greedy_decode(lattice[i, :n]) for i, n in enumerate(lengths)]


def evaluate(model: Recognizer, episodes: Sequence[Episode], batch_size: int = 8, lattice_fn: Optional[Callable] = None) -> EvalReport:
    """Deterministic evaluation: hard gates, no augmentation, no coins.

    ``lattice_fn(batch)`` may replace the model's lattice (used to check the
    decode and scoring path in isolation).
    """
    hyps, densities, degenerate = [], [], 0
    for i in range(0, len(episodes), batch_size):
        batch = make_batch(episodes[i : i + batch_size])
        if lattice_fn is not None:
            lattice = lattice_fn(batch)
        else:
            with T.no_grad():
                res = model(batch, training=False)
            lattice = res.lattice.data
            if res.density:
                densities.append(res.mean_density)
            degenerate += res.degenerate
        hyps.extend(decode_batch(lattice, batch.lengths))
    w = corpus_wer([ep.reference for ep in episodes], hyps)
    density = float(np.mean(densities)) if densities else float("nan")
    return EvalReport(w.wer, w.sub, w.ins, w.dele, density, degenerate, len(episodes), hyps)


# -- metrics log ---------------------------------------------------------------


def _format_metric(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_FIELDS)
        writer.writerow([_format_metric(row[k]) for k in METRIC_FIELDS])


def truncate_metrics(path: Path, last_epoch: int) -> None:
    """Drop rows after ``last_epoch`` (left behind by an interrupted run)."""
    if not path.exists():
        return
    rows = list(csv.reader(io.StringIO(path.read_text())))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_epoch]
    buf = io.StringIO()
    csv.writer(buf).writerows(kept)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    config: RunConfig
    model: Recognizer
    history: list
    best_wer: float
    final: Optional[EvalReport]
    out_dir: Path


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.milestones if epoch > m)
    return cfg.lr / cfg.lr_decay**passed


def train(
    cfg: RunConfig,
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
    log: Callable[[str], None] = print,
) -> TrainResult:
    """Train per ``cfg``; writes ``metrics.csv``, ``last.ckpt`` and ``best.ckpt``
    into ``cfg.out_dir``. ``stop_after`` ends the run early after that epoch
    (the schedule still follows ``cfg.epochs``)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    train_set, dev_set = load_data(cfg)

    start_epoch, best = 0, float("inf")
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.config.to_text() != cfg.to_text():
            cfg = ckpt.config.replace(out_dir=cfg.out_dir)
        model = build_model(cfg, ckpt.params)
        opt = _optimizer(cfg, model)
        opt.state = ckpt.adam
        start_epoch, best = ckpt.epoch, ckpt.best_wer
        truncate_metrics(metrics_path, start_epoch)
    else:
        if metrics_path.exists():
            metrics_path.unlink()
        model = build_model(cfg)
        opt = _optimizer(cfg, model)
    (out / "config.txt").write_text(cfg.to_text())

    history = read_metrics(metrics_path) if metrics_path.exists() else []
    report = None
    last = min(cfg.epochs, stop_after) if stop_after is not None else cfg.epochs
    for epoch in range(start_epoch + 1, last + 1):
        opt.lr = learning_rate(cfg, epoch)
        stats = _run_epoch(cfg, model, opt, train_set, epoch)
        evaluate_now = (cfg.eval_every and epoch % cfg.eval_every == 0) or epoch == cfg.epochs
        report = evaluate(model, dev_set, cfg.batch_size) if evaluate_now else None
        row = {
            "epoch": epoch,
            "lr": opt.lr,
            **stats,
            "dev_wer": report.wer if report else float("nan"),
            "dev_sub": report.sub if report else -1,
            "dev_ins": report.ins if report else -1,
            "dev_del": report.dele if report else -1,
            "dev_gate_density": report.gate_density if report else float("nan"),
        }
        append_metrics(metrics_path, row)
        history.append({k: _format_metric(v) for k, v in row.items()})
        if report is not None and report.wer < best:
            best = report.wer
            save_checkpoint(out / "best.ckpt", _snapshot(cfg, model, opt, epoch, best))
        save_checkpoint(out / "last.ckpt", _snapshot(cfg, model, opt, epoch, best))
        log(
            f"epoch {epoch:3d} lr {opt.lr:.2e} loss {stats['loss_total']:.4f} "
            f"ctc {stats['loss_ctc']:.4f} density {stats['gate_density']:.3f} "
            + (f"dev wer {report.wer:.4f}" if report else "")
        )
    return TrainResult(cfg, model, history, best, report, out)


def _optimizer(cfg: RunConfig, model: Recognizer) -> Adam:
    return Adam(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)


def _snapshot(cfg, model, opt, epoch, best) -> Checkpoint:
    params = {k: v.data.copy() for k, v in model.named_parameters().items()}
    adam = AdamState(opt.state.step, {k: v.copy() for k, v in opt.state.m.items()}, {k: v.copy() for k, v in opt.state.v.items()})
    return Checkpoint(cfg, params, adam, epoch, best)


def _run_epoch(cfg: RunConfig, model: Recognizer, opt: Adam, episodes: Sequence[Episode], epoch: int) -> dict:
    order = stream(cfg.seed, "shuffle", epoch).permutation(len(episodes))
    aug_rng = stream(cfg.seed, "augment", epoch)
    coin_rng = stream(cfg.seed, "coin", epoch)
    sums = {"loss_total": 0.0, "loss_ctc": 0.0, "loss_gate_l1": 0.0, "loss_ve": 0.0, "loss_va": 0.0}
    densities, degenerate, batches = [], 0, 0
    for start in range(0, len(order), cfg.batch_size):
        chosen = [episodes[i] for i in order[start : start + cfg.batch_size]]
        batch = make_batch([augment(ep, aug_rng, cfg.flip_prob, cfg.temporal_rescale) for ep in chosen])
        coins = coin_rng.integers(0, 2, size=(batch.size, max(model.block_count, 1)))
        with Tape() as tape:
            res = model(batch, training=True, coins=coins)
            ctc = ctc_loss_batch(res.lattice, batch.references, batch.lengths)
            loss, parts = total_loss(ctc, res.l1, cfg.lambda_l1)
        if not np.isfinite(parts.total):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}, batch {batches}; episode seeds {[ep.seed for ep in chosen]}"
            )
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        for key, value in (("loss_total", parts.total), ("loss_ctc", parts.ctc), ("loss_gate_l1", parts.gate_l1)):
            sums[key] += value
        if res.density:
            densities.append(res.mean_density)
        degenerate += res.degenerate
        batches += 1
    stats = {k: v / max(batches, 1) for k, v in sums.items()}
    stats["gate_density"] = float(np.mean(densities)) if densities else float("nan")
    stats["degenerate_rows"] = degenerate
    return stats
