"""``tcnet`` command line: gen-data, train, eval, ablate, flops, trace."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .block import BlockConfig, flops_count
from .config import RunConfig, load_config, paper_schedule
from .data import default_manifest, default_vocabulary, generate_dataset, generate_episode, load_episode, read_manifest
from .model import make_batch
from .trajectory import make_plan
from .train import build_model, evaluate, load_checkpoint, load_data, train

ABLATION_AXES = {
    "modules": [
        ("baseline", {"trajectory": False, "correlation": False}),
        ("trajectory", {"trajectory": True, "correlation": False}),
        ("correlation", {"trajectory": False, "correlation": True}),
        ("both", {"trajectory": True, "correlation": True}),
    ],
    "combine": [(mode, {"combine": mode, "trajectory": True, "correlation": True}) for mode in ("concat", "sum", "multiply")],
    "subseq": [(f"N={n}", {"horizon": n}) for n in (1, 2, 4, 8, 12, 16)],
}


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, manifest: Optional[str] = None, log=print) -> Path:
    rows = read_manifest(manifest) if manifest else default_manifest(cfg.data_seed, cfg.train_episodes, cfg.dev_episodes)
    vocab = default_vocabulary()
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"the built-in vocabulary has {len(vocab)} glosses, config asks for {cfg.vocab_size}")
    out = Path(cfg.data_dir)
    generate_dataset(rows, out, vocab=vocab, extent=(cfg.frame_size, cfg.frame_size), t_range=(cfg.t_min, cfg.t_max))
    n_train = sum(1 for _, s in rows if s == "train")
    log(f"wrote {n_train} train + {len(rows) - n_train} dev episodes and manifest.tsv to {out}")
    return out


# -- eval ----------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str = "dev", log=print):
    ckpt = load_checkpoint(checkpoint)
    model_cfg = ckpt.config.replace(
        data_dir=cfg.data_dir, train_limit=cfg.train_limit, dev_limit=cfg.dev_limit, flow_source=cfg.flow_source
    )
    train_set, dev_set = load_data(model_cfg)
    episodes = {"train": train_set, "dev": dev_set}[split]
    model = build_model(ckpt.config, ckpt.params)
    report = evaluate(model, episodes, ckpt.config.batch_size)
    for line in report.lines():
        log(line)
    return report


# -- ablate --------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    wers: list
    densities: list

    @property
    def median(self) -> float:
        return float(np.median(self.wers))

    @property
    def median_density(self) -> float:
        vals = [d for d in self.densities if np.isfinite(d)]
        return float(np.median(vals)) if vals else float("nan")


def run_ablation(cfg: RunConfig, axis: str, seeds: Sequence[int], log=print, trainer: Callable = train) -> list:
    """Train every variant of ``axis`` with each seed; returns one row per variant."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    rows = []
    for name, changes in ABLATION_AXES[axis]:
        wers, dens = [], []
        for seed in seeds:
            tag = name.replace("=", "")
            run_cfg = cfg.replace(seed=seed, out_dir=str(Path(cfg.out_dir) / axis / f"{tag}_seed{seed}"), **changes)
            res = trainer(run_cfg, log=lambda s: None)
            wers.append(res.final.wer)
            dens.append(res.final.gate_density)
            log(f"{axis} {name} seed {seed}: dev wer {res.final.wer:.4f}")
        rows.append(AblationRow(name, wers, dens))
    return rows


def format_table(axis: str, rows: Sequence[AblationRow]) -> str:
    head = f"{'variant':<14}{'dev WER (median)':>18}{'gate density':>14}  per-seed WER"
    lines = [f"ablation: {axis}", head, "-" * len(head)]
    for r in rows:
        dens = "-" if not np.isfinite(r.median_density) else f"{r.median_density:.3f}"
        seeds = " ".join(f"{w:.3f}" for w in r.wers)
        lines.append(f"{r.variant:<14}{r.median:>18.4f}{dens:>14}  {seeds}")
    return "\n".join(lines)


def cmd_ablate(cfg: RunConfig, axis: str, seeds: Sequence[int], log=print) -> list:
    rows = run_ablation(cfg, axis, seeds, log)
    table = format_table(axis, rows)
    out = Path(cfg.out_dir) / axis
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table + "\n")
    log(table)
    return rows


# -- flops ---------------------------------------------------------------------


def stage_extents(cfg: RunConfig) -> dict:
    """Spatial extent after each stride-2 stage."""
    size = cfg.frame_size
    out = {}
    for stage in range(1, len(cfg.channels) + 1):
        size = (size + 2 - 3) // 2 + 1
        out[stage] = (size, size)
    return out


def flops_report(cfg: RunConfig, density: float) -> dict:
    """Sum ``flops_count`` over every block of the backbone at one gate density."""
    extents = stage_extents(cfg)
    totals: dict = {}
    per_stage = {}
    for stage in cfg.block_stages:
        bc = BlockConfig(
            channels=cfg.channels[stage - 1],
            window=cfg.window,
            horizon=cfg.horizon,
            heads=cfg.heads,
            combine=cfg.combine,
            trajectory=cfg.trajectory,
            correlation=cfg.correlation,
        )
        counts = flops_count(bc, density, extents[stage])
        per_stage[stage] = counts
        for key in ("affinity_macs", "dense_attention_macs", "sparse_attention_macs", "projection_macs", "total_dense", "total"):
            totals[key] = totals.get(key, 0) + counts[key]
    dense = totals.get("dense_attention_macs", 0)
    totals["attention_ratio"] = totals.get("sparse_attention_macs", 0) / dense if dense else 1.0
    totals["ratio"] = totals["total"] / totals["total_dense"] if totals.get("total_dense") else 1.0
    return {"density": density, "stages": per_stage, "totals": totals}


def format_flops(report: dict) -> str:
    lines = [f"gate density {report['density']:.4f} (multiply-accumulates per frame)"]
    head = f"{'stage':<7}{'extent':>8}{'dense attn':>14}{'sparse attn':>14}{'projections':>14}{'total':>14}"
    lines += [head, "-" * len(head)]
    for stage, c in report["stages"].items():
        lines.append(
            f"{stage:<7}{'':>8}{c['dense_attention_macs']:>14.0f}{c['sparse_attention_macs']:>14.0f}"
            f"{c['projection_macs']:>14.0f}{c['total']:>14.0f}"
        )
    t = report["totals"]
    lines.append(
        f"{'all':<7}{'':>8}{t['dense_attention_macs']:>14.0f}{t['sparse_attention_macs']:>14.0f}"
        f"{t['projection_macs']:>14.0f}{t['total']:>14.0f}"
    )
    lines.append(f"attention sparse/dense ratio {t['attention_ratio']:.4f}")
    lines.append(f"block total sparse/dense ratio {t['ratio']:.4f}")
    return "\n".join(lines)


def measured_density(cfg: RunConfig, checkpoint: str) -> float:
    ckpt = load_checkpoint(checkpoint)
    data_cfg = ckpt.config.replace(data_dir=cfg.data_dir, dev_limit=cfg.dev_limit or 0)
    _, dev = load_data(data_cfg)
    report = evaluate(build_model(ckpt.config, ckpt.params), dev, ckpt.config.batch_size)
    return report.gate_density


def cmd_flops(cfg: RunConfig, density: Optional[float] = None, checkpoint: Optional[str] = None, log=print) -> dict:
    if density is None:
        if checkpoint is None:
            raise ValueError("flops needs --density or --checkpoint")
        density = measured_density(cfg, checkpoint)
    report = flops_report(cfg, density)
    log(format_flops(report))
    return report


# -- trace ---------------------------------------------------------------------


def cmd_trace(cfg: RunConfig, checkpoint: Optional[str], episode: str, out_dir: str, log=print) -> Path:
    """Dump traced trajectories, gate maps and trajectory attention weights
    for one episode as tab-separated tables."""
    if checkpoint:
        ckpt = load_checkpoint(checkpoint)
        run_cfg, params = ckpt.config, ckpt.params
    else:
        run_cfg, params = cfg, None
    ep = load_episode(episode) if Path(episode).exists() else generate_episode(int(episode))
    model = build_model(run_cfg, params)
    batch = make_batch([ep])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    # input-resolution trajectories over the same windows the model sees
    plan = make_plan(batch.flows, batch.lengths, run_cfg.horizon, 1)
    with open(out / "trajectories.tsv", "w") as fh:
        fh.write("frame\ty\tx\tstep\tsource_frame\ttx\tty\n")
        for f in range(ep.length):
            valid = np.nonzero(plan.valid[f])[0]
            coords = plan.coords[f]
            for y in range(coords.shape[0]):
                for x in range(coords.shape[1]):
                    for j in valid:
                        tx, ty = coords[y, x, j]
                        fh.write(f"{f}\t{y}\t{x}\t{j}\t{plan.src_frame[f, j]}\t{tx}\t{ty}\n")

    with T.no_grad():
        res = model(batch, training=False, keep_maps=True)
    with open(out / "gates.tsv", "w") as fh:
        fh.write("stage\tframe\thead\tregion\tquery\tkey\tgate\n")
        for stage, _, gates, _ in res.maps:
            if gates is None:
                continue
            f_idx, h_idx, r_idx, q_idx, k_idx = np.indices(gates.shape).reshape(5, -1)
            vals = gates.reshape(-1)
            for row in zip(f_idx, h_idx, r_idx, q_idx, k_idx, vals):
                fh.write(f"{stage}\t" + "\t".join(str(int(v)) for v in row[:-1]) + f"\t{row[-1]:g}\n")
    with open(out / "attention.tsv", "w") as fh:
        fh.write("stage\tframe\ty\tx\thead\tstep\tweight\n")
        for stage, weights, _, _ in res.maps:
            if weights is None:
                continue
            for idx in np.ndindex(weights.shape):
                fh.write(f"{stage}\t" + "\t".join(str(i) for i in idx) + f"\t{weights[idx]:.6g}\n")
    log(f"wrote trajectories.tsv, gates.tsv and attention.tsv to {out}")
    return out


# -- entry point ---------------------------------------------------------------


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        return p

    p = common(sub.add_parser("gen-data", help="render the synthetic dataset"))
    p.add_argument("--manifest", help="existing manifest to reproduce")
    p = common(sub.add_parser("train", help="train a recognizer"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--paper-schedule", action="store_true", help="80 epochs, decay after 40 and 60")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "dev"), default="dev")
    p = common(sub.add_parser("ablate", help="train variants along one axis"))
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p = common(sub.add_parser("flops", help="multiply-accumulate report"))
    p.add_argument("--density", type=float)
    p.add_argument("--checkpoint")
    p = common(sub.add_parser("trace", help="dump trajectories, gate maps and attention weights"))
    p.add_argument("--checkpoint")
    p.add_argument("--episode", required=True, help="episode file or generator seed")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _parse_set(args.set))
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.manifest)
        elif args.command == "train":
            if args.paper_schedule:
                cfg = paper_schedule(cfg)
            train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.split)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.axis, [int(s) for s in args.seeds.split(",") if s.strip()])
        elif args.command == "flops":
            cmd_flops(cfg, args.density, args.checkpoint)
        elif args.command == "trace":
            cmd_trace(cfg, args.checkpoint, args.episode, args.out)
    except Exception as exc:  # every failure maps to a nonzero exit with a message
        print(f"tcnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
