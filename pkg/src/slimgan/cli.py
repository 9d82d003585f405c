"""Operator surface: gen-data, train, ablate, eval, count, plot.

Exit codes: 0 success, 2 config error, 3 divergence abort, 4 I/O error.
Every subcommand validates its configuration fully before any compute, so an
invalid invocation never creates a run directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass

from .core import (
    ConfigError,
    CorruptionError,
    DataError,
    DivergenceError,
    ParameterSet,
    RunConfig,
    apply_setting,
    load_config,
    seeded_rng,
)
from .data import DatasetSpec, write_dataset_folder
from .evaluation import EMBEDDER_NOTE, count_macs, count_params, desk_fid
from .nets import GeneratorSpec, build_generator
from .report import plot_ablation, plot_metrics, render_ablation_table, write_ablation_csv

LOSS_COMBOS = (
    ("per",),
    ("dcd",),
    ("gan",),
    ("per", "dcd"),
    ("per", "gan"),
    ("dcd", "gan"),
    ("per", "dcd", "gan"),
)


@dataclass(frozen=True)
class AblationGrid:
    """Rows of the sweep harness: the 7 loss combinations plus lambda sweeps."""

    combos: tuple = LOSS_COMBOS
    lambda_dcd_values: tuple = (0.1, 1.0, 5.0, 10.0)
    lambda_stu_values: tuple = (0.1, 1.0, 10.0)

    def __post_init__(self):
        if len(self.combos) != 7 or len(set(self.combos)) != 7:
            raise ConfigError("the loss-combination grid must hold the 7 distinct non-empty combos")


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        key, raw = kv.split("=", 1)
        apply_setting(cfg, key, raw)
    return cfg


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    if args.task:
        apply_setting(cfg, "task", args.task)
    if args.n is not None:
        apply_setting(cfg, "n_train", str(args.n))
    if args.n_eval is not None:
        apply_setting(cfg, "n_eval", str(args.n_eval))
    if args.seed is not None:
        apply_setting(cfg, "seed", str(args.seed))
    if args.resolution is not None:
        apply_setting(cfg, "resolution", str(args.resolution))
    if cfg.task == "folder":
        raise ConfigError("gen-data renders synthetic tasks; valid tasks: paired_edges2blobs, unpaired_palette_shift")
    cfg.validate()
    spec = DatasetSpec.from_config(cfg)
    manifest = write_dataset_folder(spec, args.out)
    print(f"wrote {cfg.n_train}+{cfg.n_eval} items to {args.out}")
    print(f"dataset digest {manifest['digest']}")
    return 0


def cmd_train(args) -> int:
    from .trainer import fit, latest_checkpoint, load_checkpoint

    if args.resume:
        ckpt = latest_checkpoint(args.resume)
        cfg, _, _ = load_checkpoint(ckpt)
        cfg.validate()
        result = fit(cfg, args.resume, resume_from=ckpt)
    else:
        cfg = _build_config(args)
        cfg.validate()
        if cfg.task == "folder" and not os.path.isdir(cfg.data_dir):
            raise DataError(f"data_dir does not exist: {cfg.data_dir}")
        result = fit(cfg, args.out)
    print(f"run dir: {result.run_dir}")
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"final desk-FID: {result.final_desk_fid:.4f}  ({EMBEDDER_NOTE})")
    return 0


def build_ablation_jobs(grid: AblationGrid, which: str):
    """(combo label, lambda_overrides label, config overrides) per row."""
    jobs = []
    if which in ("combos", "all"):
        for combo in grid.combos:
            jobs.append((",".join(combo), "", {"loss_set": ",".join(combo)}))
    if which in ("lambda_dcd", "all"):
        for v in grid.lambda_dcd_values:
            jobs.append(("per,dcd,gan", f"lambda_dcd={v:g}", {"lambda_dcd": v}))
    if which in ("lambda_stu", "all"):
        for v in grid.lambda_stu_values:
            jobs.append(("per,dcd,gan", f"lambda_stu={v:g}", {"lambda_stu": v}))
    if not jobs:
        raise ConfigError(f"unknown grid {which!r}; valid: combos, lambda_dcd, lambda_stu, all")
    return jobs


def run_ablation(cfg: RunConfig, grid: AblationGrid, which: str, out_dir: str):
    from .trainer import fit

    jobs = build_ablation_jobs(grid, which)
    rows = []
    for idx, (combo, lam_label, overrides) in enumerate(jobs):
        row_cfg = dataclasses.replace(cfg, seed=cfg.seed + idx)
        for k, v in overrides.items():
            setattr(row_cfg, k, v)
        row_dir = os.path.join(out_dir, "runs", f"{idx:02d}_{combo.replace(',', '+')}" + (f"_{lam_label}" if lam_label else ""))
        steps = row_cfg.epochs * (row_cfg.n_train // row_cfg.batch_size)
        try:
            result = fit(row_cfg, row_dir)
            fid, status = result.final_desk_fid, "ok"
        except Exception as e:  # per-run failures recorded, sweep continues
            fid, status = float("nan"), f"failed:{type(e).__name__}"
        rows.append(
            {
                "combo": combo,
                "lambda_overrides": lam_label,
                "seed": row_cfg.seed,
                "steps": steps,
                "desk_fid": fid,
                "status": status,
            }
        )
        fid_s = f"{fid:.4f}" if math.isfinite(fid) else "-"
        print(f"[{idx + 1}/{len(jobs)}] {combo} {lam_label} -> desk-FID {fid_s} ({status})")
    return rows


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    cfg.validate()
    grid = AblationGrid()
    build_ablation_jobs(grid, args.grid)  # validate the grid name before compute
    os.makedirs(args.out, exist_ok=True)
    rows = run_ablation(cfg, grid, args.grid, args.out)
    write_ablation_csv(rows, os.path.join(args.out, "ablation.csv"))
    table = render_ablation_table(rows)
    with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    plot_ablation(rows, os.path.join(args.out, "ablation.png"))
    print(table)
    print(f"({EMBEDDER_NOTE})")
    return 0


def cmd_eval(args) -> int:
    from .trainer import build_models, load_checkpoint, restore_from_checkpoint, TrainState, _load_datasets
    from .nets import store_set_digest

    cfg, info, arrays = load_checkpoint(args.checkpoint)
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        key, raw = kv.split("=", 1)
        if key.strip() == "resolution":
            override = int(raw)
            if override != cfg.resolution:
                raise ConfigError(
                    f"resolution {override} does not match the checkpoint's {cfg.resolution}"
                )
        apply_setting(cfg, key, raw)
    cfg.validate()
    models = build_models(cfg)
    state = TrainState()
    restore_from_checkpoint(models, state, arrays, info, cfg.torch_dtype())
    _, (eval_a, eval_b) = _load_datasets(cfg)
    n = min(cfg.n_eval, len(eval_a), len(eval_b))
    rep = desk_fid(models.student_gen, eval_a, eval_b, models.embedder, n_samples=n)
    complexity = count_macs(models.student_gen, cfg.resolution)
    payload = {
        "desk_fid": rep.value,
        "n_samples": rep.n_samples,
        "embedder_digest": rep.embedder_digest,
        "checkpoint_digest": info.get("set_digest") or store_set_digest(args.checkpoint),
        "note": rep.note,
        "student_complexity": complexity.as_json(),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_count(args) -> int:
    cfg = _build_config(args)
    cfg.validate()
    res = args.resolution or cfg.resolution
    reports = {}
    for role, wf in (("teacher", 1.0), ("student", cfg.width_factor)):
        spec = GeneratorSpec(
            base_width=cfg.base_width,
            n_resblocks=cfg.n_resblocks,
            width_factor=wf,
            in_channels=cfg.in_channels,
            out_channels=cfg.out_channels,
        )
        model, _ = build_generator(spec, seeded_rng(0, f"count/{role}"))
        reports[role] = count_macs(model, res)
        r = reports[role]
        print(f"{role}: params {r.total_params:,}  macs {r.total_macs:,} @ {res}x{res}")
    pr = reports["teacher"].total_params / reports["student"].total_params
    mr = reports["teacher"].total_macs / reports["student"].total_macs
    print(f"reduction: params ≈ {pr:.1f}x, macs ≈ {mr:.1f}x")
    if args.json:
        payload = {role: r.as_json() for role, r in reports.items()}
        payload["reduction"] = {"params": pr, "macs": mr}
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_plot(args) -> int:
    written = plot_metrics(args.metrics, args.out, evals_path=args.evals)
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slimgan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("gen-data", help="render a synthetic dataset folder")
    common(sp)
    sp.add_argument("--task", help="paired_edges2blobs or unpaired_palette_shift")
    sp.add_argument("--n", type=int, help="training items")
    sp.add_argument("--n-eval", type=int, dest="n_eval", help="eval items")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run a training job")
    common(sp)
    sp.add_argument("--out", help="run directory (required unless --resume)")
    sp.add_argument("--loss-set", dest="loss_set", help="shorthand for --set loss_set=...")
    sp.add_argument("--resume", help="existing run directory to continue")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="sweep loss combinations / lambda values")
    common(sp)
    sp.add_argument("--grid", default="combos", help="combos, lambda_dcd, lambda_stu or all")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="desk-FID + complexity for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", help="write the report JSON here as well")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("count", help="analytic parameter/MAC counts")
    common(sp)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--json", help="write the full per-layer report here")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("plot", help="render metric curves from a JSONL log")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--evals", help="optional evals.jsonl for the desk-FID curve")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train":
        if getattr(args, "loss_set", None):
            args.set = (args.set or []) + [f"loss_set={args.loss_set}"]
        if not args.resume and not args.out:
            parser.error("train requires --out (or --resume)")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (DataError, CorruptionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
