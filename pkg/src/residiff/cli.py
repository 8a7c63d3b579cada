"""Command-line entry point.

Subcommands cover the whole workflow:

    gen-data     synthesize a paired phantom dataset with a train/eval split
    train        joint training with checkpoints and a metrics stream
    reconstruct  full-volume inference from a checkpoint (optionally averaged)
    evaluate     PSNR/SSIM/NMSE tables for reconstructed volumes
    ablate       train and compare the component-ablation variants

Configuration comes from a YAML file plus flag overrides; every command
validates its configuration fully before touching data or allocating
compute. All randomness flows from --seed (a random one is drawn and
printed when omitted). Exit codes: 0 success, 2 configuration errors,
3 data/file errors, 4 runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import secrets
import sys
from pathlib import Path

import numpy as np

from . import ablation as ablation_mod
from .config import RunConfig, apply_overrides, load_config
from .data import (
    VolumeMeta,
    generate_dataset,
    load_manifest,
    load_volume,
    save_volume,
)
from .errors import DataError, ParameterError, ToolkitError
from .metrics import evaluate_volume, sd_summary
from .pipeline import load_checkpoint, reconstruct_volume, run_training

logger = logging.getLogger(__name__)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="master seed (random if omitted)")
    parser.add_argument("--out-dir", type=Path, default=None, help="output directory")
    parser.add_argument(
        "--log-level",
        default="info",
        choices=["debug", "info", "warning", "error"],
        help="logging verbosity",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbelow(2**31)
    print(f"seed: {seed}")
    return seed


def _load_run_config(args, seed: int) -> RunConfig:
    cfg = load_config(args.config)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    cfg = cfg.replace_section("train", seed=seed)
    cfg = cfg.replace_section("sample", seed=seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="residiff",
        description="coarse-to-fine residual diffusion toolkit for low-dose volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    _common_flags(p)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--size", type=int, nargs=3, default=[64, 64, 64], metavar=("D", "H", "W"))
    p.add_argument("--drf", type=float, default=100.0, help="dose reduction factor")
    p.add_argument("--count-scale", type=float, default=1e4)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model")
    _common_flags(p)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weights.m", dest="weight_m", type=float, default=None)
    p.add_argument("--weights.n", dest="weight_n", type=float, default=None)
    p.add_argument("--weights.k", dest="weight_k", type=float, default=None)
    p.add_argument("--detach-residual", action="store_true", default=None)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct volumes from a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, nargs="+", required=True, help=".pvol volume(s)")
    p.add_argument("--steps", type=int, default=None, help="inference steps")
    p.add_argument("--ams", type=int, default=None, help="samples to average")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="evaluate reconstructions against targets")
    _common_flags(p)
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--target-dir", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _common_flags(p)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument(
        "--variants",
        default=",".join(ablation_mod.VARIANT_ORDER),
        help="comma-separated variant names",
    )
    p.add_argument("--iterations", type=int, default=None, help="shared training budget")
    p.add_argument("--ams", type=int, default=4)
    p.add_argument("--max-eval-subjects", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def cmd_gen_data(args) -> int:
    seed = _resolve_seed(args)
    if args.out_dir is None:
        raise ParameterError("gen-data requires --out-dir")
    manifest = generate_dataset(
        out_dir=args.out_dir,
        n_subjects=args.n_subjects,
        size=tuple(args.size),
        drf=args.drf,
        seed=seed,
        count_scale=args.count_scale,
        eval_fraction=args.eval_fraction,
        force=args.force,
    )
    n_eval = sum(1 for s in manifest["subjects"] if s["split"] == "eval")
    print(
        f"wrote {len(manifest['subjects'])} paired volumes "
        f"({len(manifest['subjects']) - n_eval} train / {n_eval} eval) to {args.out_dir}"
    )
    return 0


def cmd_train(args) -> int:
    explicit_flags = any(
        v is not None
        for v in (
            args.iterations,
            args.batch_size,
            args.lr,
            args.weight_m,
            args.weight_n,
            args.weight_k,
            args.detach_residual,
        )
    )
    if args.resume is not None and args.config is None and not args.overrides and not explicit_flags:
        # continue under the checkpoint's stored configuration
        final = run_training(None, args.data_dir, args.out_dir or Path("runs/train"), resume=args.resume)
        print(f"final checkpoint: {final}")
        return 0
    seed = _resolve_seed(args)
    cfg = _load_run_config(args, seed)
    train_updates = {}
    if args.iterations is not None:
        train_updates["iterations"] = args.iterations
    if args.batch_size is not None:
        train_updates["batch_size"] = args.batch_size
    if args.lr is not None:
        train_updates["learning_rate"] = args.lr
    if args.detach_residual:
        train_updates["detach_residual"] = True
    if train_updates:
        cfg = cfg.replace_section("train", **train_updates)
    weight_updates = {}
    if args.weight_m is not None:
        weight_updates["m"] = args.weight_m
    if args.weight_n is not None:
        weight_updates["n"] = args.weight_n
    if args.weight_k is not None:
        weight_updates["k"] = args.weight_k
    if weight_updates:
        cfg = cfg.replace_section("losses", **weight_updates)
    out_dir = args.out_dir or Path("runs/train")
    final = run_training(cfg, args.data_dir, out_dir, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def _output_stem(path: Path) -> str:
    stem = path.name[: -len(".pvol")] if path.name.endswith(".pvol") else path.stem
    if stem.endswith("_lpet"):
        stem = stem[: -len("_lpet")]
    return stem


def cmd_reconstruct(args) -> int:
    seed = _resolve_seed(args)
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    sample_updates = {"seed": seed}
    if args.steps is not None:
        sample_updates["n_inference_steps"] = args.steps
    if args.ams is not None:
        sample_updates["n_samples_for_ams"] = args.ams
    cfg = cfg.replace_section("sample", **sample_updates)
    for path in args.input:
        volume, meta = load_volume(path)
        rpet, sd = reconstruct_volume(state.model, volume, cfg, state.schedule)
        out_dir = args.out_dir or path.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = _output_stem(path)
        rpet_path = save_volume(
            out_dir / f"{stem}.rpet.pvol",
            rpet,
            VolumeMeta(meta.subject_id, meta.voxel_size_mm, drf=meta.drf, kind="rpet"),
        )
        sd_path = save_volume(
            out_dir / f"{stem}.sd.pvol",
            sd,
            VolumeMeta(meta.subject_id, meta.voxel_size_mm, drf=meta.drf, kind="sd"),
        )
        print(f"{path} -> {rpet_path}, {sd_path}")
    return 0


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred_dir)
    target_dir = Path(args.target_dir)
    preds = sorted(pred_dir.glob("*.rpet.pvol"))
    if not preds:
        raise DataError(f"no *.rpet.pvol files in {pred_dir}")
    manifest = load_manifest(target_dir)
    by_id = {s["id"]: s for s in manifest["subjects"]}

    rows = []
    lpet_rows = []
    for pred_path in preds:
        rpet, meta = load_volume(pred_path)
        entry = by_id.get(meta.subject_id)
        if entry is None:
            raise DataError(f"subject {meta.subject_id!r} not present in {target_dir}")
        spet, _ = load_volume(target_dir / entry["spet"])
        report = evaluate_volume(rpet, spet)
        row = {"subject": meta.subject_id, "kind": "rpet", **report.to_dict()}
        sd_path = pred_path.with_name(pred_path.name.replace(".rpet.pvol", ".sd.pvol"))
        if sd_path.exists():
            row["sd"] = sd_summary(load_volume(sd_path)[0])
        rows.append(row)
        lpet, _ = load_volume(target_dir / entry["lpet"])
        lpet_rows.append(
            {"subject": meta.subject_id, "kind": "lpet", **evaluate_volume(lpet, spet).to_dict()}
        )

    def _mean_row(kind: str, rs: list[dict]) -> dict:
        psnrs = [math.inf if r["psnr_db"] == "inf" else r["psnr_db"] for r in rs]
        return {
            "subject": "MEAN",
            "kind": kind,
            "psnr_db": float(np.mean(psnrs)),
            "ssim": float(np.mean([r["ssim"] for r in rs])),
            "nmse": float(np.mean([r["nmse"] for r in rs])),
            "n_slices": int(np.sum([r["n_slices"] for r in rs])),
        }

    all_rows = rows + [_mean_row("rpet", rows)] + lpet_rows + [_mean_row("lpet", lpet_rows)]
    header = f"{'subject':<12}{'kind':<6}{'psnr_db':>10}{'ssim':>9}{'nmse':>10}{'slices':>8}"
    print(header)
    for row in all_rows:
        psnr_val = math.inf if row["psnr_db"] == "inf" else row["psnr_db"]
        print(
            f"{row['subject']:<12}{row['kind']:<6}{_fmt(psnr_val):>10}"
            f"{row['ssim']:>9.4f}{row['nmse']:>10.4f}{row['n_slices']:>8}"
        )
    out_path = (args.out_dir or pred_dir) / "evaluation.jsonl"
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in all_rows:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {out_path}")
    return 0


def cmd_ablate(args) -> int:
    seed = _resolve_seed(args)
    cfg = _load_run_config(args, seed)
    if args.iterations is not None:
        cfg = cfg.replace_section("train", iterations=args.iterations)
    out_dir = args.out_dir or Path("runs/ablation")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = ablation_mod.run_ablation(
        cfg,
        args.data_dir,
        out_dir,
        variants=variants,
        ams_samples=args.ams,
        max_eval_subjects=args.max_eval_subjects,
    )
    print(ablation_mod.format_table(rows))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ToolkitError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
