"""Component ablation matrix.

Six variants form the study: a direct-diffusion baseline (one full-size
denoiser sampling the image itself), the coarse predictor alone, the
coarse-plus-refinement pair, and the pair with neighboring-slice
guidance, spectrum guidance, and the contrastive term added one by one.
Rows (b) through (f) form a strict superset chain of enabled components.

Every variant trains under the same seed and budget; the report carries
reconstruction quality (single-sample and averaged multiple sampling),
parameter counts, an analytic per-slice multiply-accumulate cost, and
the per-voxel sampling standard deviation. At reduced budgets the
relative ordering of rows, not their absolute values, is the meaningful
output.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import load_manifest, load_volume
from .diffusion import NoiseSchedule
from .errors import ParameterError
from .metrics import evaluate_volume, sd_summary
from .networks import ModelSpec, ReconstructionModel, count_macs, count_parameters
from .pipeline import (
    condition_channel_count,
    load_checkpoint,
    reconstruct_volume,
    run_training,
)

__all__ = [
    "VARIANT_ORDER",
    "AblationSpec",
    "variant_model_spec",
    "variant_config",
    "enabled_components",
    "inference_cost",
    "evaluate_model",
    "run_ablation",
    "format_table",
]

logger = logging.getLogger(__name__)

VARIANT_ORDER = (
    "baseline_direct",
    "cpm_only",
    "cpm_irm",
    "plus_nas",
    "plus_spectrum",
    "plus_contrastive",
)

_VARIANT_SPECS = {
    "baseline_direct": ModelSpec(
        use_cpm=False, use_irm=True, use_nas=False, use_spectrum=False, use_contrastive=False
    ),
    "cpm_only": ModelSpec(
        use_cpm=True, use_irm=False, use_nas=False, use_spectrum=False, use_contrastive=False
    ),
    "cpm_irm": ModelSpec(
        use_cpm=True, use_irm=True, use_nas=False, use_spectrum=False, use_contrastive=False
    ),
    "plus_nas": ModelSpec(
        use_cpm=True, use_irm=True, use_nas=True, use_spectrum=False, use_contrastive=False
    ),
    "plus_spectrum": ModelSpec(
        use_cpm=True, use_irm=True, use_nas=True, use_spectrum=True, use_contrastive=False
    ),
    "plus_contrastive": ModelSpec(
        use_cpm=True, use_irm=True, use_nas=True, use_spectrum=True, use_contrastive=True
    ),
}

_COMPONENTS = {
    "baseline_direct": frozenset({"direct_diffusion"}),
    "cpm_only": frozenset({"cpm"}),
    "cpm_irm": frozenset({"cpm", "irm"}),
    "plus_nas": frozenset({"cpm", "irm", "nas"}),
    "plus_spectrum": frozenset({"cpm", "irm", "nas", "spectrum"}),
    "plus_contrastive": frozenset({"cpm", "irm", "nas", "spectrum", "contrastive"}),
}


@dataclass(frozen=True)
class AblationSpec:
    """One requested variant plus shared configuration overrides."""

    variant: str
    overrides: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in _VARIANT_SPECS:
            raise ParameterError(
                f"unknown ablation variant {self.variant!r}; known: {', '.join(VARIANT_ORDER)}"
            )


def variant_model_spec(name: str) -> ModelSpec:
    if name not in _VARIANT_SPECS:
        raise ParameterError(f"unknown ablation variant {name!r}")
    return _VARIANT_SPECS[name]


def enabled_components(name: str) -> frozenset[str]:
    if name not in _COMPONENTS:
        raise ParameterError(f"unknown ablation variant {name!r}")
    return _COMPONENTS[name]


def variant_config(base: RunConfig, name: str) -> RunConfig:
    """Adapt a shared configuration to one variant.

    The direct-diffusion baseline gets a denoiser at the coarse
    predictor's channel budget, since it carries the whole reconstruction
    alone.
    """
    spec = variant_model_spec(name)
    cfg = dataclasses.replace(base, model=spec)
    if name == "baseline_direct":
        cfg = cfg.replace_section(
            "networks", denoiser_base_channels=base.networks.cpm_base_channels
        )
    return cfg


def inference_cost(model: ReconstructionModel, cfg: RunConfig, image_hw: tuple[int, int], n_steps: int) -> dict:
    """Analytic per-slice inference cost: parameters and multiply-accumulates.

    The coarse predictor and the feature extractor run once per slice;
    the denoiser runs once per sampling step.
    """
    h, w = image_hw
    cond_ch = condition_channel_count(cfg)
    cond = torch.zeros(1, cond_ch, h, w)
    counters = (
        model.cpm.forward_calls if model.cpm is not None else 0,
        model.denoiser.forward_calls if model.denoiser is not None else 0,
    )
    macs_cpm = 0
    if model.cpm is not None:
        macs_cpm = count_macs(model.cpm, lambda: model.cpm(cond))
    macs_aux = 0
    aux_maps = None
    if model.aux is not None:
        levels = len(cfg.networks.channel_multipliers)
        pyramid = [
            torch.zeros(1, model.aux.cfg.in_channels, h // 2 ** (k + 1), w // 2 ** (k + 1))
            for k in range(levels)
        ]
        macs_aux = count_macs(model.aux, lambda: model.aux.extract(pyramid))
        aux_maps = model.aux.extract(pyramid)
    macs_denoiser = 0
    if model.denoiser is not None:
        r_t = torch.zeros(1, 1, h, w)
        macs_denoiser = count_macs(
            model.denoiser, lambda: model.denoiser(cond, r_t, 0.5, aux_maps)
        )
    if model.cpm is not None:
        model.cpm.forward_calls = counters[0]
    if model.denoiser is not None:
        model.denoiser.forward_calls = counters[1]
    steps = n_steps if model.denoiser is not None else 0
    per_slice = macs_cpm + macs_aux + steps * macs_denoiser
    return {
        "params_total": count_parameters(model),
        "params_denoiser": count_parameters(model.denoiser) if model.denoiser else 0,
        "macs_cpm": macs_cpm,
        "macs_aux": macs_aux,
        "macs_denoiser_step": macs_denoiser,
        "macs_per_slice": per_slice,
        "gflops_per_slice": 2.0 * per_slice / 1e9,
    }


def _eval_subject_ids(data_dir: Path) -> list[dict]:
    manifest = load_manifest(data_dir)
    entries = [s for s in manifest["subjects"] if s["split"] == "eval"]
    return sorted(entries, key=lambda e: e["id"])


def evaluate_model(
    model: ReconstructionModel,
    cfg: RunConfig,
    schedule: NoiseSchedule,
    data_dir: str | Path,
    n_samples: int,
    seed: int,
    max_subjects: int | None = None,
) -> dict:
    """Mean reconstruction metrics of a model over the held-out split."""
    data_dir = Path(data_dir)
    entries = _eval_subject_ids(data_dir)
    if max_subjects is not None:
        entries = entries[:max_subjects]
    psnrs, ssims, nmses, sds = [], [], [], []
    for entry in entries:
        lpet, _ = load_volume(data_dir / entry["lpet"])
        spet, _ = load_volume(data_dir / entry["spet"])
        rpet, sd = reconstruct_volume(
            model,
            lpet,
            cfg,
            schedule,
            n_samples=n_samples,
            seed=seed,
        )
        report = evaluate_volume(rpet, spet)
        psnrs.append(report.psnr_db)
        ssims.append(report.ssim)
        nmses.append(report.nmse)
        sds.append(sd_summary(sd))
    return {
        "psnr_db": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "nmse": float(np.mean(nmses)),
        "sd": float(np.mean(sds)),
        "n_subjects": len(entries),
    }


def run_ablation(
    base_cfg: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    variants: list[str] | None = None,
    ams_samples: int = 4,
    max_eval_subjects: int | None = None,
) -> list[dict]:
    """Train and evaluate the requested variants under a shared budget."""
    names = list(variants) if variants else list(VARIANT_ORDER)
    for name in names:
        if name not in _VARIANT_SPECS:
            raise ParameterError(f"unknown ablation variant {name!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    h, w = manifest["size"][1], manifest["size"][2]

    report_path = out_dir / "ablation.jsonl"
    report_path.write_text("")
    rows = []
    for name in names:
        cfg = variant_config(base_cfg, name)
        variant_dir = out_dir / name
        logger.info("training ablation variant %s", name)
        final = run_training(cfg, data_dir, variant_dir)
        state = load_checkpoint(final)
        model, schedule = state.model, state.schedule
        cost = inference_cost(
            model, cfg, (h, w), cfg.sample.n_inference_steps
        )
        single = evaluate_model(
            model,
            cfg,
            schedule,
            data_dir,
            n_samples=1,
            seed=cfg.sample.seed,
            max_subjects=max_eval_subjects,
        )
        row = {
            "variant": name,
            "psnr_db": single["psnr_db"],
            "ssim": single["ssim"],
            "nmse": single["nmse"],
            "mparam_total": cost["params_total"] / 1e6,
            "mparam_denoiser": cost["params_denoiser"] / 1e6,
            "gflops_per_slice": cost["gflops_per_slice"],
        }
        if model.denoiser is not None and ams_samples > 1:
            ams = evaluate_model(
                model,
                cfg,
                schedule,
                data_dir,
                n_samples=ams_samples,
                seed=cfg.sample.seed,
                max_subjects=max_eval_subjects,
            )
            row.update(
                {
                    "ams_psnr_db": ams["psnr_db"],
                    "ams_ssim": ams["ssim"],
                    "ams_nmse": ams["nmse"],
                    "ams_sd": ams["sd"],
                }
            )
        rows.append(row)
        with open(report_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")
    return rows


def format_table(rows: list[dict]) -> str:
    """Stable fixed-width report, one row per variant in canonical order."""
    order = {name: i for i, name in enumerate(VARIANT_ORDER)}
    rows = sorted(rows, key=lambda r: order.get(r["variant"], 99))
    headers = [
        ("variant", 22),
        ("psnr_db", 9),
        ("ssim", 8),
        ("nmse", 9),
        ("mparam_total", 13),
        ("mparam_denoiser", 16),
        ("gflops_per_slice", 17),
        ("ams_psnr_db", 12),
        ("ams_sd", 10),
    ]
    lines = ["".join(h.ljust(width) for h, width in headers)]
    for row in rows:
        cells = []
        for key, width in headers:
            value = row.get(key)
            if value is None:
                cells.append("-".ljust(width))
            elif isinstance(value, float):
                if math.isinf(value):
                    cells.append("inf".ljust(width))
                else:
                    cells.append(f"{value:.4f}".ljust(width))
            else:
                cells.append(str(value).ljust(width))
        lines.append("".join(cells))
    return "\n".join(lines)
