"""Joint training and full-volume inference.

Training optimizes all components with a single Adam step per iteration:
the coarse prediction enters the noised-residual objective directly (no
detach by default, so the diffusion loss also shapes the coarse
predictor), the guidance heads regress the clean auxiliary pyramids, and
the contrastive term acts on the one-step reconstruction estimate.

Inference reconstructs a volume slice by slice: one coarse-predictor
pass, one auxiliary-feature extraction, then exactly n_inference_steps
denoiser passes walking the subsampled schedule. Averaged multiple
sampling (AMS) repeats the stochastic part with per-sample seeds derived
from (seed, slice, sample), making slice order irrelevant; the per-voxel
standard deviation over samples is reported alongside the mean.

Checkpoints capture models, optimizer, schedule arrays, configs, and all
random-stream states, so a resumed run reproduces the exact loss trace
of an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, save_config
from .data import (
    Batch,
    ConditionInput,
    SliceDataset,
    build_negative_set,
    collate,
    make_condition,
)
from .diffusion import (
    NoiseSchedule,
    forward_sample,
    make_inference_schedule,
    make_schedule,
    reverse_step,
    sample_gamma_train,
)
from .errors import CheckpointError, ConfigurationError, DataError
from .guidance import make_guidance
from .losses import (
    LossWeights,
    NegativeSet,
    intermediate_rpet,
    loss_contrastive,
    loss_guidance,
    loss_main,
    loss_total,
)
from .networks import (
    AuxExtractorConfig,
    AuxFeatureExtractor,
    CoarsePredictor,
    CoarsePredictorConfig,
    Denoiser,
    DenoiserConfig,
    ReconstructionModel,
)
from .seeding import derive_seed, numpy_rng, torch_rng

__all__ = [
    "build_model",
    "train_step",
    "run_training",
    "reconstruct_slice",
    "reconstruct_volume",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_NAME = "metrics.jsonl"
EVAL_NAME = "eval.jsonl"


def condition_channel_count(cfg: RunConfig) -> int:
    channels = 1
    if cfg.model.use_nas:
        channels += cfg.guidance.n_neighbors
    if cfg.model.use_spectrum:
        channels += 1
    return channels


def build_model(cfg: RunConfig, init_seed: int | None = None) -> ReconstructionModel:
    """Construct the model ensemble described by a run configuration.

    Weight initialization is driven by a derived seed so identically
    configured runs start from identical weights.
    """
    spec = cfg.model
    net = cfg.networks
    cond_ch = condition_channel_count(cfg)
    seed = cfg.train.seed if init_seed is None else init_seed
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "model-init"))
        cpm = None
        if spec.use_cpm:
            cpm = CoarsePredictor(
                CoarsePredictorConfig(
                    in_channels=cond_ch,
                    base_channels=net.cpm_base_channels,
                    channel_multipliers=net.channel_multipliers,
                )
            )
        denoiser = None
        if spec.use_irm:
            denoiser = Denoiser(
                DenoiserConfig(
                    in_channels=cond_ch + 1,
                    base_channels=net.denoiser_base_channels,
                    channel_multipliers=net.channel_multipliers,
                    gamma_embedding_dim=net.gamma_embedding_dim,
                    guided_levels=len(net.channel_multipliers) if spec.uses_guidance else 0,
                )
            )
        aux = None
        if spec.uses_guidance:
            aux_in = (cfg.guidance.n_neighbors if spec.use_nas else 0) + (
                1 if spec.use_spectrum else 0
            )
            aux = AuxFeatureExtractor(
                AuxExtractorConfig(
                    in_channels=aux_in,
                    width=net.aux_width,
                    level_channels=tuple(
                        net.denoiser_base_channels * m for m in net.channel_multipliers
                    ),
                )
            )
        return ReconstructionModel(spec, cpm, denoiser, aux)


def _split_guidance_channels(
    tensors: list[torch.Tensor], use_nas: bool, n_neighbors: int, use_spectrum: bool
):
    """Split stacked guidance channels back into (nas, spectrum) pyramids."""
    nas, spec = None, None
    if use_nas:
        nas = [t[:, :n_neighbors] for t in tensors]
    if use_spectrum:
        spec = [t[:, -1:] for t in tensors]
    return nas, spec


def train_step(
    model: ReconstructionModel,
    batch: Batch,
    schedule: NoiseSchedule,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    negatives: NegativeSet | None = None,
    detach_residual: bool = False,
    n_neighbors: int = 4,
) -> dict:
    """One joint optimization step; returns the four per-term loss values."""
    spec = model.spec
    target = batch.target
    b = target.shape[0]

    if model.cpm is not None:
        x_cp = model.cpm(batch.cond.channels)
    else:
        x_cp = torch.zeros_like(target)

    l_nas = 0.0
    l_spec = 0.0
    l_cl = 0.0
    if model.denoiser is not None:
        residual = target - (x_cp.detach() if detach_residual else x_cp)
        draws = [sample_gamma_train(schedule, rng) for _ in range(b)]
        gammas = torch.tensor([d.gamma for d in draws], dtype=target.dtype)
        eps = torch.randn(residual.shape, generator=rng, dtype=target.dtype)
        r_t = forward_sample(residual, gammas, eps)

        aux_maps = None
        if model.aux is not None:
            aux_maps = model.aux.extract(batch.cond.aux_pyramid)
        eps_hat = model.denoiser(batch.cond.channels, r_t, gammas, aux_maps)
        l_main = loss_main(eps_hat, eps)

        if aux_maps is not None and (weights.m > 0.0 or weights.n > 0.0):
            recon = model.aux.reconstruct(aux_maps)
            pred_nas, pred_spec = _split_guidance_channels(
                recon, spec.use_nas, n_neighbors, spec.use_spectrum
            )
            tgt_nas, tgt_spec = _split_guidance_channels(
                batch.target_aux_pyramid, spec.use_nas, n_neighbors, spec.use_spectrum
            )
            if spec.use_nas and weights.m > 0.0:
                l_nas = loss_guidance(pred_nas, tgt_nas)
            if spec.use_spectrum and weights.n > 0.0:
                l_spec = loss_guidance(pred_spec, tgt_spec)

        if spec.use_contrastive and weights.k > 0.0 and negatives is not None:
            y_tilde = intermediate_rpet(x_cp, r_t, eps_hat, gammas)
            l_cl = loss_contrastive(y_tilde, target, negatives.slices * 2.0 - 1.0)
    else:
        # coarse-predictor-only training uses a plain L2 regression
        l_main = ((x_cp - target) ** 2).mean()

    total = loss_total(l_main, l_nas, l_spec, l_cl, weights)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    def _val(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    return {
        "loss_main": _val(l_main),
        "loss_g_nas": _val(l_nas),
        "loss_g_spectrum": _val(l_spec),
        "loss_contrastive": _val(l_cl),
        "loss_total": _val(total),
    }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    model: ReconstructionModel,
    optimizer: torch.optim.Optimizer,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    step: int,
    torch_state: torch.Tensor,
    numpy_state: dict,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": int(step),
        "run_config": cfg.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "schedule_alphas": schedule.alphas,
        "schedule_gammas": schedule.gammas,
        "torch_rng_state": torch_state,
        "numpy_rng_state": numpy_state,
    }
    torch.save(payload, path)
    return path


@dataclass
class RestoredState:
    model: ReconstructionModel
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    cfg: RunConfig
    step: int
    torch_rng: torch.Generator
    numpy_rng: np.random.Generator


def load_checkpoint(path: str | Path, expect_config: RunConfig | None = None) -> RestoredState:
    """Restore a checkpoint; models are rebuilt from the stored configuration.

    Passing `expect_config` verifies that the architecture-defining
    sections match before any weights are loaded.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {version!r} not supported "
            f"(expected {CHECKPOINT_VERSION}); re-train or migrate the file"
        )
    cfg = RunConfig.from_dict(payload["run_config"])
    if expect_config is not None:
        for section in ("networks", "model", "guidance"):
            stored = cfg.to_dict()[section]
            expected = expect_config.to_dict()[section]
            if stored != expected:
                raise ConfigurationError(
                    f"checkpoint {section} configuration {stored} does not match "
                    f"the requested {expected}"
                )
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate)
    optimizer.load_state_dict(payload["optimizer_state"])
    schedule = NoiseSchedule(
        alphas=payload["schedule_alphas"], gammas=payload["schedule_gammas"]
    )
    t_rng = torch.Generator()
    t_rng.set_state(payload["torch_rng_state"])
    n_rng = np.random.default_rng()
    n_rng.bit_generator.state = payload["numpy_rng_state"]
    return RestoredState(
        model=model,
        optimizer=optimizer,
        schedule=schedule,
        cfg=cfg,
        step=int(payload["step"]),
        torch_rng=t_rng,
        numpy_rng=n_rng,
    )


def _truncate_stream(path: Path, last_step: int) -> None:
    """Drop records beyond `last_step` so a resumed stream has no gaps or dupes."""
    if not path.exists():
        return
    kept = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if json.loads(line).get("step", 0) <= last_step:
                kept.append(line)
    with open(path, "w", encoding="utf-8") as fh:
        for line in kept:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# training loop


def _eval_record(
    model: ReconstructionModel,
    dataset: SliceDataset,
    cfg: RunConfig,
    schedule: NoiseSchedule,
    step: int,
    n_slices: int = 8,
) -> dict:
    """Cheap held-out diagnostics: noise-prediction loss and coarse-output PSNR."""
    spec = model.spec
    samples = []
    for i in range(min(n_slices, len(dataset.subjects) * dataset.depth)):
        sid = dataset.subjects[i % len(dataset.subjects)]
        z = dataset.depth // 2 + (i // len(dataset.subjects))
        samples.append(dataset.sample(sid, z % dataset.depth))
    batch = collate(samples, spec.use_nas, spec.use_spectrum)
    rng = torch_rng(derive_seed(cfg.train.seed, "eval", step))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x_cp = model.cpm(batch.cond.channels) if model.cpm is not None else torch.zeros_like(batch.target)
        record = {"step": step}
        if model.denoiser is not None:
            residual = batch.target - x_cp
            draws = [sample_gamma_train(schedule, rng) for _ in range(batch.target.shape[0])]
            gammas = torch.tensor([d.gamma for d in draws], dtype=batch.target.dtype)
            eps = torch.randn(residual.shape, generator=rng, dtype=batch.target.dtype)
            r_t = forward_sample(residual, gammas, eps)
            aux = model.aux.extract(batch.cond.aux_pyramid) if model.aux is not None else None
            eps_hat = model.denoiser(batch.cond.channels, r_t, gammas, aux)
            record["eval_loss_main"] = float(loss_main(eps_hat, eps))
        mse = float(((x_cp - batch.target) ** 2).mean())
        record["eval_cpm_mse"] = mse
    if was_training:
        model.train()
    return record


def run_training(
    cfg: RunConfig | None,
    data_dir: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Train per the configuration; returns the path of the final checkpoint.

    Emits one JSON line per step (step, four loss terms, total, wall
    time) to ``metrics.jsonl`` and periodic held-out diagnostics to
    ``eval.jsonl``. Checkpoints land in ``out_dir`` and the last one is
    also tagged ``checkpoint-final.pt``. When resuming, ``cfg`` may be
    None to continue under the checkpoint's stored configuration;
    otherwise the architecture-defining sections must match.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume, expect_config=cfg)
        model, optimizer, schedule = state.model, state.optimizer, state.schedule
        cfg = state.cfg if cfg is None else cfg
        start_step = state.step
        t_rng, n_rng = state.torch_rng, state.numpy_rng
        logger.info("resumed from %s at step %d", resume, start_step)
    else:
        if cfg is None:
            raise ConfigurationError("a configuration is required when not resuming")
        model = build_model(cfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate)
        schedule = make_schedule(
            cfg.schedule.kind, cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end
        )
        start_step = 0
        t_rng = torch_rng(derive_seed(cfg.train.seed, "train-torch"))
        n_rng = numpy_rng(derive_seed(cfg.train.seed, "train-data"))
    train_cfg = cfg.train
    save_config(cfg, out_dir / "config.yaml")

    dataset = SliceDataset(data_dir, "train", cfg.guidance)
    try:
        eval_dataset = SliceDataset(data_dir, "eval", cfg.guidance)
    except DataError:
        eval_dataset = None
        logger.warning("no eval split found in %s; skipping periodic evaluation", data_dir)

    metrics_path = out_dir / METRICS_NAME
    eval_path = out_dir / EVAL_NAME
    _truncate_stream(metrics_path, start_step)
    _truncate_stream(eval_path, start_step)

    spec = model.spec
    use_negatives = spec.use_contrastive and cfg.losses.k > 0.0 and train_cfg.n_negatives > 0
    model.train()
    final_path = out_dir / "checkpoint-final.pt"
    with open(metrics_path, "a", encoding="utf-8") as metrics_fh, open(
        eval_path, "a", encoding="utf-8"
    ) as eval_fh:
        for step in range(start_step + 1, train_cfg.iterations + 1):
            t0 = time.perf_counter()
            samples = dataset.random_batch(train_cfg.batch_size, n_rng)
            batch = collate(samples, spec.use_nas, spec.use_spectrum)
            negatives = None
            if use_negatives:
                negatives = build_negative_set(
                    dataset, set(batch.subject_ids), train_cfg.n_negatives, n_rng
                )
            record = train_step(
                model,
                batch,
                schedule,
                cfg.losses,
                optimizer,
                t_rng,
                negatives=negatives,
                detach_residual=train_cfg.detach_residual,
                n_neighbors=cfg.guidance.n_neighbors,
            )
            record = {"step": step, **record, "wall_time": time.perf_counter() - t0}
            metrics_fh.write(json.dumps(record) + "\n")

            if step % 100 == 0 or step == train_cfg.iterations:
                logger.info(
                    "step %d/%d loss_total=%.4f", step, train_cfg.iterations, record["loss_total"]
                )
            if eval_dataset is not None and step % train_cfg.eval_every == 0:
                eval_fh.write(
                    json.dumps(_eval_record(model, eval_dataset, cfg, schedule, step)) + "\n"
                )
            if step % train_cfg.checkpoint_every == 0 or step == train_cfg.iterations:
                ckpt = out_dir / f"checkpoint-{step:07d}.pt"
                save_checkpoint(
                    ckpt,
                    model,
                    optimizer,
                    schedule,
                    cfg,
                    step,
                    t_rng.get_state(),
                    n_rng.bit_generator.state,
                )
                metrics_fh.flush()
                eval_fh.flush()
                if step == train_cfg.iterations:
                    save_checkpoint(
                        final_path,
                        model,
                        optimizer,
                        schedule,
                        cfg,
                        step,
                        t_rng.get_state(),
                        n_rng.bit_generator.state,
                    )
    return final_path


# ---------------------------------------------------------------------------
# inference


def reconstruct_slice(
    model: ReconstructionModel,
    cond: ConditionInput,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    clip: tuple[float, float] = (-1.0, 1.0),
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruct one slice: returns (estimate, sampled residual, coarse prediction).

    The coarse predictor runs exactly once; the denoiser runs exactly
    schedule.T times (zero times for a coarse-only model). All tensors
    are in the normalized [-1, 1] space.
    """
    was_training = model.training
    model.eval()
    with torch.no_grad():
        shape = (cond.channels.shape[0], 1, *cond.channels.shape[2:])
        if model.cpm is not None:
            x_cp = model.cpm(cond.channels)
        else:
            x_cp = torch.zeros(shape, dtype=cond.channels.dtype)
        if model.denoiser is None:
            residual = torch.zeros_like(x_cp)
        else:
            aux = model.aux.extract(cond.aux_pyramid) if model.aux is not None else None
            residual = torch.randn(shape, generator=rng, dtype=cond.channels.dtype)
            for t in range(schedule.T, 0, -1):
                gamma_t = schedule.gamma(t)
                eps_hat = model.denoiser(cond.channels, residual, gamma_t, aux)
                residual = reverse_step(residual, eps_hat, t, schedule, rng, clip=clip)
        estimate = (x_cp + residual).clamp(*clip)
    if was_training:
        model.train()
    return estimate, residual, x_cp


def reconstruct_volume(
    model: ReconstructionModel,
    lpet_volume: np.ndarray,
    cfg: RunConfig,
    train_schedule: NoiseSchedule,
    n_inference_steps: int | None = None,
    n_samples: int | None = None,
    seed: int | None = None,
    return_samples: bool = False,
):
    """Reconstruct a whole degraded volume slice by slice.

    Each slice is sampled `n_samples` times with seeds derived from
    (seed, slice, sample); the returned volume is the per-voxel mean and
    the second return the per-voxel population standard deviation (zero
    when n_samples == 1). Outputs live in the original [0, 1] space.
    """
    sample_cfg = cfg.sample
    steps = sample_cfg.n_inference_steps if n_inference_steps is None else n_inference_steps
    n = sample_cfg.n_samples_for_ams if n_samples is None else n_samples
    base_seed = sample_cfg.seed if seed is None else seed
    if model.denoiser is not None:
        inference = make_inference_schedule(train_schedule, steps)
    else:
        inference = None
    vol = np.asarray(lpet_volume, dtype=np.float32)
    spec = model.spec
    out_mean = np.empty_like(vol)
    out_sd = np.empty_like(vol)
    retained = np.empty((n, *vol.shape), dtype=np.float32) if return_samples else None
    for z in range(vol.shape[0]):
        bundle = make_guidance(vol, z, cfg.guidance)
        cond = make_condition(vol[z][np.newaxis], bundle, spec.use_nas, spec.use_spectrum)
        stack = np.empty((n, *vol.shape[1:]), dtype=np.float32)
        for s in range(n):
            rng = torch_rng(derive_seed(base_seed, "slice", z, "sample", s))
            estimate, _, _ = reconstruct_slice(
                model, cond, inference if inference is not None else train_schedule, rng
            )
            stack[s] = ((estimate[0, 0].numpy() + 1.0) / 2.0).clip(0.0, 1.0)
        out_mean[z] = stack.mean(axis=0)
        out_sd[z] = stack.std(axis=0)
        if retained is not None:
            retained[:, z] = stack
    if return_samples:
        return out_mean, out_sd, retained
    return out_mean, out_sd
