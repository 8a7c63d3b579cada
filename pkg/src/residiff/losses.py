"""Training objectives.

Four terms make up the total loss:

  - main: L1 between predicted and injected noise on the noised residual,
  - guidance (two kinds): per-level L1 between reconstructed and clean
    auxiliary pyramids, one invocation for the slice stack and one for
    the spectrum,
  - contrastive: the one-step reconstruction estimate is pulled toward
    its own clean target and pushed away from clean slices of other
    subjects; mean absolute distance stands in for the negative
    log-likelihood of the one-step generator (isotropic Laplace with
    fixed scale), which keeps gradients well-scaled.

All reductions are per-element means, so the weights are independent of
image resolution. The contrastive term can be negative; its weight is
kept small so it cannot dominate the total.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .diffusion import predict_x0_from_eps
from .errors import ConfigurationError, ParameterError, ShapeError, TrainingError

__all__ = [
    "LossWeights",
    "NegativeSet",
    "loss_main",
    "loss_guidance",
    "intermediate_rpet",
    "loss_contrastive",
    "loss_total",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: m (slice-stack guidance), n (spectrum guidance), k (contrastive)."""

    m: float = 1.0
    n: float = 1.0
    k: float = 5e-5

    def __post_init__(self):
        for name in ("m", "n", "k"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ParameterError(f"weight {name}={value} must be finite and >= 0")


@dataclass(frozen=True)
class NegativeSet:
    """Clean slices from subjects outside the current batch."""

    slices: torch.Tensor  # [N, 1, H, W]
    subject_ids: tuple[str, ...]

    def __post_init__(self):
        if self.slices.ndim != 4 or self.slices.shape[1] != 1:
            raise ShapeError(f"negative slices must be [N,1,H,W], got {tuple(self.slices.shape)}")
        if self.slices.shape[0] != len(self.subject_ids):
            raise ShapeError("one subject id required per negative slice")

    def __len__(self) -> int:
        return int(self.slices.shape[0])


def _mean_abs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_main(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between predicted and injected noise."""
    return _mean_abs(eps_hat, eps)


def loss_guidance(
    predicted: Sequence[torch.Tensor], target: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over pyramid levels of the per-level mean absolute error.

    Called once per guidance kind; the caller weights the two results
    separately.
    """
    if len(predicted) != len(target):
        raise ConfigurationError(
            f"guidance level mismatch: {len(predicted)} predictions vs {len(target)} targets"
        )
    if not predicted:
        raise ConfigurationError("guidance loss needs at least one pyramid level")
    total = _mean_abs(predicted[0], target[0])
    for pred_k, tgt_k in zip(predicted[1:], target[1:]):
        total = total + _mean_abs(pred_k, tgt_k)
    return total


def intermediate_rpet(
    x_cp: torch.Tensor, r_t: torch.Tensor, eps_hat: torch.Tensor, gamma
) -> torch.Tensor:
    """One-step reconstruction estimate: coarse prediction plus estimated residual."""
    return x_cp + predict_x0_from_eps(r_t, eps_hat, gamma)


def loss_contrastive(
    y_tilde: torch.Tensor,
    y: torch.Tensor,
    negatives: NegativeSet | torch.Tensor | None,
) -> torch.Tensor:
    """d(y, y~) minus the summed d(neg_i, y~), with d the mean absolute distance.

    An empty negative set degenerates to the positive term alone (logged
    as a warning, since the push-away half of the objective is lost).
    """
    pos = _mean_abs(y_tilde, y)
    negs = negatives.slices if isinstance(negatives, NegativeSet) else negatives
    if negs is None or negs.shape[0] == 0:
        logger.warning("contrastive loss called with no negatives; using positive term only")
        return pos
    if negs.ndim != 4 or negs.shape[1:] != y_tilde.shape[1:]:
        raise ShapeError(
            f"negatives must be [N,{','.join(str(s) for s in y_tilde.shape[1:])}], "
            f"got {tuple(negs.shape)}"
        )
    # broadcast each negative against the whole batch of estimates
    neg = (y_tilde.unsqueeze(0) - negs.unsqueeze(1)).abs().mean(dim=(1, 2, 3, 4)).sum()
    return pos - neg


def loss_total(
    main,
    guidance_nas,
    guidance_spectrum,
    contrastive,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted total: main + m*G_nas + n*G_spectrum + k*contrastive.

    Raises a training error naming the offending term if any part is not
    finite.
    """
    parts = {
        "main": main,
        "guidance_nas": guidance_nas,
        "guidance_spectrum": guidance_spectrum,
        "contrastive": contrastive,
    }
    for name, value in parts.items():
        finite = (
            bool(torch.isfinite(value.detach()).all())
            if isinstance(value, torch.Tensor)
            else math.isfinite(float(value))
        )
        if not finite:
            raise TrainingError(f"non-finite loss term {name!r}: {value}")
    # plain floats stay in double precision; tensors keep their dtype and graph
    return (
        main
        + weights.m * guidance_nas
        + weights.n * guidance_spectrum
        + weights.k * contrastive
    )
