"""Probabilistic machinery of the residual diffusion process.

A fixed variance schedule corrupts a clean signal x0 over T steps; the
cumulative retention factor gamma_t (the running product of the per-step
alpha_t) fully determines the marginal at step t, so both training and
sampling are driven by gamma alone:

    forward marginal:  x_t = sqrt(gamma_t) * x0 + sqrt(1 - gamma_t) * eps
    reverse step:      x_{t-1} ~ N(mu(x0_hat, x_t), sigma_t^2 I)

Training draws a continuous gamma per example (uniform step index, then
uniform gamma inside that step's interval), which lets the denoiser be
conditioned on the noise level directly and makes the inference step
count a free choice: a short schedule is obtained by subsampling the
training gammas.

Conventions:
  - Step indices are 1-based, t in 1..T, with gamma(0) := 1.0 so the
    final reverse step (t == 1) is deterministic.
  - Schedules are float64 arrays; tensor operations follow the dtype of
    their tensor arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError, ShapeError

__all__ = [
    "NoiseSchedule",
    "GammaSample",
    "PosteriorParams",
    "make_schedule",
    "make_inference_schedule",
    "forward_sample",
    "sample_gamma_train",
    "posterior_params",
    "predict_x0_from_eps",
    "reverse_step",
]

# gammas must reproduce cumprod(alphas) at least this tightly
_CUMPROD_RTOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance bookkeeping driving the forward and reverse processes.

    ``alphas[i]`` and ``gammas[i]`` hold alpha_t and gamma_t for t = i + 1,
    where gamma_t is the running product alpha_1 * ... * alpha_t.
    """

    alphas: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        gammas = np.asarray(self.gammas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "gammas", gammas)
        if alphas.ndim != 1 or alphas.size == 0 or gammas.shape != alphas.shape:
            raise ShapeError("alphas and gammas must be equal-length 1-D arrays")
        if not (np.all(alphas > 0.0) and np.all(alphas < 1.0)):
            raise ParameterError("every alpha must lie in (0, 1)")
        if not (np.all(gammas > 0.0) and np.all(gammas < 1.0)):
            raise ParameterError("every gamma must lie in (0, 1)")
        if np.any(np.diff(gammas) >= 0.0):
            raise ParameterError("gammas must be strictly decreasing")
        if not np.allclose(gammas, np.cumprod(alphas), rtol=_CUMPROD_RTOL, atol=0.0):
            raise ParameterError("gammas must equal the cumulative product of alphas")

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def gamma(self, t: int) -> float:
        """gamma_t, with the gamma(0) := 1 convention."""
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.gammas[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ParameterError(f"step index t={t} outside 1..{self.T}")


@dataclass(frozen=True)
class GammaSample:
    """A continuous noise level drawn for training, with its step index."""

    gamma: float
    t: int

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma={self.gamma} outside (0, 1)")
        if self.t < 1:
            raise ParameterError(f"step index t={self.t} must be >= 1")


@dataclass(frozen=True)
class PosteriorParams:
    """Gaussian parameters of one reverse step: mean tensor and scalar variance."""

    mean: torch.Tensor
    variance: float

    def __post_init__(self):
        if self.variance < 0.0:
            raise ParameterError(f"negative posterior variance {self.variance}")


def make_schedule(
    kind: str = "linear",
    T: int = 2000,
    beta_start: float = 1e-6,
    beta_end: float = 0.01,
) -> NoiseSchedule:
    """Build a training schedule from a linearly spaced beta ramp.

    alpha_t = 1 - beta_t with beta_t linearly spaced from `beta_start`
    to `beta_end`; gammas are the cumulative products.
    """
    if kind != "linear":
        raise ParameterError(f"unknown schedule kind {kind!r}; supported: 'linear'")
    if T < 1:
        raise ParameterError(f"T={T} must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(alphas=alphas, gammas=np.cumprod(alphas))


def make_inference_schedule(train: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Subsample a training schedule down to `n_steps` reverse steps.

    Picks gammas at evenly spaced indices (always including the last, so
    the terminal noise level is preserved) and rebuilds the alphas as
    consecutive gamma ratios.
    """
    if not 1 <= n_steps <= train.T:
        raise ParameterError(f"n_steps={n_steps} outside 1..{train.T}")
    idx = np.array([(i * train.T) // n_steps - 1 for i in range(1, n_steps + 1)])
    gammas = train.gammas[idx]
    alphas = np.empty_like(gammas)
    alphas[0] = gammas[0]
    alphas[1:] = gammas[1:] / gammas[:-1]
    return NoiseSchedule(alphas=alphas, gammas=gammas)


def _coeff(value, like: torch.Tensor, lo_open: float, name: str):
    """Validate a scalar-or-tensor coefficient and make it broadcastable."""
    if isinstance(value, torch.Tensor):
        if not bool((value > lo_open).all() and (value <= 1.0).all()):
            raise ParameterError(f"{name} must lie in ({lo_open}, 1], got tensor values outside")
        extra = like.ndim - value.ndim
        if extra < 0:
            raise ShapeError(f"{name} has more dims than the data tensor")
        return value.reshape(value.shape + (1,) * extra)
    value = float(value)
    if not lo_open < value <= 1.0:
        raise ParameterError(f"{name}={value} outside ({lo_open}, 1]")
    return value


def forward_sample(x0: torch.Tensor, gamma, eps: torch.Tensor) -> torch.Tensor:
    """Corrupt x0 to noise level gamma: sqrt(gamma)*x0 + sqrt(1-gamma)*eps.

    `gamma` may be a float in (0, 1] or a tensor broadcastable over x0
    (e.g. one level per batch element).
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    g = _coeff(gamma, x0, 0.0, "gamma")
    if isinstance(g, torch.Tensor):
        return g.sqrt() * x0 + (1.0 - g).sqrt() * eps
    return math.sqrt(g) * x0 + math.sqrt(1.0 - g) * eps


def predict_x0_from_eps(x_t: torch.Tensor, eps_hat: torch.Tensor, gamma) -> torch.Tensor:
    """Invert the forward marginal: (x_t - sqrt(1-gamma)*eps_hat) / sqrt(gamma).

    Exact left inverse of :func:`forward_sample` when eps_hat equals the
    noise actually injected.
    """
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"x_t shape {tuple(x_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    g = _coeff(gamma, x_t, 0.0, "gamma")
    if isinstance(g, torch.Tensor):
        return (x_t - (1.0 - g).sqrt() * eps_hat) / g.sqrt()
    return (x_t - math.sqrt(1.0 - g) * eps_hat) / math.sqrt(g)


def sample_gamma_train(schedule: NoiseSchedule, rng: torch.Generator) -> GammaSample:
    """Draw a training noise level: uniform t, then uniform gamma in [gamma_t, gamma_{t-1}]."""
    t = int(torch.randint(1, schedule.T + 1, (1,), generator=rng).item())
    u = float(torch.rand((1,), generator=rng, dtype=torch.float64).item())
    lo = schedule.gamma(t)
    hi = schedule.gamma(t - 1)
    return GammaSample(gamma=lo + u * (hi - lo), t=t)


def posterior_params(
    x0: torch.Tensor, x_t: torch.Tensor, t: int, schedule: NoiseSchedule
) -> PosteriorParams:
    """Mean and variance of the reverse-step Gaussian given (x0, x_t) at step t.

        mean = sqrt(gamma_{t-1}) (1-alpha_t)/(1-gamma_t) * x0
             + sqrt(alpha_t) (1-gamma_{t-1})/(1-gamma_t) * x_t
        var  = (1-gamma_{t-1}) (1-alpha_t) / (1-gamma_t)

    At t == 1 (gamma_0 == 1) the mean collapses to x0 and the variance to 0.
    """
    if x0.shape != x_t.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != x_t shape {tuple(x_t.shape)}")
    schedule._check_step(t)
    a_t = schedule.alpha(t)
    g_t = schedule.gamma(t)
    g_prev = schedule.gamma(t - 1)
    denom = 1.0 - g_t
    coef_x0 = math.sqrt(g_prev) * (1.0 - a_t) / denom
    coef_xt = math.sqrt(a_t) * (1.0 - g_prev) / denom
    variance = (1.0 - g_prev) * (1.0 - a_t) / denom
    return PosteriorParams(mean=coef_x0 * x0 + coef_xt * x_t, variance=variance)


def reverse_step(
    r_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    clip: tuple[float, float] | None = (-1.0, 1.0),
) -> torch.Tensor:
    """One reverse denoising step from r_t to r_{t-1}.

    Estimates the clean signal from the predicted noise, clamps it to the
    data range (stabilizes early steps where sqrt(gamma) is tiny), then
    draws from the step's Gaussian posterior. The final step (t == 1)
    returns the posterior mean with no noise.
    """
    r0_hat = predict_x0_from_eps(r_t, eps_hat, schedule.gamma(t))
    if clip is not None:
        r0_hat = r0_hat.clamp(min=clip[0], max=clip[1])
    post = posterior_params(r0_hat, r_t, t, schedule)
    if t == 1:
        return post.mean
    # noise drawn on CPU from the caller's generator, then moved: keeps the
    # draw sequence identical across devices
    noise = torch.randn(r_t.shape, generator=rng, dtype=r_t.dtype).to(r_t.device)
    return post.mean + math.sqrt(post.variance) * noise
