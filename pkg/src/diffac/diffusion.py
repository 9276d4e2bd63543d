"""Denoising-diffusion primitives shared by the value and policy samplers.

Provides the noise-schedule ladder, the closed-form forward corruption,
single reverse denoising steps, full reverse-chain sampling and the
epsilon-prediction training loss. Everything operates on float64 torch
tensors and is pure given an explicit noise source, so the same functions
serve both the training path (with autograd) and the test oracles.

Step indices are 1-based: t runs over {1, ..., T}, matching the recursion
z_{t-1} = f(z_t). The stored schedule vectors are plain 0-indexed arrays,
so e.g. beta(t) reads betas[t - 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

DTYPE = torch.float64

# Predictor signature: (z_t, conditioning | None, t) -> predicted noise.
# t is an int (whole batch at one step) or a (B,) long tensor (per-row steps).
NoisePredictorFn = Callable[[torch.Tensor, Optional[torch.Tensor], object], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """The beta_t / alpha_t / cumulative-alpha ladder of a diffusion chain."""

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("schedule needs at least one step")
        for name in ("betas", "alphas", "alpha_bars"):
            v = getattr(self, name)
            if v.shape != (self.T,):
                raise ValueError(f"{name} must have shape (T,), got {tuple(v.shape)}")
        if not bool(((self.betas > 0) & (self.betas < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")

    def beta(self, t: int) -> torch.Tensor:
        self._check_t(t)
        return self.betas[t - 1]

    def alpha(self, t: int) -> torch.Tensor:
        self._check_t(t)
        return self.alphas[t - 1]

    def alpha_bar(self, t: int) -> torch.Tensor:
        self._check_t(t)
        return self.alpha_bars[t - 1]

    def alpha_bar_prev(self, t: int) -> torch.Tensor:
        """Cumulative alpha one step earlier; the empty product at t=1 is 1."""
        self._check_t(t)
        if t == 1:
            return torch.ones((), dtype=DTYPE)
        return self.alpha_bars[t - 2]

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index {t} outside [1, {self.T}]")


def make_schedule(
    T: int,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    shape: str = "linear",
) -> NoiseSchedule:
    """Build a noise schedule of T steps.

    "linear" interpolates betas uniformly from beta_min to beta_max.
    "cosine" derives betas from the squared-cosine cumulative-alpha curve
    and clips them into [beta_min, beta_max].
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")

    if shape == "linear":
        betas = torch.linspace(beta_min, beta_max, T, dtype=DTYPE)
    elif shape == "cosine":
        s = 0.008
        ts = torch.arange(T + 1, dtype=DTYPE) / T
        f = torch.cos((ts + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = (1 - abar[1:] / abar[:-1]).clamp(min=beta_min, max=beta_max)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")

    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass
class DiffusionSampleRequest:
    """Everything a reverse-chain draw needs besides the model itself."""

    n_samples: int
    sample_dim: int
    conditioning: Optional[torch.Tensor] = None  # (C,) or (n_samples, C)
    stochastic: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.sample_dim < 1:
            raise ValueError("sample_dim must be >= 1")


def forward_corrupt(
    x0: torch.Tensor, t: int, schedule: NoiseSchedule, noise: torch.Tensor
) -> torch.Tensor:
    """Closed-form forward corruption: sqrt(abar_t) x0 + sqrt(1-abar_t) noise."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bar(t)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def reverse_step(
    z_t: torch.Tensor,
    t: int,
    predictor: NoisePredictorFn,
    conditioning: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One reverse denoising update z_t -> z_{t-1}.

    Computes (1/sqrt(alpha_t)) (z_t - beta_t/sqrt(1-abar_t) * eps_hat)
    + sqrt(beta_t) * eps, with eps_hat from the predictor. Pass eps=None for
    a deterministic (zero added noise) step.
    """
    eps_hat = predictor(z_t, conditioning, t)
    if eps_hat.shape != z_t.shape:
        raise ValueError(
            f"predictor output shape {tuple(eps_hat.shape)} does not match "
            f"sample shape {tuple(z_t.shape)}"
        )
    alpha_t = schedule.alpha(t)
    beta_t = schedule.beta(t)
    abar_t = schedule.alpha_bar(t)
    mean = (z_t - beta_t / torch.sqrt(1.0 - abar_t) * eps_hat) / torch.sqrt(alpha_t)
    if eps is None:
        return mean
    if eps.shape != z_t.shape:
        raise ValueError("eps shape must match z_t")
    return mean + torch.sqrt(beta_t) * eps


def reverse_chain(
    z_T: torch.Tensor,
    predictor: NoisePredictorFn,
    conditioning: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    eps_seq: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Run the full reverse chain t = T..1 from a given start z_T.

    eps_seq holds the additive per-step noise indexed eps_seq[t-1]; the entry
    for t=1 is ignored (the final step returns the posterior mean) and None
    means a fully deterministic chain. Differentiable end to end.
    """
    z = z_T
    for t in range(schedule.T, 0, -1):
        eps = None
        if eps_seq is not None and t > 1:
            eps = eps_seq[t - 1]
        z = reverse_step(z, t, predictor, conditioning, schedule, eps)
    return z


def reverse_sample(
    request: DiffusionSampleRequest,
    predictor: NoisePredictorFn,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Draw request.n_samples i.i.d. samples by reverse denoising from N(0, I).

    With stochastic=False the per-step noise is zeroed and the output is a
    pure function of (rng_seed, predictor parameters, conditioning).
    """
    n, d = request.n_samples, request.sample_dim
    gen = torch.Generator().manual_seed(request.rng_seed % (2**63))
    z_T = torch.randn((n, d), generator=gen, dtype=DTYPE)
    eps_seq = None
    if request.stochastic:
        eps_seq = torch.randn((schedule.T, n, d), generator=gen, dtype=DTYPE)
    cond = request.conditioning
    if cond is not None:
        cond = torch.as_tensor(cond, dtype=DTYPE)
        if cond.ndim == 1:
            cond = cond.unsqueeze(0).expand(n, -1)
        elif cond.shape[0] != n:
            raise ValueError("conditioning rows must match n_samples")
    return reverse_chain(z_T, predictor, cond, schedule, eps_seq)


def simple_denoising_loss(
    x0_batch: torch.Tensor,
    predictor: NoisePredictorFn,
    conditioning_batch: Optional[torch.Tensor],
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    ts: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared noise-prediction error over a batch.

    Per sample, a step t is drawn uniformly from {1..T} and a standard-normal
    eps is drawn, the sample is corrupted in closed form, and the predictor's
    output is compared against the drawn eps. ts/eps may be injected
    explicitly (tests use this to pin the per-sample draws).
    """
    if x0_batch.ndim != 2 or x0_batch.shape[0] == 0:
        raise ValueError("x0_batch must be a non-empty (B, D) matrix")
    B, D = x0_batch.shape
    if ts is None:
        if generator is None:
            raise ValueError("need a generator when ts is not injected")
        ts = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    ts = ts.to(torch.long)
    if eps is None:
        if generator is None:
            raise ValueError("need a generator when eps is not injected")
        eps = torch.randn((B, D), generator=generator, dtype=DTYPE)

    abar = schedule.alpha_bars[ts - 1].unsqueeze(1)
    x_t = torch.sqrt(abar) * x0_batch + torch.sqrt(1.0 - abar) * eps
    eps_hat = predictor(x_t, conditioning_batch, ts)
    return ((eps - eps_hat) ** 2).sum(dim=1).mean()


def posterior_mean(
    z_t: torch.Tensor, x0: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Mean of the forward-process posterior q(z_{t-1} | z_t, z_0).

    Kept alongside the simplified loss so the weighted objective it underlies
    can be cross-checked in tests; training itself uses the epsilon loss.
    """
    schedule._check_t(t)
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar_prev(t)
    alpha_t = schedule.alpha(t)
    beta_t = schedule.beta(t)
    coef_x0 = torch.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
    coef_zt = torch.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    return coef_x0 * x0 + coef_zt * z_t


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    """Convert numpy/sequence input to a torch tensor of the package dtype."""
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
