"""Shared test helpers: independent oracles and tiny predictors."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy.stats import wasserstein_distance

from diffac.diffusion import DTYPE


class ZeroPredictor(torch.nn.Module):
    """Predicts zero noise; reduces chains to closed-form affine maps."""

    def forward(self, z, cond, t):
        return torch.zeros_like(z)


class ConstantPredictor(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = torch.as_tensor(value, dtype=DTYPE)

    def forward(self, z, cond, t):
        return self.value.expand_as(z)


class TwoParamPredictor(torch.nn.Module):
    """eps_hat = a * z + b: the smallest differentiable predictor."""

    def __init__(self, a=0.3, b=-0.1):
        super().__init__()
        self.a = torch.nn.Parameter(torch.tensor(float(a), dtype=DTYPE))
        self.b = torch.nn.Parameter(torch.tensor(float(b), dtype=DTYPE))

    def forward(self, z, cond, t):
        return self.a * z + self.b


class AnalyticGaussianPredictor(torch.nn.Module):
    """Exact noise predictor for data drawn from N(mu, sigma^2).

    The forward-corrupted marginal at step t is Gaussian, so the posterior
    mean of the injected noise given z_t has the closed form
    sqrt(1-abar_t) (z_t - sqrt(abar_t) mu) / (abar_t sigma^2 + 1 - abar_t).
    """

    def __init__(self, mu: float, sigma: float, schedule):
        super().__init__()
        self.mu = mu
        self.sigma2 = sigma**2
        self.schedule = schedule

    def forward(self, z, cond, t):
        if isinstance(t, int):
            abar = self.schedule.alpha_bars[t - 1]
        else:
            abar = self.schedule.alpha_bars[t.to(torch.long) - 1].unsqueeze(1)
        num = torch.sqrt(1.0 - abar) * (z - torch.sqrt(abar) * self.mu)
        return num / (abar * self.sigma2 + 1.0 - abar)


def finite_difference_grads(loss_fn, params, eps=1e-6):
    """Central finite differences of loss_fn() w.r.t. a list of parameters.

    loss_fn must be a pure function of the current parameter values (fix all
    randomness before calling). Returns flat gradient arrays, one per param.
    """
    grads = []
    for p in params:
        flat = p.detach().reshape(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
            up = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig - eps
            down = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.detach().reshape(-1)
    b = b.detach().reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def w1_to_atoms(samples: np.ndarray, values: np.ndarray, probs: np.ndarray) -> float:
    """Exact 1-Wasserstein distance between samples and a discrete distribution."""
    return float(wasserstein_distance(samples, values, v_weights=probs))


def w1_samples(a: np.ndarray, b: np.ndarray) -> float:
    return float(wasserstein_distance(a, b))


@pytest.fixture(scope="session")
def torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    return torch.get_num_threads()
