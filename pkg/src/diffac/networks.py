"""Noise-prediction MLPs used by both diffusion samplers.

A predictor maps (noised sample, conditioning, step index) to predicted
noise. The step index is embedded as a small set of smooth features so one
network serves every step of the ladder. GELU activations and modest widths
keep desk-scale training fast on CPU.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from .diffusion import DTYPE

_ACTIVATIONS = {
    "gelu": nn.GELU,
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "mish": nn.Mish,
}


def _time_features(t, T: int, batch: int) -> torch.Tensor:
    """Smooth per-step features: scaled index plus one sin/cos pair."""
    if isinstance(t, int):
        t = torch.full((batch,), t, dtype=torch.long)
    tau = t.to(DTYPE) / T
    return torch.stack(
        [tau, torch.sin(2 * torch.pi * tau), torch.cos(2 * torch.pi * tau)], dim=1
    )


class EpsilonMlp(nn.Module):
    """Fully connected noise predictor over [sample, conditioning, step]."""

    def __init__(
        self,
        sample_dim: int,
        cond_dim: int,
        n_steps: int,
        hidden: Sequence[int] = (64, 64),
        activation: str = "gelu",
    ):
        super().__init__()
        if sample_dim < 1:
            raise ValueError("sample_dim must be >= 1")
        if cond_dim < 0:
            raise ValueError("cond_dim must be >= 0")
        self.sample_dim = sample_dim
        self.cond_dim = cond_dim
        self.n_steps = n_steps

        act = _ACTIVATIONS[activation]
        dims = [sample_dim + cond_dim + 3, *hidden, sample_dim]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1], dtype=DTYPE))
            if i < len(dims) - 2:
                layers.append(act())
        self.net = nn.Sequential(*layers)

    def forward(
        self, z: torch.Tensor, cond: Optional[torch.Tensor], t
    ) -> torch.Tensor:
        feats = [z]
        if self.cond_dim > 0:
            if cond is None:
                raise ValueError("predictor expects conditioning input")
            if cond.shape != (z.shape[0], self.cond_dim):
                raise ValueError(
                    f"conditioning shape {tuple(cond.shape)} does not match "
                    f"(batch, {self.cond_dim})"
                )
            feats.append(cond)
        feats.append(_time_features(t, self.n_steps, z.shape[0]))
        return self.net(torch.cat(feats, dim=1))


def init_predictor_seeded(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize all Linear layers from a fixed torch generator."""
    gen = torch.Generator().manual_seed(seed % (2**63))
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            fan_in = layer.weight.shape[1]
            bound = 1.0 / fan_in**0.5
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                if layer.bias is not None:
                    layer.bias.uniform_(-bound, bound, generator=gen)
    return module
