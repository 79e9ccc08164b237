"""Central finite-difference checks of autograd gradients on miniature networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

DENOM_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def n_parameters(self) -> int:
        return int(self.analytic.size)


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            eps: float = 1e-5) -> GradCheckResult:
    """Compare ``torch.autograd`` gradients of ``loss_fn()`` with central differences.

    Relative error per scalar parameter is
    ``|a - n| / max(|a|, |n|, DENOM_FLOOR)``. ``loss_fn`` must be a pure
    function of ``params``; use float64 parameters.
    """
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = np.concatenate([(g if g is not None else torch.zeros_like(p)).detach().reshape(-1).numpy()
                               for g, p in zip(grads, params)]) if params else np.zeros(0)
    numeric = []

    def at(p, i, value):
        with torch.no_grad():
            p.view(-1)[i] = value
        # the loss itself may need autograd (gradient penalty)
        return loss_fn().item()

    for p in params:
        for i in range(p.numel()):
            orig = p.view(-1)[i].item()
            up, down = at(p, i, orig + eps), at(p, i, orig - eps)
            with torch.no_grad():
                p.view(-1)[i] = orig
            numeric.append((up - down) / (2 * eps))
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return GradCheckResult(analytic, numeric, np.abs(analytic - numeric) / denom)


class TinyWae(nn.Module):
    """Two-layer linear-plus-sigmoid auto-encoder on flattened pixels; duck-types ``WaeModel``."""

    def __init__(self, n_pixels: int = 4, latent_dim: int = 2, config=None):
        super().__init__()
        self.config = config
        self.encoder = nn.Sequential(nn.Flatten(), nn.Linear(n_pixels, latent_dim))
        self.decoder = nn.Sequential(nn.Linear(latent_dim, n_pixels), nn.Sigmoid(),
                                     nn.Unflatten(1, (1, 1, n_pixels)))


def miniature_gan_config(seed: int = 0):
    """Smallest working progressive setup: resolutions 2 -> 4, one channel everywhere."""
    from .cpgan import GanConfig, ProgressiveSchedule
    return GanConfig(schedule=ProgressiveSchedule.from_resolutions([2, 4], images_per_step=8, batch_sizes=4),
                     latent_dim=2, noise_dim=2, head_res=2, fmap_base=2, fmap_max=1, seed=seed)


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
