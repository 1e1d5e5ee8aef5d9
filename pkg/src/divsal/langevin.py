"""Unadjusted Langevin inference of the latent code for alternating back-propagation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import InvalidInputError, NumericError

DIVERGENCE_LIMIT = 1e3

# generator(image, z) -> prediction with the same shape as the annotation
Generator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LangevinConfig:
    steps: int = 5
    step_size: float = 0.1
    noise_variance: float = 0.3

    def __post_init__(self):
        if self.steps < 0 or self.step_size < 0 or self.noise_variance <= 0:
            raise InvalidInputError("Langevin config needs steps >= 0, step_size >= 0, noise_variance > 0")


def log_joint_gradient(z, image, annotation, generator: Generator, noise_variance: float, step=None):
    """Gradient of log p(y, z | x) under a Gaussian observation model and N(0, I) prior.

    Equals ``(y - f(x, z)) J / noise_variance - z`` with J the Jacobian of f
    w.r.t. z. Parameters of ``generator`` receive no gradient.
    """
    z = z.detach().requires_grad_(True)
    with torch.enable_grad():
        pred = generator(image, z)
        loglik = -0.5 / noise_variance * ((annotation - pred) ** 2).sum()
        (grad_lik,) = torch.autograd.grad(loglik, z)
    grad = grad_lik - z.detach()
    if not torch.isfinite(grad).all():
        where = "" if step is None else f" at Langevin step {step}"
        raise NumericError(f"non-finite log-joint gradient{where}")
    return grad


def langevin_sample(
    image,
    annotation,
    generator: Generator,
    cfg: LangevinConfig,
    rng: torch.Generator,
    latent_dim: int,
    batch_size: int | None = None,
) -> torch.Tensor:
    """Run ``cfg.steps`` Langevin updates from a standard-normal start.

    Draws exactly ``cfg.steps + 1`` Gaussian tensors of shape (B, K) from
    ``rng``: the initial state, then one noise injection per step.
    """
    b = annotation.shape[0] if batch_size is None else batch_size
    dtype = annotation.dtype if annotation.is_floating_point() else torch.float32
    z = torch.randn(b, latent_dim, generator=rng, dtype=dtype)
    s = cfg.step_size
    for t in range(cfg.steps):
        grad = log_joint_gradient(z, image, annotation, generator, cfg.noise_variance, step=t)
        noise = torch.randn(b, latent_dim, generator=rng, dtype=dtype)
        z = z + 0.5 * s * s * grad + s * noise
        if torch.linalg.vector_norm(z, dim=-1).max() > DIVERGENCE_LIMIT:
            raise NumericError(f"Langevin chain diverged at step {t + 1}: |z| > {DIVERGENCE_LIMIT:g}")
    return z.detach()
