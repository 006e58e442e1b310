"""Potential energy of an MLP posterior: Gaussian prior plus rescaled minibatch likelihood.

The prior acts on every tensor of the position tree, so under the expanded
parameterization each expanded matrix is penalized on its own. Temperature is
carried here for convenience but never changes the energy; samplers use it
to scale injected noise.
"""
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InputError


@dataclass(frozen=True)
class PotentialSpec:
    prior_variance: float
    dataset_size: int
    batch_size: int
    temperature: float = 1.0

    def __post_init__(self):
        if self.prior_variance <= 0 or self.temperature <= 0:
            raise ValueError("prior variance and temperature must be positive")
        if not 0 < self.batch_size <= self.dataset_size:
            raise ValueError("need 0 < batch_size <= dataset_size")


def prior_energy(params, prior_variance):
    """``sum |theta|^2 / (2 sigma^2)`` over all tensors (constants dropped)."""
    total = 0.0
    for v in params.values():
        total += float(np.vdot(v, v))
    return 0.5 * total / prior_variance


def prior_grad(params, prior_variance):
    return {k: v / prior_variance for k, v in params.items()}


def _scale(batch, spec):
    if len(batch) == 0:
        raise InputError("empty minibatch")
    return spec.dataset_size / len(batch)


def stochastic_potential(params, specs, batch, spec):
    scale = _scale(batch, spec)
    nll, _ = nn.cross_entropy(nn.forward(params, specs, batch.x), batch.y)
    return scale * nll + prior_energy(params, spec.prior_variance)


def potential_and_grad(params, specs, batch, spec):
    """Minibatch potential and its gradient with respect to every tensor of ``params``."""
    scale = _scale(batch, spec)
    nll, grads = nn.loss_and_grad(params, specs, batch.x, batch.y)
    value = scale * nll + prior_energy(params, spec.prior_variance)
    inv = 1.0 / spec.prior_variance
    return value, {k: scale * g + inv * params[k] for k, g in grads.items()}


def potential_gradient(params, specs, batch, spec):
    return potential_and_grad(params, specs, batch, spec)[1]


def full_potential(params, specs, dataset, prior_variance):
    """Full-data potential ``U`` (equals the minibatch estimate when the batch is the dataset)."""
    spec = PotentialSpec(prior_variance, len(dataset), len(dataset))
    return stochastic_potential(params, specs, dataset, spec)
