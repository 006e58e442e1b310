"""Analytic sampling targets: 25-mode Gaussian mixture, quadratics, product wrapper."""
from dataclasses import dataclass, field

import numpy as np


def _grid_means():
    ticks = np.array([-4.0, -2.0, 0.0, 2.0, 4.0])
    return np.array([(x, y) for x in ticks for y in ticks])


@dataclass
class MoG25:
    """Equal-weight mixture of 25 isotropic Gaussians on a 5x5 grid with spacing 2."""

    variance: float = 0.03
    means: np.ndarray = field(default_factory=_grid_means)

    def _log_terms(self, p):
        diff = np.asarray(p, dtype=np.float64)[..., None, :] - self.means
        sq = np.einsum("...kd,...kd->...k", diff, diff)
        return -0.5 * sq / self.variance, diff

    def logprob(self, p):
        logs, _ = self._log_terms(p)
        m = logs.max(axis=-1)
        lse = m + np.log(np.exp(logs - m[..., None]).sum(axis=-1))
        k, dim = self.means.shape
        return lse - np.log(k) - 0.5 * dim * np.log(2.0 * np.pi * self.variance)

    def grad(self, p):
        """Gradient of ``logprob``: responsibility-weighted pull towards the means."""
        logs, diff = self._log_terms(p)
        w = np.exp(logs - logs.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        return -np.einsum("...k,...kd->...d", w, diff) / self.variance

    def potential(self, p):
        return -self.logprob(p)

    def potential_grad(self, p):
        return -self.grad(p)


def mog_logprob(p, target=None):
    return (target or MoG25()).logprob(p)


def mog_grad(p, target=None):
    return (target or MoG25()).grad(p)


@dataclass
class Quadratic:
    """Isotropic Gaussian potential ``U(x) = |x|^2 / (2 * variance)``."""

    variance: float = 1.0

    def potential(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * np.sum(x * x) / self.variance

    def potential_grad(self, x):
        return np.asarray(x, dtype=np.float64) / self.variance


class ProductTarget:
    """Base 2-D target observed through ``y = W3 @ W2 @ W1 @ x``.

    Positions are trees ``{"W1", "W2", "W3", "x"}``; the potential is the base
    potential at ``y``.
    """

    names = ("W1", "W2", "W3", "x")

    def __init__(self, base=None):
        self.base = base if base is not None else MoG25()

    def emit(self, pos):
        return pos["W3"] @ (pos["W2"] @ (pos["W1"] @ pos["x"]))

    def potential(self, pos):
        return float(self.base.potential(self.emit(pos)))

    def potential_grad(self, pos):
        W1, W2, W3, x = (pos[n] for n in self.names)
        u1 = W1 @ x
        u2 = W2 @ u1
        gy = self.base.potential_grad(W3 @ u2)
        g2 = W3.T @ gy
        g1 = W2.T @ g2
        return {
            "W1": np.outer(g1, x),
            "W2": np.outer(g2, u1),
            "W3": np.outer(gy, u2),
            "x": W1.T @ g1,
        }

    def init_position(self, rng, box=5.0):
        """Identity factors and ``x`` uniform on ``[-box, box]^2``."""
        return {
            "W1": np.eye(2),
            "W2": np.eye(2),
            "W3": np.eye(2),
            "x": rng.uniform(2, -box, box),
        }


def product_target_grad(pos, target=None):
    return (target or ProductTarget()).potential_grad(pos)


def mode_coverage(samples, radius=0.5, means=None):
    """Number of mixture means with at least one sample within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    means = _grid_means() if means is None else np.asarray(means)
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, means.shape[1])
    if len(samples) == 0:
        return 0
    hit = np.zeros(len(means), dtype=bool)
    for start in range(0, len(samples), 4096):
        chunk = samples[start:start + 4096]
        dist = np.linalg.norm(chunk[:, None, :] - means[None, :, :], axis=-1)
        hit |= (dist <= radius).any(axis=0)
    return int(hit.sum())
