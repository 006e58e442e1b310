"""Stochastic-gradient samplers (SGLD, pSGLD, SGHMC, SGNHT), leapfrog HMC and schedules.

Positions, momenta and gradients are ``ParamTree`` dicts of float64 arrays.
Step functions update the state's arrays in place and return the state.
The momentum convention follows the practical SGHMC/SGNHT updates:
``r <- (1 - gamma*eps) r + eps*g + noise`` followed by ``theta <- theta - eps*r``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .nn import is_expanded

KINDS = ("sgld", "psgld", "sghmc", "sgnht")


@dataclass(frozen=True)
class Schedule:
    lr0: float
    steps_per_cycle: int = 1
    cycles: int = 1
    kind: str = "cyclical"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("peak step size must be positive")
        if self.steps_per_cycle < 1 or self.cycles < 0:
            raise ValueError("need steps_per_cycle >= 1 and cycles >= 0")
        if self.kind not in ("cyclical", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @property
    def total_steps(self):
        return self.steps_per_cycle * self.cycles


def step_size(schedule, t):
    """Step size at global step ``t >= 0``; cyclical restarts at the peak every cycle."""
    if t < 0:
        raise ValueError("step index must be non-negative")
    if schedule.kind == "constant":
        return schedule.lr0
    T = schedule.steps_per_cycle
    return 0.5 * schedule.lr0 * (math.cos(math.pi * (t % T) / T) + 1.0)


@dataclass
class SamplerConfig:
    friction: float = 100.0
    friction_pq: float | None = None
    temperature: float = 1.0
    beta: float = 0.99
    stability: float = 1e-8
    xi0: float = 1.0
    prior_variance: float = 0.05
    noise: bool = True
    expanded_noise: bool = True
    thermostat_noise: str = "initial"

    def __post_init__(self):
        if self.friction < 0 or (self.friction_pq is not None and self.friction_pq < 0):
            raise ValueError("friction must be non-negative")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.temperature <= 0 or self.prior_variance <= 0:
            raise ValueError("temperature and prior variance must be positive")
        if self.thermostat_noise not in ("initial", "current"):
            raise ValueError("thermostat_noise is 'initial' or 'current'")

    def friction_for(self, name):
        if self.friction_pq is not None and is_expanded(name):
            return self.friction_pq
        return self.friction


@dataclass
class SamplerState:
    position: dict
    rng: object
    momentum: dict | None = None
    xi: float | None = None
    nu: dict | None = None
    step: int = 0
    cycle: int = 0


def init_state(kind, position, rng, config=None):
    """Fresh chain state; momentum and accumulators start at zero."""
    config = config or SamplerConfig()
    if kind not in KINDS + ("hmc",):
        raise ValueError(f"unknown sampler kind {kind!r}")
    pos = {k: np.array(v, dtype=np.float64) for k, v in position.items()}
    state = SamplerState(position=pos, rng=rng)
    if kind in ("sghmc", "sgnht", "hmc"):
        state.momentum = {k: np.zeros_like(v) for k, v in pos.items()}
    if kind == "psgld":
        state.nu = {k: np.zeros_like(v) for k, v in pos.items()}
    if kind == "sgnht":
        state.xi = float(config.xi0)
    return state


def _check_grad(state, grad):
    for v in grad.values():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(state.step)


def _noise(state, config, name, scale):
    """Scaled standard normal draw for one tensor, or None when noise is disabled."""
    if not config.noise or (not config.expanded_noise and is_expanded(name)):
        return None
    return scale * state.rng.gaussian(state.position[name].shape)


def sgld_step(state, grad, lr, config):
    _check_grad(state, grad)
    scale = math.sqrt(2.0 * lr * config.temperature)
    for name, theta in state.position.items():
        theta -= lr * grad[name]
        z = _noise(state, config, name, scale)
        if z is not None:
            theta += z
    state.step += 1
    return state


def psgld_step(state, grad, lr, config):
    _check_grad(state, grad)
    beta = config.beta
    scale = math.sqrt(2.0 * lr * config.temperature)
    for name, theta in state.position.items():
        g = grad[name]
        nu = state.nu[name]
        nu *= beta
        nu += (1.0 - beta) * g * g
        precond = np.sqrt(nu) + config.stability
        theta -= lr * g / precond
        z = _noise(state, config, name, scale)
        if z is not None:
            theta += z / np.sqrt(precond)
    state.step += 1
    return state


def sghmc_step(state, grad, lr, config):
    _check_grad(state, grad)
    for name, theta in state.position.items():
        gamma = config.friction_for(name)
        r = state.momentum[name]
        r *= 1.0 - gamma * lr
        r += lr * grad[name]
        z = _noise(state, config, name, math.sqrt(2.0 * gamma * lr * config.temperature))
        if z is not None:
            r += z
        theta -= lr * r
    state.step += 1
    return state


def sgnht_step(state, grad, lr, config):
    """One thermostat step; the kinetic statistic uses the momentum before the update."""
    _check_grad(state, grad)
    xi = state.xi
    n = sum(r.size for r in state.momentum.values())
    kinetic = sum(float(np.vdot(r, r)) for r in state.momentum.values()) / n
    xi_noise = config.xi0 if config.thermostat_noise == "initial" else xi
    scale = math.sqrt(2.0 * max(xi_noise, 0.0) * lr * config.temperature)
    for name, theta in state.position.items():
        r = state.momentum[name]
        r *= 1.0 - xi * lr
        r += lr * grad[name]
        z = _noise(state, config, name, scale)
        if z is not None:
            r += z
        theta -= lr * r
    state.xi = xi + lr * (kinetic - config.temperature)
    state.step += 1
    return state


STEPS = {"sgld": sgld_step, "psgld": psgld_step, "sghmc": sghmc_step, "sgnht": sgnht_step}


def _tree_map(fn, *trees):
    if isinstance(trees[0], dict):
        return {k: fn(*(t[k] for t in trees)) for k in trees[0]}
    return fn(*trees)


def _finite(tree):
    vals = tree.values() if isinstance(tree, dict) else [tree]
    return all(np.all(np.isfinite(v)) for v in vals)


def leapfrog(position, momentum, grad_fn, lr, n_steps):
    """Half-kick / drift / half-kick integration of ``H = U(q) + |p|^2 / 2``.

    ``grad_fn`` returns the gradient of ``U``. Works on arrays or ParamTrees;
    inputs are not modified.
    """
    q = _tree_map(lambda a: np.array(a, dtype=np.float64), position)
    p = _tree_map(lambda a: np.array(a, dtype=np.float64), momentum)
    g = grad_fn(q)
    for i in range(n_steps):
        p = _tree_map(lambda pi, gi: pi - 0.5 * lr * gi, p, g)
        q = _tree_map(lambda qi, pi: qi + lr * pi, q, p)
        g = grad_fn(q)
        p = _tree_map(lambda pi, gi: pi - 0.5 * lr * gi, p, g)
        if not (_finite(q) and _finite(p)):
            raise DivergenceError(i)
    return q, p


def _kinetic(p):
    vals = p.values() if isinstance(p, dict) else [p]
    return 0.5 * sum(float(np.vdot(v, v)) for v in vals)


def hmc(potential, grad_fn, position, n_samples, lr, n_leapfrog, rng, metropolis=False,
        on_divergence="raise"):
    """Fixed-step HMC with fresh unit-variance momenta each iteration.

    Returns ``(samples, accepted, divergent)``; without ``metropolis`` every
    finite proposal is kept. With ``on_divergence="reject"`` a trajectory that
    overflows is discarded and the chain stays put; otherwise it raises
    ``DivergenceError`` carrying the iteration index.
    """
    if on_divergence not in ("raise", "reject"):
        raise ValueError("on_divergence is 'raise' or 'reject'")
    q = _tree_map(lambda a: np.array(a, dtype=np.float64), position)
    samples = []
    accepted = divergent = 0
    for i in range(n_samples):
        p0 = _tree_map(lambda a: rng.gaussian(np.shape(a)), q)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                q1, p1 = leapfrog(q, p0, grad_fn, lr, n_leapfrog)
        except DivergenceError:
            if on_divergence == "raise":
                raise DivergenceError(i) from None
            divergent += 1
            samples.append(q)
            continue
        if metropolis:
            h0 = potential(q) + _kinetic(p0)
            h1 = potential(q1) + _kinetic(p1)
            if math.log(rng.uniform()) < h0 - h1:
                q = q1
                accepted += 1
        else:
            q = q1
            accepted += 1
        samples.append(q)
    return samples, accepted, divergent


@dataclass
class SampleSet:
    """Collected (merged) samples with one metadata dict per sample."""

    samples: list = field(default_factory=list)
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def run_chain(grad_fn, position, kind, schedule, config, rng, merge=None, callback=None):
    """Run ``schedule.cycles`` cycles and collect one sample at the end of each.

    ``grad_fn(position, step)`` returns ``(potential_value_or_None, grads)``.
    ``merge`` maps a position to the stored tree (e.g. multiplying out
    expanded matrices). ``callback(state, lr, value)`` runs after every step.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    update = STEPS[kind]
    state = init_state(kind, position, rng, config)
    merge = merge or (lambda pos: {k: v.copy() for k, v in pos.items()})
    out = SampleSet()
    for m in range(schedule.cycles):
        state.cycle = m
        for _ in range(schedule.steps_per_cycle):
            lr = step_size(schedule, state.step)
            value, grad = grad_fn(state.position, state.step)
            update(state, grad, lr, config)
            if callback is not None:
                callback(state, lr, value)
        out.samples.append(merge(state.position))
        out.meta.append({"cycle": m, "step": state.step,
                         "phase": (state.step % schedule.steps_per_cycle) / schedule.steps_per_cycle})
    return out
