import math

import numpy as np
import pytest

from pxsgmcmc import nn, samplers
from pxsgmcmc.errors import DivergenceError
from pxsgmcmc.samplers import SamplerConfig, Schedule, init_state, step_size
from pxsgmcmc.tensor import RngStream

QUIET = SamplerConfig(noise=False, friction=0.0)


def state_for(kind, theta, config=QUIET, seed=0):
    return init_state(kind, {"x": np.array(theta, dtype=float)}, RngStream(seed), config)


def test_schedule_values():
    s = Schedule(0.4, steps_per_cycle=10, cycles=2)
    assert step_size(s, 0) == 0.4
    assert math.isclose(step_size(s, 5), 0.2)
    assert step_size(s, 10) == 0.4
    assert step_size(Schedule(0.3, 10, 1, "constant"), 7) == 0.3
    assert all(step_size(s, t) > 0 for t in range(20))
    with pytest.raises(ValueError):
        Schedule(0.0)


def test_state_layout():
    assert init_state("sgld", {"x": np.zeros(2)}, RngStream(0)).momentum is None
    s = init_state("sgnht", {"x": np.zeros(2)}, RngStream(0), SamplerConfig(xi0=2.0))
    assert s.xi == 2.0 and s.momentum["x"].shape == (2,) and s.nu is None
    assert init_state("psgld", {"x": np.zeros(2)}, RngStream(0)).nu is not None


def test_sgld_deterministic_cases():
    s = state_for("sgld", [1.0, 2.0])
    samplers.sgld_step(s, {"x": np.zeros(2)}, 0.1, QUIET)
    assert s.position["x"].tolist() == [1.0, 2.0] and s.step == 1
    samplers.sgld_step(s, {"x": np.array([1.0, -1.0])}, 0.1, QUIET)
    assert np.allclose(s.position["x"], [0.9, 2.1], rtol=0, atol=1e-15)


def test_sgld_noise_matches_stream():
    cfg = SamplerConfig(temperature=0.5)
    s = state_for("sgld", [0.0, 0.0, 0.0], cfg, seed=9)
    samplers.sgld_step(s, {"x": np.zeros(3)}, 0.02, cfg)
    z = RngStream(9).gaussian(3)
    assert np.array_equal(s.position["x"], math.sqrt(2 * 0.02 * 0.5) * z)


def test_divergence_carries_step():
    s = state_for("sgld", [0.0])
    s.step = 17
    with pytest.raises(DivergenceError) as err:
        samplers.sgld_step(s, {"x": np.array([np.inf])}, 0.1, QUIET)
    assert err.value.step == 17


def test_psgld_cases():
    s = state_for("psgld", [1.0, 1.0])
    for _ in range(3):
        samplers.psgld_step(s, {"x": np.zeros(2)}, 0.1, QUIET)
    assert s.position["x"].tolist() == [1.0, 1.0] and not s.nu["x"].any()
    cfg = SamplerConfig(noise=False, beta=1e-300)
    s = state_for("psgld", [0.0, 0.0], cfg)
    g = np.array([2.0, -0.5])
    samplers.psgld_step(s, {"x": g}, 0.1, cfg)
    assert np.allclose(s.nu["x"], g**2)
    assert np.allclose(s.position["x"], -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-15)


def test_psgld_vs_scalar_oracle():
    cfg = SamplerConfig(beta=0.9, stability=1e-3, temperature=0.7)
    r = np.random.default_rng(0)
    grads = r.normal(size=(20, 3))
    s = state_for("psgld", [0.5, -0.2, 1.0], cfg, seed=4)
    for g in grads:
        samplers.psgld_step(s, {"x": g}, 0.05, cfg)
    noise = RngStream(4)
    theta = [0.5, -0.2, 1.0]
    nu = [0.0, 0.0, 0.0]
    for g in grads:
        z = noise.gaussian(3)
        for i in range(3):
            nu[i] = 0.9 * nu[i] + 0.1 * g[i] * g[i]
            pre = math.sqrt(nu[i]) + 1e-3
            theta[i] = theta[i] - 0.05 * g[i] / pre + math.sqrt(2 * 0.05 * 0.7) * z[i] / math.sqrt(pre)
    assert np.abs(s.position["x"] - theta).max() < 1e-12


def test_sghmc_cases():
    s = state_for("sghmc", [1.0])
    s.momentum["x"][:] = 0.5
    samplers.sghmc_step(s, {"x": np.array([2.0])}, 0.1, QUIET)
    assert np.isclose(s.momentum["x"][0], 0.7) and np.isclose(s.position["x"][0], 0.93)
    cfg = SamplerConfig(noise=False, friction=10.0)
    s = state_for("sghmc", [1.0], cfg)
    s.momentum["x"][:] = 3.0
    samplers.sghmc_step(s, {"x": np.array([0.0])}, 0.1, cfg)
    assert s.momentum["x"][0] == 0.0


def test_sghmc_sign_convention_equivalence():
    # r -> -r maps the r' = (1-ge)r - eg, theta' = theta + e r' form onto ours
    cfg = SamplerConfig(noise=False, friction=3.0)
    s = state_for("sghmc", [0.4, -1.0], cfg)
    r0 = np.array([0.2, -0.7])
    s.momentum["x"][:] = r0
    g = np.array([1.5, 0.3])
    samplers.sghmc_step(s, {"x": g}, 0.05, cfg)
    alt_r = (1 - 3.0 * 0.05) * (-r0) - 0.05 * g
    alt_theta = np.array([0.4, -1.0]) + 0.05 * alt_r
    assert np.allclose(s.momentum["x"], -alt_r, rtol=0, atol=1e-15)
    assert np.allclose(s.position["x"], alt_theta, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind,steps", [("sghmc", 5), ("sgnht", 1)])
def test_zero_friction_is_momentum_descent(kind, steps):
    # the thermostat moves away from zero after one step, so SGNHT is checked once
    theta = np.random.default_rng(1).normal(size=4)
    cfg = SamplerConfig(noise=False, friction=0.0, xi0=0.0)
    s = state_for(kind, theta, cfg)
    t_ref, m_ref = theta.copy(), np.zeros(4)
    for _ in range(steps):
        samplers.STEPS[kind](s, {"x": 2 * s.position["x"]}, 0.1, cfg)
        m_ref = m_ref + 0.1 * 2 * t_ref
        t_ref = t_ref - 0.1 * m_ref
        assert np.array_equal(s.position["x"], t_ref)


def test_sgnht_thermostat():
    s = state_for("sgnht", [0.0, 0.0], SamplerConfig(noise=False, xi0=1.0))
    samplers.sgnht_step(s, {"x": np.zeros(2)}, 0.1, SamplerConfig(noise=False, xi0=1.0))
    assert math.isclose(s.xi, 0.9)
    cfg = SamplerConfig(noise=False, xi0=0.5)
    s = state_for("sgnht", [0.0, 0.0], cfg)
    s.momentum["x"][:] = [1.0, -1.0]
    samplers.sgnht_step(s, {"x": np.zeros(2)}, 0.1, cfg)
    assert s.xi == 0.5


def test_sgnht_kinetic_equilibrium():
    cfg = SamplerConfig(xi0=1.0)
    s = init_state("sgnht", {"x": np.zeros(200)}, RngStream(5), cfg)
    lr, stats = 0.05, []
    for t in range(4000):
        samplers.sgnht_step(s, {"x": s.position["x"].copy()}, lr, cfg)
        if t >= 1000:
            r = s.momentum["x"]
            stats.append(float(r @ r) / r.size)
    assert 0.9 <= np.mean(stats) <= 1.1


def test_per_role_friction():
    specs = nn.mlp_specs([2, 3], c=1, d=1)
    pos = nn.init_params(specs, RngStream(0))
    grads = {k: np.ones_like(v) for k, v in pos.items()}
    same = SamplerConfig(friction=4.0, friction_pq=4.0)
    uniform = SamplerConfig(friction=4.0)
    a = init_state("sghmc", pos, RngStream(2), same)
    b = init_state("sghmc", pos, RngStream(2), uniform)
    for _ in range(3):
        samplers.sghmc_step(a, grads, 0.01, same)
        samplers.sghmc_step(b, grads, 0.01, uniform)
    for k in pos:
        assert np.array_equal(a.position[k], b.position[k])
    cfg = SamplerConfig(noise=False, friction=50.0, friction_pq=0.0)
    c = init_state("sghmc", pos, RngStream(2), cfg)
    for k in pos:
        c.momentum[k][:] = 1.0
    samplers.sghmc_step(c, {k: np.zeros_like(v) for k, v in pos.items()}, 0.01, cfg)
    assert np.all(c.momentum["0.P1"] == 1.0) and np.all(c.momentum["0.V"] == 0.5)


@pytest.mark.parametrize("kind,expected", [("sgld", 2 * 0.01 * 0.3), ("sghmc", 2 * 5 * 0.01 * 0.3)])
def test_injected_noise_variance(kind, expected):
    cfg = SamplerConfig(friction=5.0, temperature=0.3)
    s = state_for(kind, np.zeros(10**5), cfg, seed=6)
    before = s.position["x"].copy() if kind == "sgld" else s.momentum["x"].copy()
    samplers.STEPS[kind](s, {"x": np.zeros(10**5)}, 0.01, cfg)
    after = s.position["x"] if kind == "sgld" else s.momentum["x"]
    assert abs(np.var(after - before) / expected - 1) < 0.02


def test_expanded_noise_switch():
    specs = nn.mlp_specs([2, 3], c=1)
    pos = nn.init_params(specs, RngStream(0))
    cfg = SamplerConfig(expanded_noise=False)
    s = init_state("sgld", pos, RngStream(1), cfg)
    samplers.sgld_step(s, {k: np.zeros_like(v) for k, v in pos.items()}, 0.1, cfg)
    assert np.array_equal(s.position["0.P1"], np.eye(3))
    assert not np.array_equal(s.position["0.V"], pos["0.V"])


def test_leapfrog_oscillator_energy_and_reversibility():
    q0, p0 = np.array([1.0]), np.array([0.0])
    q, p = samplers.leapfrog(q0, p0, lambda x: x, 0.01, 1000)
    H0 = 0.5 * (q0 @ q0 + p0 @ p0)
    assert abs(0.5 * (q @ q + p @ p) - H0) < 1e-3
    qb, pb = samplers.leapfrog(q, -p, lambda x: x, 0.01, 1000)
    assert np.abs(qb - q0).max() < 1e-10 and np.abs(-pb - p0).max() < 1e-10


def test_leapfrog_free_drift_and_divergence():
    q, p = samplers.leapfrog(np.array([1.0, 2.0]), np.array([0.5, -1.0]),
                             lambda x: np.zeros_like(x), 0.1, 7)
    assert np.allclose(q, [1.0 + 0.35, 2.0 - 0.7]) and np.array_equal(p, [0.5, -1.0])
    with pytest.raises(DivergenceError):
        with np.errstate(over="ignore", invalid="ignore"):
            samplers.leapfrog(np.array([1.0]), np.array([0.0]), lambda x: -1e300 * x * x, 1.0, 10)


def test_hmc_metropolis_accepts_oscillator():
    samples, accepted, divergent = samplers.hmc(
        lambda q: 0.5 * float(q @ q), lambda q: q, np.zeros(2), 300, 0.1, 10, RngStream(0),
        metropolis=True)
    assert divergent == 0 and accepted > 280
    xs = np.array(samples)
    assert 0.7 < xs.var() < 1.3


def test_hmc_divergence_policies():
    def grad(q):
        return -q**3 * 1e200

    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as err:
            samplers.hmc(lambda q: 0.0, grad, np.ones(1), 5, 1.0, 5, RngStream(0))
        assert err.value.step == 0
        samples, accepted, divergent = samplers.hmc(lambda q: 0.0, grad, np.ones(1), 5, 1.0, 5,
                                                    RngStream(0), on_divergence="reject")
    assert divergent == 5 and accepted == 0
    assert all(np.array_equal(s, np.ones(1)) for s in samples)


def test_run_chain_zero_gradient():
    pos = {"x": np.array([1.0, 2.0])}
    out = samplers.run_chain(lambda p, t: (0.0, {"x": np.zeros(2)}), pos, "sghmc",
                             Schedule(0.1, 1, 3), QUIET, RngStream(0))
    assert len(out) == 3 and all(s["x"].tolist() == [1.0, 2.0] for s in out.samples)
    assert [m["cycle"] for m in out.meta] == [0, 1, 2]


def test_run_chain_sp_equals_ep00():
    r = np.random.default_rng(0)
    x, y = r.normal(size=(50, 2)), r.integers(0, 2, size=50)

    def run(specs):
        pos = nn.init_params(specs, RngStream(3))
        cfg = SamplerConfig(friction=5.0)
        return samplers.run_chain(lambda p, t: nn.loss_and_grad(p, specs, x, y), pos, "sghmc",
                                  Schedule(0.01, 5, 2), cfg, RngStream(4),
                                  merge=lambda p: nn.merge_params(p, specs))

    a = run(nn.mlp_specs([2, 4, 2]))
    b = run(nn.mlp_specs([2, 4, 2], c=0, d=0))
    assert all(np.array_equal(s[k], t[k]) for s, t in zip(a.samples, b.samples) for k in s)


def test_run_chain_smoke_finite():
    from pxsgmcmc import data, potential

    train = data.standardize(data.two_moons(200, 0.1, RngStream(0)))
    specs = nn.mlp_specs([2, 8, 2], c=1, d=1)
    spec = potential.PotentialSpec(1.0, 200, 50)
    stream = data.batches(train, 50, RngStream(1))
    out = samplers.run_chain(
        lambda p, t: potential.potential_and_grad(p, specs, next(stream), spec),
        nn.init_params(specs, RngStream(2)), "sghmc", Schedule(1e-3, 20, 5),
        SamplerConfig(friction=10.0, friction_pq=1.0), RngStream(3),
        merge=lambda p: nn.merge_params(p, specs))
    assert len(out) == 5
    assert set(out.samples[0]) == {"0.W", "0.b", "1.W", "1.b"}
    assert all(np.all(np.isfinite(v)) for s in out.samples for v in s.values())
