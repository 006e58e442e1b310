"""Ensemble metrics, sample-diversity diagnostics, loss-landscape probes and
numerical checks of the expanded-parameterization gradient flow."""
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, potential, samplers
from .data import batches
from .errors import DegenerateBasisError, InputError, ShapeError
from .tensor import svd_values


# --- ensemble metrics -------------------------------------------------------

@dataclass
class MetricsReport:
    err: float
    nll: float
    amb: float
    ece: float
    individual_nll: list = field(default_factory=list)
    num_samples: int = 0

    def as_dict(self):
        ind = self.individual_nll
        return {
            "err": self.err,
            "nll": self.nll,
            "amb": self.amb,
            "ece": self.ece,
            "ind_nll": float(np.mean(ind)) if ind else float("nan"),
            "ens_nll": self.nll,
            "individual_nll": list(ind),
            "num_samples": self.num_samples,
        }


def member_logits(samples, specs, x):
    """Stacked logits ``(M, N, K)`` of every sample on inputs ``x``."""
    if len(samples) == 0:
        raise InputError("empty sample set")
    return np.stack([nn.forward(s, specs, x) for s in samples])


def bma_probs(logits):
    """Monte Carlo model average: mean of member softmax probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] == 0:
        raise InputError("expected member logits of shape (M, N, K) with M >= 1")
    return nn.softmax(logits).mean(axis=0)


def bma_predict(samples, specs, x):
    return bma_probs(member_logits(samples, specs, x))


def err(probs, labels):
    """0-1 error of the argmax prediction (ties go to the lowest class index)."""
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(probs, axis=1) != labels))


def nll(probs, labels):
    labels = np.asarray(labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(p)))


def _member_losses(logits, labels):
    labels = np.asarray(labels)
    lp = nn.log_softmax(logits)
    return -lp[:, np.arange(len(labels)), labels].mean(axis=1)


def ambiguity_terms(logits, labels):
    """``(average member loss, loss of the mean-logit ensemble)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] == 0:
        raise InputError("expected member logits of shape (M, N, K) with M >= 1")
    average = float(_member_losses(logits, labels).mean())
    ensemble = float(_member_losses(logits.mean(axis=0)[None], labels)[0])
    return average, ensemble


def amb(logits, labels):
    """Ensemble ambiguity: average member cross-entropy minus mean-logit ensemble cross-entropy."""
    average, ensemble = ambiguity_terms(logits, labels)
    return average - ensemble


def ece(probs, labels, bins=15):
    """Binned expected calibration error with bins ``((j-1)/J, j/J]``."""
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.arange(1, bins + 1) / bins
    idx = np.minimum(np.searchsorted(edges, conf, side="left"), bins - 1)
    total = 0.0
    for j in range(bins):
        mask = idx == j
        if mask.any():
            total += mask.sum() * abs(correct[mask].mean() - conf[mask].mean())
    return float(total / len(labels))


def metrics_report(logits, labels, bins=15):
    probs = bma_probs(logits)
    return MetricsReport(
        err=err(probs, labels),
        nll=nll(probs, labels),
        amb=amb(logits, labels),
        ece=ece(probs, labels, bins),
        individual_nll=[float(v) for v in _member_losses(logits, labels)],
        num_samples=len(logits),
    )


# --- parameter-space diversity ---------------------------------------------

def flatten(tree):
    return np.concatenate([np.ravel(v) for v in tree.values()]) if tree else np.zeros(0)


def distances(samples):
    """``(d, d_bar)`` for each consecutive pair, with ``d_bar = d / |theta_m|``."""
    rows = []
    for a, b in zip(samples[:-1], samples[1:]):
        va, vb = flatten(a), flatten(b)
        d = float(np.linalg.norm(vb - va))
        na = float(np.linalg.norm(va))
        rows.append((d, d / na if na > 0 else float("inf") if d > 0 else 0.0))
    return rows


def singular_trace(samples, specs):
    """Rows ``(sample, layer, sigma_max, sigma_min, condition)`` of merged layer weights."""
    rows = []
    for m, s in enumerate(samples):
        for layer, spec in enumerate(specs):
            W, _ = nn.layer_weights(s, spec, layer)
            sv = svd_values(W)
            smax, smin = float(sv[0]), float(sv[-1])
            rows.append((m, layer, smax, smin, smax / smin if smin > 0 else float("inf")))
    return rows


# --- preconditioning induced by matrix factorization ------------------------

def _prod(mats, n):
    out = np.eye(n)
    for m in mats:
        out = out @ m
    return out


def precond_matrix(factors):
    """Matrix ``P`` with ``vec(dW) = -P vec(grad_W F) dt`` for ``W = W_1 ... W_e``.

    ``P = sum_j (W_{j+1:e}^T W_{j+1:e}) kron (W_{1:j-1} W_{1:j-1}^T)`` with
    empty products equal to the identity.
    """
    factors = [np.asarray(f, dtype=np.float64) for f in factors]
    if not factors:
        raise ShapeError("need at least one factor")
    for a, b in zip(factors[:-1], factors[1:]):
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"factors {a.shape} and {b.shape} do not conform")
    rows, cols = factors[0].shape[0], factors[-1].shape[1]
    P = np.zeros((rows * cols, rows * cols))
    for j in range(len(factors)):
        left = _prod(factors[:j], rows)
        right = _prod(factors[j + 1:], factors[j].shape[1])
        P += np.kron(right.T @ right, left @ left.T)
    return P


def factor_gradient_step(factors, grad_fn, lr):
    """One explicit Euler step of every factor along its own gradient of ``F(W_1...W_e)``."""
    W = _prod(factors, factors[0].shape[0])
    G = grad_fn(W)
    grads = nn.chain_grads(factors, G)
    return [f - lr * g for f, g in zip(factors, grads)], G


def precond_flow_check(factors, grad_fn, lr):
    """Relative first-order residual between a factor-wise step and ``-lr * P vec(G)``."""
    factors = [np.asarray(f, dtype=np.float64) for f in factors]
    n = factors[0].shape[0]
    W0 = _prod(factors, n)
    stepped, G = factor_gradient_step(factors, grad_fn, lr)
    dW = _prod(stepped, n) - W0
    predicted = lr * precond_matrix(factors) @ G.reshape(-1, order="F")
    denom = np.linalg.norm(predicted)
    return float(np.linalg.norm(dW.reshape(-1, order="F") + predicted) / denom)


# --- exploration bound audit ------------------------------------------------

@dataclass
class BoundRecord:
    """Per-step quantities of an SGLD run, measured on merged layer weights.

    ``lhs`` is ``|W(t+1) - W(t)|`` over all layers; ``grad``, ``grad_noise``
    and ``noise`` hold per-layer norms of the full-data weight gradient, of
    its minibatch error, and of the merged displacement caused by injected
    noise divided by the step size; ``svmax`` is the largest singular value
    over all factors before the step.
    """

    lr: float
    lhs: float
    grad: list
    grad_noise: list
    noise: list
    svmax: float


def exploration_bound(trace, num_layers, c, d):
    """Per-step ``(lhs, rhs)`` with running-supremum constants ``h, s, C, M``.

    ``rhs = lr L^2 (c+d+1) M^(c+d) (h + s) + lr L C``.
    """
    L = num_layers
    h = s = C = M = 0.0
    out = []
    for rec in trace:
        h = max(h, max(rec.grad))
        s = max(s, max(rec.grad_noise))
        C = max(C, max(rec.noise))
        M = max(M, rec.svmax)
        rhs = rec.lr * L**2 * (c + d + 1) * M ** (c + d) * (h + s) + rec.lr * L * C
        out.append((rec.lhs, rhs))
    return out


def bound_violations(pairs, rtol=0.0):
    return sum(1 for lhs, rhs in pairs if lhs > rhs * (1.0 + rtol))


def _layer_norms(num_layers, fn):
    return [float(np.linalg.norm(fn(layer))) for layer in range(num_layers)]


def exploration_trace(position, specs, dataset, pot_spec, lr, steps, rng, batch_rng):
    """Run SGLD with noise only on ``V`` and record :class:`BoundRecord` per step.

    ``h`` uses the full-data likelihood gradient with respect to each merged
    weight matrix and ``s`` the deviation of the rescaled minibatch gradient
    from it; the noise term is measured as the merged displacement that the
    injected noise adds on top of the gradient drift.
    """
    config = samplers.SamplerConfig(prior_variance=pot_spec.prior_variance,
                                    temperature=pot_spec.temperature, expanded_noise=False)
    state = samplers.init_state("sgld", position, rng, config)
    sp = nn.sp_specs(specs)
    stream = batches(dataset, pot_spec.batch_size, batch_rng)
    L = len(specs)
    trace = []
    for _ in range(steps):
        batch = next(stream)
        _, grad = potential.potential_and_grad(state.position, specs, batch, pot_spec)
        before = nn.merge_params(state.position, specs)
        drift = nn.merge_params({k: v - lr * grad[k] for k, v in state.position.items()}, specs)
        _, g_full = nn.loss_and_grad(before, sp, dataset.x, dataset.y)
        _, g_batch = nn.loss_and_grad(before, sp, batch.x, batch.y)
        svmax = max(float(svd_values(f)[0]) for l, spec in enumerate(specs)
                    for f in nn.layer_factors(state.position, spec, l))
        samplers.sgld_step(state, grad, lr, config)
        after = nn.merge_params(state.position, specs)
        lhs = math.sqrt(sum(float(np.sum((after[f"{l}.W"] - before[f"{l}.W"]) ** 2))
                            for l in range(L)))
        batch_scale = pot_spec.dataset_size / len(batch)
        trace.append(BoundRecord(
            lr=lr,
            lhs=lhs,
            grad=_layer_norms(L, lambda l: g_full[f"{l}.W"]),
            grad_noise=_layer_norms(L,
                                    lambda l: batch_scale * g_batch[f"{l}.W"] - g_full[f"{l}.W"]),
            noise=_layer_norms(L, lambda l: (after[f"{l}.W"] - drift[f"{l}.W"]) / lr),
            svmax=svmax,
        ))
    return trace


# --- loss landscape ---------------------------------------------------------

def _error_of(tree, specs, data):
    logits = nn.forward(tree, specs, data.x)
    return float(np.mean(np.argmax(logits, axis=1) != data.y))


def _combine(trees, weights):
    keys = trees[0].keys()
    return {k: sum(w * t[k] for w, t in zip(weights, trees)) for k in keys}


def loss_barrier(theta_a, theta_b, specs, data, n_points=21):
    """Error along the straight line ``(1 - alpha) theta_a + alpha theta_b``."""
    alphas = np.linspace(0.0, 1.0, n_points)
    rows = []
    for alpha in alphas:
        tree = _combine([theta_a, theta_b], [1.0 - alpha, alpha])
        rows.append((float(alpha), _error_of(tree, specs, data)))
    return rows


@dataclass
class Subspace:
    origin: dict
    u: dict
    v: dict
    coords: list
    xs: np.ndarray
    ys: np.ndarray
    errors: np.ndarray

    def point(self, a, b):
        return _combine([self.origin, self.u, self.v], [1.0, a, b])


def plane_basis(theta0, theta1, theta2, rtol=1e-10):
    """Gram-Schmidt basis of the plane through three trees plus in-plane coordinates."""
    keys = list(theta0.keys())
    shapes = {k: np.shape(theta0[k]) for k in keys}
    f0, f1, f2 = flatten(theta0), flatten(theta1), flatten(theta2)
    d1, d2 = f1 - f0, f2 - f0
    n1 = np.linalg.norm(d1)
    if n1 == 0:
        raise DegenerateBasisError("first direction has zero length")
    u = d1 / n1
    w = d2 - (d2 @ u) * u
    n2 = np.linalg.norm(w)
    if n2 <= rtol * max(np.linalg.norm(d2), n1):
        raise DegenerateBasisError("samples are collinear")
    v = w / n2

    def unflat(vec):
        out, i = {}, 0
        for k in keys:
            size = int(np.prod(shapes[k], dtype=np.int64))
            out[k] = vec[i:i + size].reshape(shapes[k])
            i += size
        return out

    coords = [(0.0, 0.0), (float(n1), 0.0), (float(d2 @ u), float(d2 @ v))]
    return unflat(u), unflat(v), coords


def subspace_grid(theta0, theta1, theta2, specs, data, grid_n=21, margin=0.2):
    """Error on a ``grid_n x grid_n`` lattice over the triangle's bounding box plus margin."""
    u, v, coords = plane_basis(theta0, theta1, theta2)
    cx = [c[0] for c in coords]
    cy = [c[1] for c in coords]
    wx = max(cx) - min(cx)
    wy = max(cy) - min(cy)
    xs = np.linspace(min(cx) - margin * wx, max(cx) + margin * wx, grid_n)
    ys = np.linspace(min(cy) - margin * wy, max(cy) + margin * wy, grid_n)
    sub = Subspace(theta0, u, v, coords, xs, ys, np.zeros((grid_n, grid_n)))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            sub.errors[i, j] = _error_of(sub.point(a, b), specs, data)
    return sub


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), math.ulp(1.0))
