"""MLP with standard (SP) and expanded (EP) weight parameterizations.

A layer's weight is ``W = P_c ... P_1 @ V @ Q_1 ... Q_d`` and its bias is
``b = P_c ... P_1 @ a``. Parameters live in a ``ParamTree``: an ordered dict
mapping names such as ``"0.P1"``, ``"0.V"``, ``"0.Q1"``, ``"0.a"`` to float64
arrays. Low-rank expanded matrices ``P = diag(D) + L1.T @ L2`` are stored as
``"0.P1.D"``, ``"0.P1.L1"``, ``"0.P1.L2"``. Merged trees use ``"0.W"`` and
``"0.b"``. Weights are ``out x in`` and inputs are row batches.
"""
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, SpecError

ACTIVATIONS = ("swish", "relu", "identity")
_NAME = re.compile(r"^(\d+)\.(P\d+|Q\d+|V|a|W|b)(?:\.(D|L1|L2))?$")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "swish"
    c: int = 0
    d: int = 0
    rank: int | None = None

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise SpecError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.c < 0 or self.d < 0:
            raise SpecError("expansion counts c, d must be non-negative")
        if self.rank is not None:
            widths = ([self.out_dim] if self.c else []) + ([self.in_dim] if self.d else [])
            width = min(widths, default=0)
            if not 1 <= self.rank <= width:
                raise SpecError(f"low-rank r={self.rank} must lie in [1, {width}]")

    @property
    def mode(self):
        if self.c == 0 and self.d == 0:
            return "SP"
        return "LowRankEP" if self.rank is not None else "EP"


def mlp_specs(widths, activation="swish", c=0, d=0, rank=None):
    """Layer specs for an MLP with the given layer widths, e.g. ``[2, 16, 16, 2]``."""
    if len(widths) < 2:
        raise SpecError("need at least an input and an output width")
    return [LayerSpec(i, o, activation, c, d, rank) for i, o in zip(widths[:-1], widths[1:])]


def sp_specs(specs):
    return [replace(s, c=0, d=0, rank=None) for s in specs]


def parse_name(name):
    """Split a tree key into ``(layer, role, part)``; ``part`` is None for dense tensors."""
    m = _NAME.match(name)
    if m is None:
        raise KeyError(f"not a parameter name: {name!r}")
    return int(m.group(1)), m.group(2), m.group(3)


def is_expanded(name):
    """True for tensors belonging to an expanded matrix P_i or Q_j."""
    m = _NAME.match(name)
    return m is not None and m.group(2)[0] in "PQ"


def param_shapes(spec, layer):
    """Ordered ``(name, shape)`` pairs: P_1..P_c, V, Q_1..Q_d, a."""
    out = []

    def expanded(tag, n):
        if spec.rank is None:
            out.append((f"{layer}.{tag}", (n, n)))
        else:
            out.append((f"{layer}.{tag}.D", (n,)))
            out.append((f"{layer}.{tag}.L1", (spec.rank, n)))
            out.append((f"{layer}.{tag}.L2", (spec.rank, n)))

    for i in range(1, spec.c + 1):
        expanded(f"P{i}", spec.out_dim)
    out.append((f"{layer}.V", (spec.out_dim, spec.in_dim)))
    for j in range(1, spec.d + 1):
        expanded(f"Q{j}", spec.in_dim)
    out.append((f"{layer}.a", (spec.out_dim,)))
    return out


def init_params(specs, rng, ep_init="identity"):
    """He-normal base matrices, zero biases, identity expanded matrices.

    ``ep_init="balanced"`` perturbs dense expanded matrices to
    ``I + 1e-3 * N(0, 1)``. Low-rank factors always start at ``D = 1``,
    ``L1 = L2 = 0``.
    """
    if ep_init not in ("identity", "balanced"):
        raise SpecError(f"unknown ep_init {ep_init!r}")
    params = {}
    for layer, spec in enumerate(specs):
        for name, shape in param_shapes(spec, layer):
            _, role, part = parse_name(name)
            if role == "V":
                params[name] = rng.gaussian(shape) * np.sqrt(2.0 / spec.in_dim)
            elif role == "a" or part in ("L1", "L2"):
                params[name] = np.zeros(shape)
            elif part == "D":
                params[name] = np.ones(shape)
            else:
                eye = np.eye(shape[0])
                if ep_init == "balanced":
                    eye = eye + 1e-3 * rng.gaussian(shape)
                params[name] = eye
    return params


def expanded_matrix(params, name):
    """Materialize a dense or low-rank expanded matrix by its base name, e.g. ``"0.P1"``."""
    if name in params:
        return params[name]
    D = params[name + ".D"]
    return np.diag(D) + params[name + ".L1"].T @ params[name + ".L2"]


def _factor_names(spec, layer):
    left = [f"{layer}.P{i}" for i in range(spec.c, 0, -1)]
    right = [f"{layer}.Q{j}" for j in range(1, spec.d + 1)]
    return left, right


def layer_factors(params, spec, layer):
    """Dense factors ``[P_c, ..., P_1, V, Q_1, ..., Q_d]`` of one expanded layer."""
    left, right = _factor_names(spec, layer)
    return [expanded_matrix(params, n) for n in left + [f"{layer}.V"] + right]


def merge_linear(P=(), V=None, Q=()):
    """``W = P_c ... P_1 @ V @ Q_1 ... Q_d`` for ``P = [P_1..P_c]``, ``Q = [Q_1..Q_d]``."""
    W = np.asarray(V, dtype=np.float64)
    for Pi in P:
        if Pi.shape[1] != W.shape[0]:
            raise ShapeError(f"P factor {Pi.shape} does not conform with {W.shape}")
        W = Pi @ W
    right = None
    for Qj in Q:
        right = Qj if right is None else right @ Qj
    if right is not None:
        if W.shape[1] != right.shape[0]:
            raise ShapeError(f"Q product {right.shape} does not conform with {W.shape}")
        W = W @ right
    return W


def merge_bias(P, a):
    b = np.asarray(a, dtype=np.float64)
    for Pi in P:
        if Pi.shape[1] != b.shape[0]:
            raise ShapeError(f"P factor {Pi.shape} does not conform with bias {b.shape}")
        b = Pi @ b
    return b


def chain_grads(factors, G):
    """Gradients of ``<G, F_1 F_2 ... F_e>`` with respect to each factor.

    ``grad F_j = (F_1..F_{j-1}).T @ G @ (F_{j+1}..F_e).T``.
    """
    e = len(factors)
    prefix = [None] * e
    acc = None
    for j in range(e):
        prefix[j] = acc
        acc = factors[j] if acc is None else acc @ factors[j]
    grads = [None] * e
    acc = None
    for j in range(e - 1, -1, -1):
        g = G if prefix[j] is None else prefix[j].T @ G
        grads[j] = g if acc is None else g @ acc.T
        acc = factors[j] if acc is None else factors[j] @ acc
    return grads


def layer_weights(params, spec, layer):
    """Merged ``(W, b)`` of one layer from either a factor tree or a merged tree."""
    if f"{layer}.W" in params:
        return params[f"{layer}.W"], params[f"{layer}.b"]
    left, right = _factor_names(spec, layer)
    P = [expanded_matrix(params, n) for n in reversed(left)]
    Q = [expanded_matrix(params, n) for n in right]
    return merge_linear(P, params[f"{layer}.V"], Q), merge_bias(P, params[f"{layer}.a"])


def merge_params(params, specs):
    """Merged tree ``{"l.W", "l.b"}`` with the same forward function as ``params``."""
    merged = {}
    for layer, spec in enumerate(specs):
        W, b = layer_weights(params, spec, layer)
        merged[f"{layer}.W"] = W
        merged[f"{layer}.b"] = b
    return merged


def _layer_grads(params, spec, layer, gW, gb):
    """Distribute merged-weight gradients onto a layer's own tensors."""
    if f"{layer}.W" in params:
        return {f"{layer}.W": gW, f"{layer}.b": gb}
    left, right = _factor_names(spec, layer)
    names = left + [f"{layer}.V"] + right
    mats = [expanded_matrix(params, n) for n in names]
    grads = dict(zip(names, chain_grads(mats, gW)))
    a = params[f"{layer}.a"]
    bias_grads = chain_grads(mats[:len(left)] + [a[:, None]], gb[:, None])
    for n, g in zip(left, bias_grads[:-1]):
        grads[n] = grads[n] + g
    grads[f"{layer}.a"] = bias_grads[-1][:, 0]

    out = {}
    for name, _ in param_shapes(spec, layer):
        base, _, part = name.rpartition(".") if name.count(".") == 2 else (name, None, None)
        if part is None:
            out[name] = grads[name]
            continue
        g = grads[base]
        if part == "D":
            out[name] = np.diag(g).copy()
        elif part == "L1":
            out[name] = params[base + ".L2"] @ g.T
        else:
            out[name] = params[base + ".L1"] @ g
    return out


def _activate(z, kind):
    if kind == "swish":
        s = _sigmoid(z)
        return z * s, s
    if kind == "relu":
        return np.maximum(z, 0.0), None
    return z, None


def _activation_grad(z, cache, kind):
    if kind == "swish":
        s = cache
        return s + z * s * (1.0 - s)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_input(specs, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != specs[0].in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match in_dim={specs[0].in_dim}")
    return x


def forward(params, specs, x):
    """Logits of the MLP; hidden layers use their activation, the last is affine."""
    h = _check_input(specs, x)
    last = len(specs) - 1
    for layer, spec in enumerate(specs):
        W, b = layer_weights(params, spec, layer)
        if W.shape != (spec.out_dim, spec.in_dim):
            raise ShapeError(f"layer {layer} weight has shape {W.shape}")
        z = h @ W.T + b
        h = z if layer == last else _activate(z, spec.activation)[0]
    return h


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(logits, y):
    """Summed categorical cross-entropy and its gradient with respect to the logits."""
    y = np.asarray(y, dtype=np.int64)
    lp = log_softmax(logits)
    idx = np.arange(len(y))
    value = -lp[idx, y].sum()
    dz = np.exp(lp)
    dz[idx, y] -= 1.0
    return value, dz


def loss_and_grad(params, specs, x, y=None, loss="cross_entropy"):
    """Loss value and its exact gradient for every tensor in ``params``.

    ``loss`` is ``"cross_entropy"`` (summed over the batch, needs ``y``) or a
    callable ``f(logits) -> (value, dvalue/dlogits)``.
    """
    h = _check_input(specs, x)
    last = len(specs) - 1
    cache = []
    for layer, spec in enumerate(specs):
        W, b = layer_weights(params, spec, layer)
        z = h @ W.T + b
        if layer == last:
            cache.append((h, W, z, None))
            h = z
        else:
            a, extra = _activate(z, spec.activation)
            cache.append((h, W, z, extra))
            h = a
    if loss == "cross_entropy":
        if y is None:
            raise ValueError("cross-entropy loss needs labels")
        value, dz = cross_entropy(h, y)
    elif callable(loss):
        value, dz = loss(h)
        dz = np.asarray(dz, dtype=np.float64)
    else:
        raise ValueError(f"unknown loss kind {loss!r}")

    grads = {}
    for layer in range(last, -1, -1):
        spec = specs[layer]
        h_in, W, z, extra = cache[layer]
        if layer != last:
            dz = dz * _activation_grad(z, extra, spec.activation)
        gW = dz.T @ h_in
        gb = dz.sum(axis=0)
        grads.update(_layer_grads(params, spec, layer, gW, gb))
        dz = dz @ W
    return value, {k: grads[k] for k in params}


def backward(params, specs, x, y=None, loss="cross_entropy"):
    return loss_and_grad(params, specs, x, y, loss)[1]


def merge_conv(P, V, Q):
    """Channel-wise expansion of a ``k x k x c_out x c_in`` kernel.

    ``W[a, b, i, j] = sum_{u, l} P[i, u] V[a, b, u, l] Q[l, j]``.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 4 or P.shape != (V.shape[2], V.shape[2]) or Q.shape != (V.shape[3], V.shape[3]):
        raise ShapeError(f"conv merge needs P c_out^2, V kxkxc_outxc_in, Q c_in^2; "
                         f"got {P.shape}, {V.shape}, {Q.shape}")
    return np.einsum("iu,abul,lj->abij", P, V, Q)


def merge_conv_grads(P, V, Q, G):
    """Gradients of ``sum(G * merge_conv(P, V, Q))`` for ``P``, ``V`` and ``Q``."""
    gP = np.einsum("abij,abul,lj->iu", G, V, Q)
    gV = np.einsum("abij,iu,lj->abul", G, P, Q)
    gQ = np.einsum("abij,iu,abul->lj", G, P, V)
    return gP, gV, gQ


def merge_frn(P, Q, s):
    """Merged FRN vector ``s_i = sum_{u,l} P[i,u] Q[u,l] s[l]`` (same rule for bias and threshold)."""
    s = np.asarray(s, dtype=np.float64)
    if P.shape[1] != Q.shape[0] or Q.shape[1] != s.shape[0]:
        raise ShapeError(f"FRN merge shapes do not conform: {P.shape}, {Q.shape}, {s.shape}")
    return P @ (Q @ s)


def merge_frn_grads(P, Q, s, g):
    """Gradients of ``g . merge_frn(P, Q, s)`` for ``P``, ``Q`` and ``s``."""
    Qs = Q @ s
    Ptg = P.T @ g
    return np.outer(g, Qs), np.outer(Ptg, s), Q.T @ Ptg


def num_params(params):
    return sum(v.size for v in params.values())
