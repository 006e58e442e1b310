"""Command-line runner: ``pxsgmcmc {mog,sample,eval,diag}``.

Configuration is one flat JSON object. Any field can be overridden with
``--key=value`` (values parsed as JSON when possible); explicit flags win
over the config file. Outputs are CSV (comma, header row, LF) and JSON.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O.
"""
import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis, data, nn, potential, samplers, store, targets
from .errors import DegenerateBasisError, DivergenceError, FormatError, InputError, SpecError
from .tensor import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
CHECKPOINT = "samples.pxs"


@dataclass
class RunConfig:
    # sampler and schedule
    sampler: str = "sghmc"
    lr0: float = 7e-4
    steps_per_cycle: int = 300
    cycles: int = 20
    schedule: str = "cyclical"
    friction: float = 10.0
    friction_pq: float | None = 1.0
    beta: float = 0.99
    stability: float = 1e-8
    xi0: float = 1.0
    # model
    widths: list = field(default_factory=lambda: [2, 16, 16, 2])
    activation: str = "swish"
    c: int = 1
    d: int = 1
    rank: int | None = None
    ep_init: str = "identity"
    # potential
    prior_variance: float = 0.1
    temperature: float = 1.0
    batch_size: int = 256
    # data: "two_moons", "spirals", "csv:PATH" or "idx:IMAGES,LABELS"
    dataset: str = "two_moons"
    n_train: int = 2048
    n_test: int = 1000
    data_noise: float = 0.2
    num_classes: int | None = None
    data_seed: int = 1000
    # run
    seed: int = 0
    out: str = "out"
    chains: int = 1
    checkpoint: str | None = None
    # mog
    mog_samples: int = 2000
    mog_lr: float = 0.05
    mog_leapfrog: int = 10
    mog_variance: float = 0.03
    mog_radius: float = 0.5
    mog_grid: int = 101
    # diag
    bound_steps: int = 1000
    bound_lr: float = 1e-4
    barrier_points: int = 21
    grid_n: int = 21
    landscape_examples: int = 1000

    @classmethod
    def from_dict(cls, values):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise SpecError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise SpecError(msg)

        need(self.sampler in samplers.KINDS, f"sampler must be one of {samplers.KINDS}")
        need(self.schedule in ("cyclical", "constant"), "schedule is 'cyclical' or 'constant'")
        need(_pos(self.lr0), "lr0 must be positive")
        need(_int(self.steps_per_cycle) and self.steps_per_cycle >= 1, "steps_per_cycle >= 1")
        need(_int(self.cycles) and self.cycles >= 0, "cycles >= 0")
        need(_num(self.friction) and self.friction >= 0, "friction >= 0")
        need(self.friction_pq is None or (_num(self.friction_pq) and self.friction_pq >= 0),
             "friction_pq >= 0")
        need(_num(self.beta) and 0 < self.beta < 1, "beta in (0, 1)")
        need(isinstance(self.widths, list) and len(self.widths) >= 2
             and all(_int(w) and w >= 1 for w in self.widths), "widths: list of >= 2 positive ints")
        need(self.ep_init in ("identity", "balanced"), "ep_init is 'identity' or 'balanced'")
        need(_pos(self.prior_variance) and _pos(self.temperature),
             "prior_variance and temperature must be positive")
        need(_int(self.batch_size) and self.batch_size >= 1, "batch_size >= 1")
        need(_int(self.n_train) and self.n_train >= 1 and _int(self.n_test) and self.n_test >= 0,
             "n_train >= 1 and n_test >= 0")
        need(_int(self.seed) and 0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        need(_int(self.data_seed) and self.data_seed >= 0, "data_seed >= 0")
        need(_int(self.chains) and self.chains >= 1, "chains >= 1")
        need(isinstance(self.dataset, str) and (
            self.dataset in ("two_moons", "spirals") or self.dataset.startswith(("csv:", "idx:"))),
            "dataset is two_moons, spirals, csv:PATH or idx:IMAGES,LABELS")
        need(_int(self.mog_samples) and self.mog_samples >= 0, "mog_samples >= 0")
        need(_int(self.mog_leapfrog) and self.mog_leapfrog >= 1, "mog_leapfrog >= 1")
        need(_pos(self.mog_lr) and _pos(self.mog_variance) and _pos(self.mog_radius),
             "mog_lr, mog_variance and mog_radius must be positive")
        need(_int(self.mog_grid) and self.mog_grid >= 2, "mog_grid >= 2")
        need(_int(self.bound_steps) and self.bound_steps >= 0 and _pos(self.bound_lr),
             "bound_steps >= 0 and bound_lr > 0")
        need(_int(self.barrier_points) and self.barrier_points >= 2, "barrier_points >= 2")
        need(_int(self.grid_n) and self.grid_n >= 2, "grid_n >= 2")
        self.specs()

    def specs(self):
        return nn.mlp_specs(self.widths, self.activation, self.c, self.d, self.rank)

    def schedule_obj(self):
        return samplers.Schedule(self.lr0, self.steps_per_cycle, self.cycles, self.schedule)

    def sampler_config(self):
        return samplers.SamplerConfig(
            friction=self.friction, friction_pq=self.friction_pq, temperature=self.temperature,
            beta=self.beta, stability=self.stability, xi0=self.xi0,
            prior_variance=self.prior_variance)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _pos(v):
    return _num(v) and v > 0


# --- data -----------------------------------------------------------------

def load_data(cfg):
    """``(train, test)`` standardized with training statistics."""
    if cfg.dataset in ("two_moons", "spirals"):
        rng = RngStream(cfg.data_seed)
        make = data.two_moons if cfg.dataset == "two_moons" else (
            lambda n, noise, r: data.spirals(n, cfg.num_classes or 3, noise, r))
        train = make(cfg.n_train, cfg.data_noise, rng)
        test = make(cfg.n_test, cfg.data_noise, rng) if cfg.n_test else None
    else:
        kind, _, path = cfg.dataset.partition(":")
        if kind == "csv":
            full = data.load_csv(path, cfg.num_classes)
        else:
            images, _, labels = path.partition(",")
            full = data.load_idx(images, labels, cfg.num_classes)
        if cfg.n_train > len(full):
            raise SpecError(f"n_train={cfg.n_train} exceeds {len(full)} available examples")
        train, rest = data.split(full, cfg.n_train)
        test = rest.subset(np.arange(min(cfg.n_test, len(rest))), "test") if cfg.n_test else None
    if test is None or len(test) == 0:
        return data.standardize(train), None
    train, test = data.standardize(train, test)
    test.split = "test"
    return train, test


# --- csv ------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _workers(n):
    cap = os.environ.get("PX_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n, limit))


def map_chains(fn, n):
    """Run ``fn(i)`` for ``i < n`` on a thread pool; results come back in chain order."""
    if n == 1:
        return [fn(0)]
    with ThreadPoolExecutor(max_workers=_workers(n)) as pool:
        return list(pool.map(fn, range(n)))


# --- mog ------------------------------------------------------------------

def run_mog(seed, n_samples, lr=0.05, n_leapfrog=10, variance=0.03):
    """SP-HMC on the 25-mode mixture and EP-HMC on its three-factor product form.

    Returns ``(sp_points, ep_points, ep_divergent)``; divergent EP trajectories
    are rejected and leave the chain in place.
    """
    rng = RngStream(seed)
    base = targets.MoG25(variance)
    product = targets.ProductTarget(base)
    # both chains start from the same point in output space
    x0 = rng.spawn(1).uniform(2, -5.0, 5.0)
    sp, _, _ = samplers.hmc(base.potential, base.potential_grad, x0, n_samples, lr, n_leapfrog,
                            rng.spawn(2))
    pos = product.init_position(rng.spawn(1))
    ep, _, divergent = samplers.hmc(product.potential, product.potential_grad, pos, n_samples, lr,
                                    n_leapfrog, rng.spawn(3), on_divergence="reject")
    sp_points = np.array(sp).reshape(-1, 2)
    ep_points = np.array([product.emit(p) for p in ep]).reshape(-1, 2)
    return sp_points, ep_points, divergent


def cmd_mog(cfg):
    results = map_chains(lambda i: run_mog(cfg.seed + i, cfg.mog_samples, cfg.mog_lr,
                                           cfg.mog_leapfrog, cfg.mog_variance), cfg.chains)
    sample_rows, mode_rows = [], []
    for chain, (sp, ep, divergent) in enumerate(results):
        for method, pts in (("sp", sp), ("ep", ep)):
            sample_rows += [(chain, method, float(x), float(y)) for x, y in pts]
            mode_rows.append((chain, method, targets.mode_coverage(pts, cfg.mog_radius),
                              divergent if method == "ep" else 0))
    write_csv(os.path.join(cfg.out, "samples.csv"), ["chain", "method", "x", "y"], sample_rows)
    write_csv(os.path.join(cfg.out, "modes.csv"), ["chain", "method", "coverage", "divergent"],
              mode_rows)
    base = targets.MoG25(cfg.mog_variance)
    axis = np.linspace(-6.0, 6.0, cfg.mog_grid)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    lp = base.logprob(np.stack([gx.ravel(), gy.ravel()], axis=1))
    write_csv(os.path.join(cfg.out, "density-grid.csv"), ["x", "y", "logprob"],
              zip(gx.ravel().tolist(), gy.ravel().tolist(), np.ravel(lp).tolist()))
    for chain, method, cov, _ in mode_rows:
        print(f"chain {chain} {method}: {cov} modes covered")
    return EXIT_OK


# --- sample ---------------------------------------------------------------

@dataclass
class ChainRun:
    samples: samplers.SampleSet
    trace: list
    svalues: list
    error: DivergenceError | None = None


TRACE_HEADER = ["chain", "step", "cycle", "lr", "potential", "d", "d_bar", "sigma_max", "sigma_min"]
SVALUE_HEADER = ["chain", "sample", "layer", "sigma_max", "sigma_min", "condition"]


def run_sampling_chain(cfg, chain, train):
    """One chain with per-step trace rows; divergence is captured, not raised."""
    specs = cfg.specs()
    sp = nn.sp_specs(specs)
    rng = RngStream(cfg.seed + chain)
    position = nn.init_params(specs, rng.spawn(1), cfg.ep_init)
    pot = potential.PotentialSpec(cfg.prior_variance, len(train),
                                  min(cfg.batch_size, len(train)), cfg.temperature)
    stream = data.batches(train, pot.batch_size, rng.spawn(2))
    T = cfg.steps_per_cycle
    result = ChainRun(samplers.SampleSet(), [], [])
    last = {}

    def grad_fn(pos, step):
        # overflow surfaces as non-finite gradients, which the sampler reports as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            return potential.potential_and_grad(pos, specs, next(stream), pot)

    def callback(state, lr, value):
        row = [chain, state.step, state.cycle, lr, value, None, None, None, None]
        if state.step % T == 0:
            merged = nn.merge_params(state.position, specs)
            if "prev" in last:
                row[5], row[6] = analysis.distances([last["prev"], merged])[0]
            last["prev"] = merged
            sv = analysis.singular_trace([merged], sp)
            row[7] = max(r[2] for r in sv)
            row[8] = min(r[3] for r in sv)
            m = len(result.svalues) // len(specs)
            result.svalues += [(chain, m) + tuple(r[1:]) for r in sv]
        result.trace.append(row)

    try:
        result.samples = samplers.run_chain(
            grad_fn, position, cfg.sampler, cfg.schedule_obj(), cfg.sampler_config(), rng.spawn(3),
            merge=lambda pos: nn.merge_params(pos, specs), callback=callback)
    except DivergenceError as err:
        result.error = err
    for meta in result.samples.meta:
        meta["chain"] = chain
    return result


def run_sampling(cfg, train=None):
    """All chains of a sampling run, merged in chain order."""
    if train is None:
        train, _ = load_data(cfg)
    runs = map_chains(lambda i: run_sampling_chain(cfg, i, train), cfg.chains)
    merged = samplers.SampleSet()
    for r in runs:
        merged.samples += r.samples.samples
        merged.meta += r.samples.meta
    return merged, runs


def cmd_sample(cfg):
    merged, runs = run_sampling(cfg)
    write_csv(os.path.join(cfg.out, "trace.csv"), TRACE_HEADER, [row for r in runs for row in r.trace])
    write_csv(os.path.join(cfg.out, "svalues.csv"), SVALUE_HEADER,
              [row for r in runs for row in r.svalues])
    failed = [(i, r.error) for i, r in enumerate(runs) if r.error is not None]
    if failed:
        for chain, err in failed:
            print(f"chain {chain}: diverged at step {err.step}", file=sys.stderr)
        return EXIT_DIVERGED
    store.save(merged, os.path.join(cfg.out, CHECKPOINT), {"config": cfg.to_dict()})
    print(f"wrote {len(merged)} samples to {os.path.join(cfg.out, CHECKPOINT)}")
    return EXIT_OK


# --- eval / diag ----------------------------------------------------------

def _checkpoint(cfg):
    return cfg.checkpoint or os.path.join(cfg.out, CHECKPOINT)


def _load_samples(cfg):
    samples = store.load(_checkpoint(cfg))
    if not isinstance(samples, samplers.SampleSet):
        raise InputError(f"{_checkpoint(cfg)} holds a single tree, not a sample set")
    if len(samples) == 0:
        raise InputError("checkpoint holds no samples")
    return samples


def cmd_eval(cfg):
    samples = _load_samples(cfg)
    train, test = load_data(cfg)
    target = test if test is not None else train
    sp = nn.sp_specs(cfg.specs())
    logits = analysis.member_logits(samples.samples, sp, target.x)
    report = analysis.metrics_report(logits, target.y)
    out = report.as_dict()
    out["split"] = target.split
    store.write_json(os.path.join(cfg.out, "metrics.json"), out)
    print(f"ERR {report.err:.4f}  NLL {report.nll:.4f}  AMB {report.amb:.4f}  ECE {report.ece:.4f}")
    return EXIT_OK


def cmd_diag(cfg):
    samples = _load_samples(cfg).samples
    train, _ = load_data(cfg)
    probe = train.subset(np.arange(min(cfg.landscape_examples, len(train))))
    specs = cfg.specs()
    sp = nn.sp_specs(specs)

    rows = []
    for m in range(len(samples) - 1):
        rows += [(m, a, e) for a, e in
                 analysis.loss_barrier(samples[m], samples[m + 1], sp, probe, cfg.barrier_points)]
    write_csv(os.path.join(cfg.out, "barrier.csv"), ["pair", "alpha", "err"], rows)

    rows = []
    if len(samples) >= 3:
        try:
            sub = analysis.subspace_grid(samples[0], samples[1], samples[2], sp, probe, cfg.grid_n)
        except DegenerateBasisError as err:
            print(f"subspace skipped: {err}", file=sys.stderr)
        else:
            rows = [(i, j, float(a), float(b), float(sub.errors[i, j]))
                    for i, a in enumerate(sub.xs) for j, b in enumerate(sub.ys)]
    write_csv(os.path.join(cfg.out, "subspace.csv"), ["i", "j", "a", "b", "err"], rows)

    rng = RngStream(cfg.seed)
    position = nn.init_params(specs, rng.spawn(1), cfg.ep_init)
    pot = potential.PotentialSpec(cfg.prior_variance, len(train),
                                  min(cfg.batch_size, len(train)), cfg.temperature)
    trace = analysis.exploration_trace(position, specs, train, pot, cfg.bound_lr, cfg.bound_steps,
                                       rng.spawn(3), rng.spawn(2))
    pairs = analysis.exploration_bound(trace, len(specs), max(s.c for s in specs),
                                       max(s.d for s in specs))
    write_csv(os.path.join(cfg.out, "bound.csv"), ["step", "lhs", "rhs"],
              [(t, lhs, rhs) for t, (lhs, rhs) in enumerate(pairs)])
    print(f"bound violations: {analysis.bound_violations(pairs)} of {len(pairs)} steps")
    return EXIT_OK


COMMANDS = {"mog": cmd_mog, "sample": cmd_sample, "eval": cmd_eval, "diag": cmd_diag}


# --- argument handling ----------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens):
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise SpecError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise SpecError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = _parse_value(value)
        i += 1
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="pxsgmcmc", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--chains", type=int)
    return parser


def load_config(args, extra):
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise SpecError("config file must hold a JSON object")
    values.update(parse_overrides(extra))
    for key in ("seed", "out", "chains"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    return RunConfig.from_dict(values)


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args, extra)
    except json.JSONDecodeError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except (SpecError, TypeError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(cfg.out, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except DivergenceError as err:
        print(f"diverged at step {err.step}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except (SpecError, InputError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
