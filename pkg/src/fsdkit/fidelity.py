"""Estimator fidelity: FSD estimates against the empirical FSD over network pairs.

Networks of each depth share one initialization and differ in learning rate and
iteration count. Every unordered pair (i, j) with i before j in grid order is
scored with theta0 = network i and theta1 = network j. NTK and LAFTR see the
same inputs (by default the whole training set, so only the linearization
differs); BGLN-S and BGLN-D see theta0's summary.
"""
import itertools
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InputError, NumericError
from .estimators import bgln_d_fsd, bgln_s_fsd, empirical_fsd, laftr_fsd, ntk_fsd
from .influence import correlations
from .net import mlp_params
from .summaries import build_summary
from .rng import substream
from .train import check_finite, loss_and_grad, sgd_step

FIDELITY_ESTIMATORS = ("empirical", "ntk", "laftr", "bgln-s", "bgln-d")


@dataclass
class FidelityConfig:
    lrs: tuple = (0.01, 0.03, 0.1)
    iters: tuple = (50, 100, 200)
    depths: tuple = (1, 2, 3, 4)
    width: int = 16
    input_dim: int = 8
    output_dim: int = 2
    n_train: int = 256
    batch_size: int = 32
    coreset_size: int = None
    bgln_samples: int = 100_000
    bgln_d_mode: str = "verbatim"
    metric: str = "sq_euclid_logits"
    seed: int = 0

    def __post_init__(self):
        self.lrs, self.iters, self.depths = tuple(self.lrs), tuple(self.iters), tuple(self.depths)
        if not self.lrs or not self.iters or not self.depths:
            raise InputError("fidelity grid must be nonempty")
        if any(d < 1 for d in self.depths) or any(i < 0 for i in self.iters):
            raise InputError("depths must be >= 1 and iteration counts >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown fidelity config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class FidelityReport:
    rows: list = field(default_factory=list)
    correlations: dict = field(default_factory=dict)
    failed: list = field(default_factory=list)


def teacher_data(cfg):
    """Gaussian inputs labelled by a fixed random two-layer tanh teacher."""
    rng = substream(cfg.seed, "data")
    x = rng.standard_normal((cfg.n_train, cfg.input_dim))
    w1 = rng.standard_normal((cfg.input_dim, 32)) / np.sqrt(cfg.input_dim)
    w2 = rng.standard_normal((32, cfg.output_dim)) / np.sqrt(32)
    return x, np.tanh(x @ w1) @ w2


def train_steps(params, x, y, lr, steps, rng, batch_size):
    """`steps` plain SGD updates on squared error; the shuffle order is shared across lrs."""
    order = np.concatenate([rng.permutation(len(x)) for _ in range(
        int(np.ceil(max(steps, 1) * batch_size / len(x))) + 1)])
    for k in range(steps):
        idx = order[k * batch_size : (k + 1) * batch_size]
        value, grad = loss_and_grad(params, x[idx], y[idx], "mse")
        check_finite(value)
        params = sgd_step(params, grad, lr)
    if not np.all(np.isfinite(params.flat())):
        raise NumericError("parameters became non-finite")
    return params


def train_grid(cfg, depth, x, y):
    """Trained networks keyed by grid cell; diverged cells map to an error string."""
    sizes = [cfg.input_dim] + [cfg.width] * depth + [cfg.output_dim]
    init = mlp_params(sizes, substream(cfg.seed, "train", depth))
    nets = {}
    for lr, steps in itertools.product(cfg.lrs, cfg.iters):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                nets[(lr, steps)] = train_steps(init.copy(), x, y, lr, steps,
                                                substream(cfg.seed, "train", depth, 1),
                                                cfg.batch_size)
        except NumericError as exc:
            nets[(lr, steps)] = str(exc)
    return nets


def pair_estimates(theta0, theta1, x, coreset, cfg, pair_seed):
    with np.errstate(over="ignore", invalid="ignore"):
        summary = build_summary(theta0, x, kind="moments", mode="full")
    m = cfg.metric
    with np.errstate(over="ignore", invalid="ignore"):
        values = {
            "empirical": empirical_fsd(theta0, theta1, x, m).value,
            "ntk": ntk_fsd(theta0, theta1, coreset, m).value,
            "laftr": laftr_fsd(theta0, theta1, coreset, m).value,
            "bgln-s": bgln_s_fsd(summary, theta1, m, cfg.bgln_samples, pair_seed).value,
            "bgln-d": bgln_d_fsd(summary, theta1, metric=m, mode=cfg.bgln_d_mode).value,
        }
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite estimates: {bad}")
    return values


def _rank_stats(a, b):
    try:
        _, s, k = correlations(a, b)
    except InputError:
        return None
    return {"spearman": s, "kendall": k}


def run_fidelity_study(cfg):
    x, y = teacher_data(cfg)
    coreset = x
    if cfg.coreset_size is not None and cfg.coreset_size < len(x):
        coreset = x[np.sort(substream(cfg.seed, "coreset").choice(
            len(x), size=cfg.coreset_size, replace=False))]
    report = FidelityReport()
    for depth in cfg.depths:
        nets = train_grid(cfg, depth, x, y)
        for cell, net in nets.items():
            if isinstance(net, str):
                report.failed.append({"depth": depth, "lr": cell[0], "iters": cell[1],
                                      "error": net})
        cells = [c for c in nets if not isinstance(nets[c], str)]
        depth_rows = []
        for p, (ci, cj) in enumerate(itertools.combinations(cells, 2)):
            row = {"depth": depth, "lr0": ci[0], "iters0": ci[1], "lr1": cj[0], "iters1": cj[1]}
            try:
                row.update(pair_estimates(nets[ci], nets[cj], x, coreset, cfg,
                                          int(substream(cfg.seed, "bernoulli", depth, p)
                                              .integers(2**31))))
            except NumericError as exc:
                report.failed.append({"depth": depth, "pair": [list(ci), list(cj)],
                                      "error": str(exc)})
                continue
            depth_rows.append(row)
        report.rows.extend(depth_rows)
        emp = [r["empirical"] for r in depth_rows]
        report.correlations[depth] = {
            e: _rank_stats([r[e] for r in depth_rows], emp) for e in FIDELITY_ESTIMATORS}
    return report
