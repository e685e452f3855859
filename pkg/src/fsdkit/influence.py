"""Self-influence through the proximal Bregman response function.

For a removed training point (x_r, y_r) the response is the minimizer of

    -(1/N) L(f(x_r, theta), y_r) + D_B(theta, theta0) + (lam/2) ||theta - theta0||^2

warm-started at theta0. D_B is one of: the soft-target training error over the
stored training set ("direct"), a diagonal-Fisher quadratic ("ewc"), or the
BGLN-D distance from a stored summary ("bgln_d").
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InputError, NumericError
from .estimators import estimate_fisher_diag, fsd_grad, taylor_fsd_diag
from .net import backward, forward, mlp_params
from .rng import substream
from .summaries import TaskSummary, build_summary
from .train import LOSSES, Adam, fit, log_softmax, per_example_loss, softmax

BACKENDS = ("direct", "ewc", "bgln_d")


@dataclass
class PbrfProblem:
    theta0: object
    x_train: np.ndarray
    y_train: np.ndarray
    index: int
    lam: float = 1e-3
    backend: str = "direct"
    loss: str = "mse"
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 100
    summary: TaskSummary = None
    fisher: object = None
    seed: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise InputError("proximity strength lam must be positive")
        if self.backend not in BACKENDS:
            raise InputError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if len(self.x_train) == 0:
            raise InputError("empty training set")
        if not 0 <= self.index < len(self.x_train):
            raise InputError("removed point is not in the training set")
        if self.backend == "bgln_d" and self.summary is None:
            raise InputError("bgln_d backend needs a moments summary")
        if self.backend == "ewc" and self.fisher is None:
            raise InputError("ewc backend needs a Fisher diagonal")

    @property
    def n(self):
        return len(self.x_train)

    @property
    def removed(self):
        return self.x_train[self.index : self.index + 1], self.y_train[self.index : self.index + 1]


def _bregman_grad(problem, theta, batch):
    """(value, gradient) of the function-space term at theta."""
    t0 = problem.theta0
    if problem.backend == "ewc":
        est, g = taylor_fsd_diag(t0, theta, problem.fisher, need_grad=True)
        return est.value, g
    if problem.backend == "bgln_d":
        est, g = fsd_grad("bgln-d", problem.summary, theta)
        return est.value, g
    x = problem.x_train[batch]
    tr = forward(theta, x)
    z0 = forward(t0, x).z
    if problem.loss == "mse":
        value, gz = LOSSES["mse"](tr.z, z0)
    else:
        # soft-target cross-entropy minus its value at theta0, i.e. KL(p0 || p)
        p0 = softmax(z0)
        lp = log_softmax(tr.z)
        value = float(np.sum(p0 * (np.log(np.maximum(p0, 1e-300)) - lp))) / len(x)
        gz = (softmax(tr.z) - p0) / len(x)
    return value, backward(theta, tr, gz)


def pbrf_objective(problem, theta, batch=None):
    """Full objective value (D_B over the whole training set for "direct")."""
    batch = np.arange(problem.n) if batch is None else batch
    xr, yr = problem.removed
    removed = float(per_example_loss(problem.loss, forward(theta, xr).z, yr)[0])
    breg, _ = _bregman_grad(problem, theta, batch)
    prox = 0.5 * problem.lam * float(np.sum((theta - problem.theta0).flat() ** 2))
    return -removed / problem.n + breg + prox


def pbrf_solve(problem, trace=None):
    """Minimize the PBRF objective by plain SGD from theta0.

    "direct" steps over shuffled minibatches of the training set; the summary
    backends take the same number of full-gradient steps. If `trace` is a list
    it receives the objective after every epoch.
    """
    theta = problem.theta0.copy()
    xr, yr = problem.removed
    rng = substream(problem.seed, "train", problem.index)
    steps = int(np.ceil(problem.n / problem.batch_size))
    history = []
    for epoch in range(problem.epochs):
        order = rng.permutation(problem.n)
        for k in range(steps):
            batch = order[k * problem.batch_size : (k + 1) * problem.batch_size]
            tr = forward(theta, xr)
            _, gz = LOSSES[problem.loss](tr.z, yr)
            grad = backward(theta, tr, gz) * (-1.0 / problem.n)
            breg, bgrad = _bregman_grad(problem, theta, batch)
            grad = grad + bgrad + (theta - problem.theta0) * problem.lam
            if not np.isfinite(breg) or not np.all(np.isfinite(grad.flat())):
                raise NumericError(f"PBRF diverged at epoch {epoch} step {k}; "
                                   f"objective history {history[-5:]}")
            theta = theta - grad * problem.lr
        if trace is not None or epoch == problem.epochs - 1:
            value = pbrf_objective(problem, theta)
            if not np.isfinite(value):
                raise NumericError(f"PBRF diverged at epoch {epoch}; history {history[-5:]}")
            history.append(value)
    if trace is not None:
        trace.extend(history)
    return theta


def self_influence(theta0, theta_minus, point, loss="mse"):
    """Loss increase of `point` = (x, y) between theta0 and theta_minus."""
    x, y = point
    x = np.asarray(x, dtype=float).reshape((1,) + theta0.input_shape)
    y = np.asarray(y).reshape((1,) + np.shape(y)) if loss == "mse" else np.asarray([y])
    before = per_example_loss(loss, forward(theta0, x).z, y)[0]
    after = per_example_loss(loss, forward(theta_minus, x).z, y)[0]
    return float(after - before)


def correlations(a, b):
    """(Pearson, Spearman, Kendall tau-b) between two score vectors."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise InputError("score vectors must be 1-D, equal length, with at least 2 entries")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise InputError("correlation undefined for a constant score vector")
    ra, rb = stats.rankdata(a), stats.rankdata(b)
    if np.array_equal(ra, rb):
        # identical rankings: report the exact value rather than 1 - ulp
        return float(stats.pearsonr(a, b)[0]), 1.0, 1.0
    return (float(stats.pearsonr(a, b)[0]), float(stats.spearmanr(a, b)[0]),
            float(stats.kendalltau(a, b, variant="b")[0]))


def detection_curve(scores, corrupted):
    """Fraction of corrupted points found against fraction inspected.

    Points are inspected in decreasing score order (ties by index). Returns
    (fractions, found) arrays of length N + 1 from (0, 0) to (1, 1).
    """
    scores = np.asarray(scores, dtype=float)
    corrupted = np.asarray(corrupted, dtype=bool)
    if len(scores) == 0:
        raise InputError("empty dataset")
    if len(scores) != len(corrupted):
        raise InputError("scores and corruption mask differ in length")
    total = corrupted.sum()
    if total == 0:
        raise InputError("no corrupted points to detect")
    order = np.argsort(-scores, kind="stable")
    found = np.concatenate([[0], np.cumsum(corrupted[order])]) / total
    return np.arange(len(scores) + 1) / len(scores), found


def curve_at(curve, q):
    """Detection rate after inspecting the top fraction q (floor of q * N points)."""
    fractions, found = curve
    n = len(fractions) - 1
    return float(found[int(np.floor(q * n + 1e-9))])


@dataclass
class InfluenceReport:
    point_ids: np.ndarray
    scores: dict
    correlations: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    corrupted: np.ndarray = None


def make_problem(backend, theta0, x, y, index, loss, settings, summary=None, fisher=None):
    return PbrfProblem(theta0, x, y, index, backend=backend, loss=loss, summary=summary,
                       fisher=fisher, **settings)


def backend_resources(backend, theta0, x, y, loss, seed, fisher_samples=1):
    """Summary or Fisher diagonal needed by a backend, built once per study."""
    if backend == "bgln_d":
        return {"summary": build_summary(theta0, x, kind="moments")}
    if backend == "ewc":
        likelihood = "gaussian" if loss == "mse" else "categorical"
        fisher = estimate_fisher_diag(theta0, x, fisher_samples, rng=substream(seed, "fisher"),
                                      likelihood=likelihood)
        return {"fisher": fisher}
    return {}


def score_points(backend, theta0, x, y, indices, loss="mse", settings=None, threads=1, seed=0):
    """Self-influence of each index under one backend (order follows `indices`)."""
    settings = dict(settings or {})
    settings.setdefault("seed", seed)
    res = backend_resources(backend, theta0, x, y, loss, seed)

    def one(i):
        prob = make_problem(backend, theta0, x, y, int(i), loss, settings, **res)
        return self_influence(theta0, pbrf_solve(prob), (x[i], y[i]), loss)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return np.array(list(pool.map(one, indices)))
    return np.array([one(i) for i in indices])


# desk studies ------------------------------------------------------------

def synthetic_regression(seed, n=500, dim=8, noise=0.1):
    """Standardized inputs and a smooth nonlinear target."""
    rng = substream(seed, "data")
    x = rng.standard_normal((n, dim))
    w = rng.standard_normal((dim, 4)) / np.sqrt(dim)
    y = np.tanh(x @ w) @ rng.standard_normal(4) + noise * rng.standard_normal(n)
    return x, y[:, None]


def train_base(x, y, loss, hidden, epochs, lr, seed, batch_size=32):
    out = y.shape[1] if loss == "mse" else int(y.max()) + 1
    params = mlp_params([x.shape[1], *hidden, out], substream(seed, "train", 0))
    return fit(params, x, y, loss, epochs, batch_size, Adam(lr), substream(seed, "train", 1))


def corrupt_labels(y, fraction, n_classes, rng):
    """Assign a different random class to a `fraction` of the labels."""
    y = np.array(y)
    k = int(round(fraction * len(y)))
    idx = rng.choice(len(y), size=k, replace=False)
    y[idx] = (y[idx] + rng.integers(1, n_classes, size=k)) % n_classes
    mask = np.zeros(len(y), dtype=bool)
    mask[idx] = True
    return y, mask


def regression_study(backends=BACKENDS, seed=0, n=500, dim=8, hidden=(64,), remove_count=50,
                     base_epochs=200, base_lr=3e-3, settings=None, threads=1, data=None):
    """Scores for `remove_count` random training points under each backend.

    Correlations are reported against the "direct" backend when present.
    """
    x, y = data if data is not None else synthetic_regression(seed, n, dim)
    theta0 = train_base(x, y, "mse", hidden, base_epochs, base_lr, seed)
    ids = np.sort(substream(seed, "removal").choice(len(x), size=min(remove_count, len(x)),
                                                    replace=False))
    report = InfluenceReport(ids, {})
    for b in backends:
        report.scores[b] = score_points(b, theta0, x, y, ids, "mse", settings, threads, seed)
    if "direct" in report.scores:
        for b in backends:
            if b != "direct":
                report.correlations[b] = correlations(report.scores[b], report.scores["direct"])
    return report


def mislabel_study(backends=("bgln_d",), seed=0, n=400, fraction=0.1, hidden=(64,),
                   base_epochs=100, base_lr=3e-3, settings=None, threads=1):
    """Detection curves on bundled digits with a fraction of labels corrupted."""
    from .datasets import load_bundled_digits

    x, y = load_bundled_digits()
    idx = substream(seed, "data").choice(len(x), size=min(n, len(x)), replace=False)
    x, y = x[idx], y[idx]
    y, mask = corrupt_labels(y, fraction, 10, substream(seed, "corruption"))
    theta0 = train_base(x, y, "ce", hidden, base_epochs, base_lr, seed)
    ids = np.arange(len(x))
    report = InfluenceReport(ids, {})
    for b in backends:
        report.scores[b] = score_points(b, theta0, x, y, ids, "ce", settings, threads, seed)
        report.curves[b] = detection_curve(report.scores[b], mask)
    random_scores = substream(seed, "random-baseline").random(len(x))
    report.scores["random"] = random_scores
    report.curves["random"] = detection_curve(random_scores, mask)
    report.corrupted = mask
    return report
