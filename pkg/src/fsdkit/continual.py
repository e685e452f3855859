"""Task streams, FSD-regularized sequential training and CL metrics."""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .datasets import load_bundled_digits, load_idx_digits
from .errors import InputError
from .estimators import ESTIMATORS, fsd_grad
from .net import backward, conv2d, dense, flatten, forward, init_params, mlp_params, relu
from .rng import substream
from .summaries import build_summary, new_stats, update_bernoulli
from .train import LOSSES, check_finite, make_optimizer, minibatches

TASK_KINDS = ("toy_regression_2task", "split_digits", "permuted_digits",
              "synthetic_gaussian_classes")


@dataclass
class Task:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: tuple
    head: int


@dataclass
class TaskStream:
    kind: str
    tasks: list
    input_dim: int
    output_dim: int
    loss: str

    @property
    def head_count(self):
        return max(t.head for t in self.tasks) + 1


def _split(x, y, rng, test_fraction):
    """Per-class shuffled train/test split."""
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(len(idx) * test_fraction))
        test.append(idx[:k])
        train.append(idx[k:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return x[tr], y[tr], x[te], y[te]


def _digits(source, image_path, label_path, size):
    if source == "bundled":
        return load_bundled_digits()
    if source == "idx":
        if not image_path or not label_path:
            raise InputError("idx source needs image_path and label_path")
        return load_idx_digits(image_path, label_path, size)
    raise InputError(f"unknown digit source {source!r}")


def _gaussian_classes(rng, n_classes, dim, per_class, spread):
    centres = rng.standard_normal((n_classes, dim)) * spread
    x = np.vstack([c + rng.standard_normal((per_class, dim)) for c in centres])
    return x, np.repeat(np.arange(n_classes), per_class)


def _split_tasks(x, y, rng, n_tasks, classes_per_task, test_fraction):
    labels = np.unique(y)
    if n_tasks * classes_per_task > len(labels):
        raise InputError("not enough classes for the requested split")
    tasks = []
    for t in range(n_tasks):
        cls = labels[t * classes_per_task : (t + 1) * classes_per_task]
        sel = np.isin(y, cls)
        local = np.searchsorted(cls, y[sel])
        tasks.append(Task(*_split(x[sel], local, rng, test_fraction), tuple(int(c) for c in cls), t))
    return tasks


def toy_regression_data(rng, n_per_task=100, noise=0.05):
    """Two 1-D regression tasks on disjoint intervals with a shared sinusoid target."""
    domains = [(-3.0, -1.0), (1.0, 3.0)]
    tasks = []
    for t, (lo, hi) in enumerate(domains):
        x = rng.uniform(lo, hi, (n_per_task, 1))
        y = np.sin(2.0 * x) + 0.5 * np.sin(5.0 * x) + noise * rng.standard_normal(x.shape)
        xt = np.linspace(lo, hi, 200)[:, None]
        yt = np.sin(2.0 * xt) + 0.5 * np.sin(5.0 * xt)
        tasks.append(Task(x, y, xt, yt, (), 0))
    return tasks


def generate_tasks(kind, seed=0, n_tasks=5, classes_per_task=2, test_fraction=0.2,
                   source="bundled", image_path=None, label_path=None, size=14,
                   n_per_task=100, n_classes=10, dim=16, per_class=120, spread=1.0, noise=0.05):
    """Deterministic task stream for `kind` under `seed`."""
    rng = substream(seed, "data")
    if kind == "toy_regression_2task":
        return TaskStream(kind, toy_regression_data(rng, n_per_task, noise), 1, 1, "mse")
    if kind == "synthetic_gaussian_classes":
        x, y = _gaussian_classes(rng, n_classes, dim, per_class, spread)
        tasks = _split_tasks(x, y, rng, n_tasks, classes_per_task, test_fraction)
        return TaskStream(kind, tasks, dim, classes_per_task, "ce")
    if kind == "split_digits":
        x, y = _digits(source, image_path, label_path, size)
        tasks = _split_tasks(x, y, rng, n_tasks, classes_per_task, test_fraction)
        return TaskStream(kind, tasks, x.shape[1], classes_per_task, "ce")
    if kind == "permuted_digits":
        x, y = _digits(source, image_path, label_path, size)
        xtr, ytr, xte, yte = _split(x, y, rng, test_fraction)
        tasks = []
        for t in range(n_tasks):
            perm = np.arange(x.shape[1])
            if t > 0:
                perm = substream(seed, "permutation", t).permutation(x.shape[1])
            tasks.append(Task(xtr[:, perm], ytr, xte[:, perm], yte, tuple(range(10)), t))
        return TaskStream(kind, tasks, x.shape[1], int(y.max()) + 1, "ce")
    raise InputError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")


# metrics -----------------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """R[i, j] = score on task j after training task i (NaN above the diagonal).

    Scores are accuracies in percent for classification and test MSE for
    regression streams.
    """

    R: np.ndarray
    metric: str = "accuracy"

    def complete(self):
        return np.all(np.isfinite(np.tril(self.R))) and np.all(np.isfinite(np.diag(self.R)))


def _matrix(R):
    R = np.asarray(R.R if isinstance(R, AccuracyMatrix) else R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] == 0:
        raise InputError("accuracy matrix must be square and nonempty")
    if not np.all(np.isfinite(R[np.tril_indices(len(R))])):
        raise InputError("accuracy matrix is incomplete")
    return R


def average_accuracy(R):
    """Mean of the last row."""
    R = _matrix(R)
    return float(np.mean(R[-1]))


def backward_transfer(R):
    """(1 / (T - 1)) * sum_{i < T} (R[T, i] - R[i, i])."""
    R = _matrix(R)
    t = len(R)
    if t < 2:
        raise InputError("backward transfer needs at least two tasks")
    return float(np.sum(R[-1, :-1] - np.diag(R)[:-1]) / (t - 1))


# training ----------------------------------------------------------------

SUMMARY_FOR = {"bgln-d": "moments", "bgln-s": "moments", "laftr": "moments", "ntk": "coreset",
               "empirical": "coreset", "ewc": "fisher", "bgln-s-conv": "moments"}


@dataclass
class CLRunConfig:
    estimator: str = "bgln-d"
    lambda_fsd: float = 0.0
    summary: str = None
    classwise: bool = False
    metric: str = "sq_euclid_logits"
    bgln_d_mode: str = "verbatim"
    n_samples: int = 64
    coreset_size: int = 40
    cov_mode: str = "auto"
    hidden: tuple = (100, 100)
    conv_channels: tuple = ()
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    momentum: float = 1e-12
    fisher_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lambda_fsd < 0:
            raise InputError("lambda_fsd must be nonnegative")
        if self.estimator not in ESTIMATORS:
            raise InputError(f"unknown estimator {self.estimator!r}")
        self.hidden = tuple(self.hidden)
        self.conv_channels = tuple(self.conv_channels)

    @property
    def summary_kind(self):
        if self.classwise:
            return "classwise"
        return self.summary or SUMMARY_FOR[self.estimator]

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["conv_channels"] = list(self.conv_channels)
        return d


_COMPATIBLE = {"moments": {"bgln-d", "bgln-s", "laftr", "ntk", "empirical", "bgln-s-conv"},
               "classwise": {"bgln-d", "bgln-s", "laftr", "ntk", "empirical"},
               "coreset": {"ntk", "laftr", "empirical", "bgln-s"},
               "fisher": {"ewc"}}


@dataclass
class CLResult:
    params: object
    matrix: AccuracyMatrix
    summaries: list
    checkpoints: list = field(default_factory=list)


def evaluate(params, task, loss):
    z = forward(params, task.x_test, task.head).z
    if loss == "mse":
        return float(np.mean(np.sum((z - task.y_test) ** 2, axis=1)))
    return 100.0 * float(np.mean(z.argmax(axis=1) == task.y_test))


def fsd_penalty_grad(params, summaries, config, step_seed):
    """Summed FSD over past tasks and its gradient, reduced in task order."""
    total, grad = 0.0, None
    for i, s in enumerate(summaries):
        est, g = fsd_grad(config.estimator, s, params, metric=config.metric,
                          n_samples=config.n_samples, seed=step_seed + i,
                          mode=config.bgln_d_mode)
        total += est.value
        grad = g if grad is None else grad + g
    return total, grad


def _summarize(config, params, task, stats, class_stats, t):
    kind = config.summary_kind
    if config.estimator not in _COMPATIBLE[kind]:
        raise InputError(f"estimator {config.estimator!r} cannot use a {kind} summary")
    likelihood = "gaussian" if task.y_train.ndim > 1 else "categorical"
    fisher = None
    if kind == "fisher":
        from .estimators import estimate_fisher_diag

        fisher = estimate_fisher_diag(params, task.x_train, config.fisher_samples,
                                      rng=substream(config.seed, "fisher", t), head=task.head,
                                      likelihood=likelihood)
    return build_summary(params, task.x_train, task.y_train if kind == "classwise" else None,
                         kind=kind, head=task.head, mode=config.cov_mode, stats=stats,
                         class_stats=class_stats, coreset_size=config.coreset_size,
                         rng=substream(config.seed, "coreset", t), fisher=fisher)


CONV_CHANNELS = (8, 16, 16, 32)


def conv_params(side, channels, hidden, output_dim, rng, head_count=1):
    """3x3 same-padded convs (stride 2 on every second one), then dense layers."""
    arch, c_in, size = [], 1, side
    for k, c in enumerate(channels):
        stride = 2 if k % 2 and size >= 2 else 1
        spec = conv2d(c_in, c, 3, stride=stride)
        arch += [spec, relu()]
        c_in, size = c, spec.output_shape((c_in, size, size))[1]
    arch.append(flatten())
    width = c_in * size * size
    for h in hidden:
        arch += [dense(width, h), relu()]
        width = h
    return init_params((1, side, side), tuple(arch), dense(width, output_dim), rng, head_count)


def as_images(stream):
    """Same stream with flat square inputs reshaped to (1, side, side)."""
    side = int(round(np.sqrt(stream.input_dim)))
    if side * side != stream.input_dim:
        raise InputError(f"input dimension {stream.input_dim} is not a square image")
    shape = (1, side, side)
    tasks = [Task(t.x_train.reshape((-1,) + shape), t.y_train, t.x_test.reshape((-1,) + shape),
                  t.y_test, t.classes, t.head) for t in stream.tasks]
    return TaskStream(stream.kind, tasks, stream.input_dim, stream.output_dim, stream.loss), side


def train_sequential(stream, config, on_task_end=None):
    """Train on each task in order with the FSD penalty of all earlier tasks.

    Returns a CLResult with the final params, the score matrix and the frozen
    per-task summaries. `on_task_end(t, params, summary)` runs after each task.
    """
    init_rng = substream(config.seed, "train", 0)
    if config.conv_channels:
        stream, side = as_images(stream)
        params = conv_params(side, config.conv_channels, config.hidden, stream.output_dim,
                             init_rng, stream.head_count)
    else:
        sizes = [stream.input_dim, *config.hidden, stream.output_dim]
        params = mlp_params(sizes, init_rng, head_count=stream.head_count)
    loss_fn = LOSSES[stream.loss]
    step_seeds = substream(config.seed, "bernoulli")
    T = len(stream.tasks)
    R = np.full((T, T), np.nan)
    summaries = []
    for t, task in enumerate(stream.tasks):
        shuffle = substream(config.seed, "train", t + 1)
        opt = make_optimizer(config.optimizer, config.lr)
        labels = np.unique(task.y_train) if task.y_train.ndim == 1 else []
        stats = None
        class_stats = {}
        for epoch in range(config.epochs):
            last = epoch == config.epochs - 1
            if last:
                stats = new_stats(params, config.momentum)
                class_stats = {int(c): new_stats(params, config.momentum) for c in labels}
            for idx in minibatches(len(task.x_train), config.batch_size, shuffle):
                xb, yb = task.x_train[idx], task.y_train[idx]
                trace = forward(params, xb, task.head)
                value, gz = loss_fn(trace.z, yb)
                grad = backward(params, trace, gz)
                if last:
                    stats = update_bernoulli(stats, trace)
                    for c in labels:
                        sel = yb == c
                        if sel.any():
                            class_stats[int(c)] = update_bernoulli(
                                class_stats[int(c)], forward(params, xb[sel], task.head))
                if config.lambda_fsd > 0 and summaries:
                    seed = int(step_seeds.integers(2**31))
                    penalty, pgrad = fsd_penalty_grad(params, summaries, config, seed)
                    value += config.lambda_fsd * penalty
                    grad = grad + pgrad * config.lambda_fsd
                check_finite(value)
                params = opt.step(params, grad)
        summary = _summarize(config, params, task, stats, class_stats, t)
        summaries.append(summary)
        for j in range(t + 1):
            R[t, j] = evaluate(params, stream.tasks[j], stream.loss)
        if on_task_end is not None:
            on_task_end(t, params, summary)
    metric = "mse" if stream.loss == "mse" else "accuracy"
    return CLResult(params, AccuracyMatrix(R, metric), summaries)
