"""Compact per-task summaries: data moments, Bernoulli gate means, coresets.

A TaskSummary replaces a task's training set. It holds a frozen copy of the
network plus one payload:

* ``moments``   - mean/covariance of the inputs and per-unit gate means
* ``classwise`` - one (moments, gate means) component per class
* ``coreset``   - N stored inputs (optionally with gate means)
* ``fisher``    - a diagonal Fisher estimate, for the EWC baseline
"""
from dataclasses import dataclass, field

import numpy as np

from . import container
from .container import Reader, Writer
from .errors import CorruptFileError, InputError, NumericError
from .net import forward

SUMMARY_KINDS = ("moments", "classwise", "coreset", "fisher")
FULL_COV_MAX_DIM = 512


@dataclass
class DataMoments:
    mean: np.ndarray
    cov: np.ndarray
    mode: str
    count: int
    _chol: tuple = field(default=None, init=False, repr=False, compare=False)

    @property
    def dim(self):
        return self.mean.size

    def cov_matrix(self):
        """Covariance as a d x d matrix (diagonal mode is promoted)."""
        return self.cov if self.mode == "full" else np.diag(self.cov)

    def variances(self):
        return np.diag(self.cov).copy() if self.mode == "full" else self.cov.copy()

    @property
    def stored_floats(self):
        return self.mean.size + self.cov.size


class MomentAccumulator:
    """Single-pass mean/covariance using pairwise merges around the running mean."""

    def __init__(self, mode="full"):
        if mode not in ("full", "diagonal"):
            raise InputError(f"unknown moment mode {mode!r}")
        self.mode = mode
        self.count = 0
        self.mean = None
        self.m2 = None

    def update(self, batch):
        batch = np.asarray(batch, dtype=float)
        if batch.ndim == 1:
            batch = batch[None]
        batch = batch.reshape(batch.shape[0], -1)
        nb = batch.shape[0]
        if nb == 0:
            return self
        if self.mean is not None and batch.shape[1] != self.mean.size:
            raise InputError(f"dimension mismatch: {batch.shape[1]} vs {self.mean.size}")
        mb = batch.mean(axis=0)
        centred = batch - mb
        if self.mode == "full":
            m2b = centred.T @ centred
        else:
            m2b = np.einsum("ij,ij->j", centred, centred)
        if self.mean is None:
            self.count, self.mean, self.m2 = nb, mb, m2b
            return self
        n = self.count
        total = n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / total)
        corr = np.outer(delta, delta) if self.mode == "full" else delta * delta
        self.m2 = self.m2 + m2b + corr * (n * nb / total)
        self.count = total
        return self

    def finalize(self):
        if self.count < 2:
            raise InputError("need at least 2 samples to fit moments")
        cov = self.m2 / self.count
        if self.mode == "full":
            cov = 0.5 * (cov + cov.T)
        return DataMoments(self.mean.copy(), cov, self.mode, self.count)


def resolve_mode(mode, dim):
    if mode == "auto":
        return "full" if dim <= FULL_COV_MAX_DIM else "diagonal"
    return mode


def fit_moments(data, mode="full", batch_size=4096):
    """Population mean and (co)variance of a stream of vectors or batches."""
    if isinstance(data, np.ndarray):
        flat = data.reshape(len(data), -1) if data.ndim > 1 else data[:, None]
        mode = resolve_mode(mode, flat.shape[1])
        data = (flat[i : i + batch_size] for i in range(0, len(flat), batch_size))
    acc = None
    for chunk in data:
        chunk = np.asarray(chunk, dtype=float)
        if acc is None:
            acc = MomentAccumulator(resolve_mode(mode, chunk.reshape(-1).size if chunk.ndim == 1
                                                 else int(np.prod(chunk.shape[1:]))))
        acc.update(chunk)
    if acc is None:
        raise InputError("need at least 2 samples to fit moments")
    return acc.finalize()


def _factor(moments):
    """Cholesky factor of the jittered covariance over the non-constant dims."""
    if moments._chol is None:
        cov = moments.cov_matrix()
        active = np.flatnonzero(np.diag(cov) > 0)
        block = cov[np.ix_(active, active)]
        if active.size:
            lam_min = float(np.linalg.eigvalsh(block)[0])
            jitter = max(0.0, -lam_min) + 1e-9
            try:
                chol = np.linalg.cholesky(block + jitter * np.eye(active.size))
            except np.linalg.LinAlgError as exc:
                raise NumericError("Cholesky failed after jitter") from exc
        else:
            chol = np.zeros((0, 0))
        moments._chol = (active, chol)
    return moments._chol


def sample_gaussian(moments, n, rng):
    """n i.i.d. draws from N(mean, cov) as an (n, d) array.

    Dimensions with zero variance are returned exactly at their mean; the
    rest use a Cholesky factor of cov + jitter * I.
    """
    if n < 1:
        raise InputError("sample count must be positive")
    out = np.tile(moments.mean, (n, 1))
    if moments.mode == "diagonal":
        out += rng.standard_normal((n, moments.dim)) * np.sqrt(np.maximum(moments.cov, 0.0))
        return out
    active, chol = _factor(moments)
    if active.size:
        out[:, active] += rng.standard_normal((n, active.size)) @ chol.T
    return out


@dataclass
class ActivationStats:
    """Per-unit Bernoulli means of the relu gates, one array per relu layer.

    Updates use weight max(momentum, batch / seen), so the first 1/momentum
    uniform batches give an exact running average and later ones an EMA.
    """

    mu: list
    momentum: float = 1.0
    seen: int = 0

    @property
    def unit_count(self):
        return int(sum(m.size for m in self.mu))

    @property
    def stored_floats(self):
        return self.unit_count


def new_stats(params, momentum=1e-12):
    if not 0 < momentum <= 1:
        raise InputError("momentum must lie in (0, 1]")
    return ActivationStats([np.zeros(s) for s in params.relu_shapes], momentum, 0)


def update_bernoulli(stats, trace):
    pre = trace.preactivations
    if len(pre) != len(stats.mu) or any(p.shape[1:] != m.shape for p, m in zip(pre, stats.mu)):
        raise InputError("trace layer shapes do not match activation stats")
    nb = pre[0].shape[0] if pre else 0
    if nb == 0:
        return stats
    seen = stats.seen + nb
    weight = max(stats.momentum, nb / seen)
    mu = [(1 - weight) * m + weight * (p > 0).mean(axis=0) for m, p in zip(stats.mu, pre)]
    return ActivationStats(mu, stats.momentum, seen)


def collect_stats(params, x, head=0, batch_size=512):
    """Exact activation frequencies of `params` over the inputs `x`."""
    stats = new_stats(params)
    for i in range(0, len(x), batch_size):
        stats = update_bernoulli(stats, forward(params, x[i : i + batch_size], head))
    return stats


@dataclass
class Coreset:
    inputs: np.ndarray
    targets: np.ndarray = None

    @property
    def size(self):
        return self.inputs.shape[0]

    @property
    def stored_floats(self):
        return self.inputs.size + (0 if self.targets is None else self.targets.size)


@dataclass
class ClassComponent:
    label: int
    count: int
    moments: DataMoments
    stats: ActivationStats


@dataclass
class TaskSummary:
    theta0: object
    kind: str
    head: int = 0
    moments: DataMoments = None
    stats: ActivationStats = None
    classwise: dict = None
    coreset: Coreset = None
    fisher: object = None

    def __post_init__(self):
        if self.kind not in SUMMARY_KINDS:
            raise InputError(f"unknown summary kind {self.kind!r}")
        needed = {"moments": self.moments, "classwise": self.classwise,
                  "coreset": self.coreset, "fisher": self.fisher}[self.kind]
        if needed is None:
            raise InputError(f"{self.kind} summary is missing its payload")

    @property
    def priors(self):
        total = sum(c.count for c in self.classwise.values())
        return {k: c.count / total for k, c in self.classwise.items()}

    def component(self, label):
        """Plain moments summary for one class of a classwise summary."""
        comp = self.classwise[label]
        return TaskSummary(self.theta0, "moments", self.head, comp.moments, comp.stats)


def build_summary(params, x, y=None, kind="moments", head=0, mode="auto", stats=None,
                  class_stats=None, coreset_size=40, rng=None, fisher=None,
                  coreset_stats=False):
    """Summarize a task's training data for later FSD estimation.

    `stats` / `class_stats` are gate means gathered during training; when
    absent they are computed from one pass of `params` over the data.
    """
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise InputError("cannot summarize an empty dataset")
    theta0 = params.copy()
    flat = x.reshape(len(x), -1)
    if kind == "moments":
        return TaskSummary(theta0, kind, head, fit_moments(flat, mode),
                           stats or collect_stats(params, x, head))
    if kind == "classwise":
        if y is None:
            raise InputError("classwise summaries need labels")
        y = np.asarray(y)
        comps = {}
        for label in np.unique(y):
            sel = y == label
            if sel.sum() < 2:
                raise InputError(f"class {label} has fewer than 2 samples")
            st = (class_stats or {}).get(int(label)) or collect_stats(params, x[sel], head)
            comps[int(label)] = ClassComponent(int(label), int(sel.sum()),
                                               fit_moments(flat[sel], mode), st)
        return TaskSummary(theta0, kind, head, classwise=comps)
    if kind == "coreset":
        if rng is None:
            raise InputError("coreset selection needs a seeded generator")
        n = min(coreset_size, len(x))
        idx = rng.choice(len(x), size=n, replace=False)
        st = (stats or collect_stats(params, x, head)) if coreset_stats else None
        return TaskSummary(theta0, kind, head, stats=st, coreset=Coreset(flat[idx].copy()))
    if kind == "fisher":
        if fisher is None:
            from .estimators import estimate_fisher_diag

            fisher = estimate_fisher_diag(params, x, head=head, rng=rng)
        return TaskSummary(theta0, kind, head, fisher=fisher)
    raise InputError(f"unknown summary kind {kind!r}")


# serialization ------------------------------------------------------------

_KIND_CODES = {k: i for i, k in enumerate(SUMMARY_KINDS)}


def _section(w, tag, body):
    w.raw(tag)
    w.u64(len(body))
    w.raw(body)


def _moments_body(m):
    w = Writer()
    w.u8(0 if m.mode == "full" else 1)
    w.u64(m.count)
    w.tensor(m.mean)
    w.tensor(m.cov)
    return w.getvalue()


def _read_moments(r):
    mode = {0: "full", 1: "diagonal"}.get(r.u8())
    if mode is None:
        raise CorruptFileError("bad moment mode")
    count = r.u64()
    mean, cov = r.tensor(), r.tensor()
    return DataMoments(mean, cov, mode, count)


def _stats_body(s):
    w = Writer()
    w.f64(s.momentum)
    w.u64(s.seen)
    w.u32(len(s.mu))
    for m in s.mu:
        w.tensor(m)
    return w.getvalue()


def _read_stats(r):
    momentum, seen = r.f64(), r.u64()
    return ActivationStats([r.tensor() for _ in range(r.u32())], momentum, seen)


def summary_to_bytes(summary):
    sections = []
    meta = Writer()
    meta.u8(_KIND_CODES[summary.kind])
    meta.u32(summary.head)
    sections.append((b"META", meta.getvalue()))
    sections.append((b"THTA", container.params_to_bytes(summary.theta0)))
    if summary.moments is not None:
        sections.append((b"MOMS", _moments_body(summary.moments)))
    if summary.stats is not None:
        sections.append((b"BERN", _stats_body(summary.stats)))
    if summary.coreset is not None:
        w = Writer()
        w.tensor(summary.coreset.inputs)
        w.u8(summary.coreset.targets is not None)
        if summary.coreset.targets is not None:
            w.tensor(summary.coreset.targets)
        sections.append((b"CORE", w.getvalue()))
    if summary.classwise is not None:
        w = Writer()
        w.u32(len(summary.classwise))
        for label in sorted(summary.classwise):
            comp = summary.classwise[label]
            w.i64(comp.label)
            w.u64(comp.count)
            w.raw(_moments_body(comp.moments))
            w.raw(_stats_body(comp.stats))
        sections.append((b"CLSW", w.getvalue()))
    if summary.fisher is not None:
        w = Writer()
        w.tensor(summary.fisher.flat())
        sections.append((b"FISH", w.getvalue()))
    w = Writer()
    w.header(len(sections))
    for tag, body in sections:
        _section(w, tag, body)
    return w.getvalue()


def _parse(data):
    """Decode a summary blob; returns (summary, float count per section tag)."""
    r = Reader(data)
    count = r.header()
    fields, floats = {}, {}
    for _ in range(count):
        tag = bytes(r.take(4))
        body = bytes(r.take(r.u64()))
        sr = Reader(body)
        if tag == b"META":
            code, head = sr.u8(), sr.u32()
            if code >= len(SUMMARY_KINDS):
                raise CorruptFileError(f"unknown summary kind code {code}")
            fields["kind"], fields["head"] = SUMMARY_KINDS[code], head
        elif tag == b"THTA":
            fields["theta0"] = container.read_params(sr)
        elif tag == b"MOMS":
            fields["moments"] = _read_moments(sr)
        elif tag == b"BERN":
            fields["stats"] = _read_stats(sr)
        elif tag == b"CORE":
            inputs = sr.tensor()
            targets = sr.tensor() if sr.u8() else None
            fields["coreset"] = Coreset(inputs, targets)
        elif tag == b"CLSW":
            comps = {}
            for _ in range(sr.u32()):
                label, cnt = sr.i64(), sr.u64()
                comps[label] = ClassComponent(label, cnt, _read_moments(sr), _read_stats(sr))
            fields["classwise"] = comps
        elif tag == b"FISH":
            fields["fisher_flat"] = sr.tensor()
        else:
            raise CorruptFileError(f"unknown section {tag!r}")
        sr.done()
        floats[tag.decode()] = sr.floats
    r.done()
    if "kind" not in fields or "theta0" not in fields:
        raise CorruptFileError("summary is missing META or THTA")
    flat = fields.pop("fisher_flat", None)
    if flat is not None:
        fields["fisher"] = fields["theta0"].from_flat(flat)
    try:
        return TaskSummary(**fields), floats
    except InputError as exc:
        raise CorruptFileError(str(exc)) from exc


def summary_from_bytes(data):
    return _parse(data)[0]


def stored_float_counts(summary):
    """Float64 values per section of the serialized summary (headers excluded)."""
    return _parse(summary_to_bytes(summary))[1]


def save_summary(path, summary):
    with open(path, "wb") as fh:
        fh.write(summary_to_bytes(summary))


def load_summary(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {path}") from exc
    return summary_from_bytes(data)

