"""Function space distance estimators.

All estimators compare a frozen network theta0 with a candidate theta1 and
return an FsdEstimate. Besides the exact empirical average they cover the
diagonal-Fisher quadratic (EWC), parameter-space linearization (NTK),
activation linearization with true gates (LAFTR), Bernoulli-gated sampling
(BGLN-S, dense and conv) and deterministic moment propagation (BGLN-D).

Linearized estimators propagate the old network's activations a0 together
with the difference da between the two networks:

    ds = dW a0 + W1 da + db,    a0 <- m * s0,    da <- m * ds

where m is the relu gate: 1{s0 > 0} for LAFTR, a Bernoulli draw for BGLN.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .net import (apply_layer, as_batch, backward, forward, jvp, layer_params,
                  per_example_sq_grads)
from .rng import substream
from .summaries import sample_gaussian
from .train import log_softmax, softmax

METRICS = ("sq_euclid_logits", "sq_euclid_softmax", "kl_softmax")
ESTIMATORS = ("empirical", "ewc", "ntk", "laftr", "bgln-s", "bgln-d", "bgln-s-conv")
BGLN_D_MODES = ("verbatim", "exact-diagonal", "exact")


@dataclass(frozen=True)
class FsdEstimate:
    value: float
    estimator: str
    metric: str
    samples_used: int
    seed: int = None
    stderr: float = None

    def to_dict(self):
        return {"value": self.value, "estimator": self.estimator, "metric": self.metric,
                "samples": self.samples_used, "seed": self.seed}


def _check_metric(metric):
    if metric not in METRICS:
        raise InputError(f"unknown metric {metric!r}; expected one of {METRICS}")


def metric_values(z0, dz, metric):
    """Per-example rho(z0, z0 + dz)."""
    _check_metric(metric)
    if metric == "sq_euclid_logits":
        return 0.5 * np.sum(dz**2, axis=1)
    z1 = z0 + dz
    if metric == "sq_euclid_softmax":
        return 0.5 * np.sum((softmax(z1) - softmax(z0)) ** 2, axis=1)
    lp0, lp1 = log_softmax(z0), log_softmax(z1)
    return np.maximum(np.sum(np.exp(lp0) * (lp0 - lp1), axis=1), 0.0)


def metric_grad(z0, dz, metric):
    """Per-example derivative of rho(z0, z1) with respect to z1 = z0 + dz."""
    _check_metric(metric)
    if metric == "sq_euclid_logits":
        return dz.copy()
    p0, p1 = softmax(z0), softmax(z0 + dz)
    if metric == "sq_euclid_softmax":
        v = p1 - p0
        return p1 * (v - np.sum(p1 * v, axis=1, keepdims=True))
    if np.any((p1 == 0) & (p0 > 0)):
        raise InputError("KL gradient undefined: zero probability under theta1")
    return p1 - p0


def _finish(values, name, metric, seed=None, samples=None):
    values = np.asarray(values, dtype=float)
    n = values.size
    stderr = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else None
    return FsdEstimate(float(values.mean()), name, metric,
                       n if samples is None else samples, seed, stderr)


# exact empirical -----------------------------------------------------------

def _empirical(theta0, theta1, x, metric, head, need_grad):
    theta0.check_same_arch(theta1)
    z0 = forward(theta0, x, head).z
    tr1 = forward(theta1, x, head)
    dz = tr1.z - z0
    vals = metric_values(z0, dz, metric)
    grad = None
    if need_grad:
        grad = backward(theta1, tr1, metric_grad(z0, dz, metric) / len(vals))
    return vals, grad


def empirical_fsd(theta0, theta1, inputs, metric="sq_euclid_logits", head=0):
    """Mean of rho(f(x, theta0), f(x, theta1)) over the given inputs."""
    vals, _ = _empirical(theta0, theta1, _nonempty(theta0, inputs), metric, head, False)
    return _finish(vals, "empirical", metric)


def _nonempty(params, inputs):
    x = as_batch(params, np.asarray(inputs, dtype=float).reshape((-1,) + params.input_shape))
    if len(x) == 0:
        raise InputError("empty dataset")
    return x


# EWC ------------------------------------------------------------------------

def taylor_fsd_diag(theta0, theta1, fisher_diag, need_grad=False):
    """0.5 * sum_j F_j (theta1_j - theta0_j)^2."""
    theta0.check_same_arch(theta1)
    f = fisher_diag.flat()
    if np.any(f < 0):
        raise InputError("Fisher diagonal has negative entries")
    delta = theta1 - theta0
    value = 0.5 * float(np.dot(f, delta.flat() ** 2))
    est = FsdEstimate(value, "ewc", "quadratic", 0)
    if need_grad:
        return est, fisher_diag.zip_map(delta, np.multiply)
    return est


def estimate_fisher_diag(params, inputs, n_label_samples=1, rng=None, head=0,
                         likelihood="categorical", batch_size=256):
    """Diagonal of the Fisher information at `params`.

    Categorical: labels are drawn from the model's own predictive distribution
    (true Fisher, not the empirical one). Gaussian: unit-variance output noise,
    for which the expectation over labels is taken exactly.
    """
    x = _nonempty(params, inputs)
    if likelihood == "categorical" and rng is None:
        raise InputError("categorical Fisher needs a seeded generator")
    total = params.zeros_like()
    k = params.output_dim
    for i in range(0, len(x), batch_size):
        tr = forward(params, x[i : i + batch_size], head)
        if likelihood == "gaussian":
            for j in range(k):
                g = np.zeros_like(tr.z)
                g[:, j] = 1.0
                total = total + per_example_sq_grads(params, tr, g)
            continue
        if likelihood != "categorical":
            raise InputError(f"unknown likelihood {likelihood!r}")
        p = softmax(tr.z)
        cum = np.cumsum(p, axis=1)
        for _ in range(n_label_samples):
            u = rng.random((len(p), 1))
            y = np.minimum((u > cum).sum(axis=1), k - 1)
            g = -p.copy()
            g[np.arange(len(p)), y] += 1.0
            total = total + per_example_sq_grads(params, tr, g)
    denom = len(x) * (1 if likelihood == "gaussian" else n_label_samples)
    return total * (1.0 / denom)


# NTK ------------------------------------------------------------------------

def _ntk(theta0, theta1, x, metric, head, need_grad):
    theta0.check_same_arch(theta1)
    tr0 = forward(theta0, x, head)
    dz = jvp(theta0, x, theta1 - theta0, head)
    vals = metric_values(tr0.z, dz, metric)
    grad = None
    if need_grad:
        grad = backward(theta0, tr0, metric_grad(tr0.z, dz, metric) / len(vals))
    return vals, grad


def ntk_fsd(theta0, theta1, coreset, metric="sq_euclid_logits", head=0):
    """FSD of theta0 against the first-order Taylor expansion of f around theta0."""
    vals, _ = _ntk(theta0, theta1, _nonempty(theta0, coreset), metric, head, False)
    return _finish(vals, "ntk", metric)


# linearized forward pass ----------------------------------------------------

def delta_pass(theta0, theta1, x, head, gate_fn, track_a1=False):
    """Propagate (a0, da) through the linearized network.

    `gate_fn(r, s0)` returns the gate for the r-th relu layer given theta0's
    preactivation there. Returns (z0, dz, gates, extras) where extras holds
    the a1/s1 bookkeeping streams when `track_a1` is set.
    """
    theta0.check_same_arch(theta1)
    wb0, wb1 = layer_params(theta0, head), layer_params(theta1, head)
    a0 = x
    da = np.zeros_like(x)
    a1 = x if track_a1 else None
    extras = {"a1": [], "s1": []}
    gates, r = [], 0
    for spec, p0, p1 in zip(theta0.arch, wb0, wb1):
        if spec.kind == "relu":
            m = gate_fn(r, a0)
            gates.append(m)
            a0, da = m * a0, m * da
            if track_a1:
                a1 = a0 + da
                extras["a1"].append(a1)
            r += 1
        elif spec.has_params:
            dwb = (p1[0] - p0[0], p1[1] - p0[1])
            s0 = apply_layer(spec, a0, p0)
            ds = apply_layer(spec, a0, dwb) + apply_layer(spec, da, (p1[0], None))
            if track_a1:
                s1 = apply_layer(spec, a1, p1)
                extras["s1"].append(s1)
                a1 = s1
            a0, da = s0, ds
        else:
            a0, da = apply_layer(spec, a0), apply_layer(spec, da)
            if track_a1:
                a1 = apply_layer(spec, a1)
    p0, p1 = wb0[-1], wb1[-1]
    hs = theta0.head_spec
    z0 = apply_layer(hs, a0, p0)
    dz = apply_layer(hs, a0, (p1[0] - p0[0], p1[1] - p0[1])) + apply_layer(hs, da, (p1[0], None))
    return z0, dz, gates, extras


def _gated_grad(theta1, x, head, gates, z0, dz, metric):
    """Gradient w.r.t. theta1 of the mean metric, masks held fixed.

    With gates m, a1 = a0 + m * ds = m * s1, so the linearized theta1 network
    is theta1 itself with every relu replaced by multiplication with m.
    """
    tr = forward(theta1, x, head, gates=gates)
    return backward(theta1, tr, metric_grad(z0, dz, metric) / len(z0))


def _laftr(theta0, theta1, x, metric, head, need_grad):
    z0, dz, gates, _ = delta_pass(theta0, theta1, x, head, lambda r, s0: (s0 > 0).astype(float))
    vals = metric_values(z0, dz, metric)
    grad = _gated_grad(theta1, x, head, gates, z0, dz, metric) if need_grad else None
    return vals, grad


def laftr_fsd(theta0, theta1, inputs, metric="sq_euclid_logits", head=0):
    """FSD under activation linearization around theta0 with the true relu gates."""
    vals, _ = _laftr(theta0, theta1, _nonempty(theta0, inputs), metric, head, False)
    return _finish(vals, "laftr", metric)


# BGLN-S ----------------------------------------------------------------------

def _require_stats(summary, theta):
    if summary.stats is None:
        raise InputError("summary has no activation statistics")
    shapes = [tuple(m.shape) for m in summary.stats.mu]
    if shapes != [tuple(s) for s in theta.relu_shapes]:
        raise InputError("activation statistics do not match the network's relu layers")
    return summary.stats.mu


def _bgln_inputs(summary, n_samples, input_rng):
    theta0 = summary.theta0
    if summary.coreset is not None:
        x = summary.coreset.inputs
    elif summary.moments is not None:
        x = sample_gaussian(summary.moments, n_samples, input_rng)
    else:
        raise InputError("summary has neither moments nor a coreset")
    return x.reshape((-1,) + theta0.input_shape)


def draw_mask(rng, mu, n):
    """One Bernoulli(mu) gate per unit for each of n samples."""
    return (rng.random((n,) + mu.shape) < mu).astype(float)


def _streams(seed, input_rng, mask_rng):
    return (input_rng or substream(seed, "gaussian"), mask_rng or substream(seed, "bernoulli"))


def _bgln_s(summary, theta1, metric, n_samples, seed, head, need_grad, input_rng=None,
            mask_rng=None):
    if n_samples < 1:
        raise InputError("n_samples must be at least 1")
    theta0 = summary.theta0
    if any(s.kind not in ("dense", "relu") for s in theta0.arch):
        raise InputError("bgln-s handles dense networks; use bgln-s-conv for conv nets")
    mu = _require_stats(summary, theta0)
    in_rng, m_rng = _streams(seed, input_rng, mask_rng)
    x = _bgln_inputs(summary, n_samples, in_rng)
    n = len(x)
    z0, dz, gates, _ = delta_pass(theta0, theta1, x, head,
                                  lambda r, s0: draw_mask(m_rng, mu[r], n), track_a1=True)
    vals = metric_values(z0, dz, metric)
    grad = _gated_grad(theta1, x, head, gates, z0, dz, metric) if need_grad else None
    return vals, grad


def bgln_s_fsd(summary, theta1, metric="sq_euclid_logits", n_samples=64, seed=0, head=None,
               input_rng=None, mask_rng=None):
    """Monte Carlo BGLN estimate: Gaussian (or coreset) inputs, Bernoulli gates.

    Each relu layer draws one mask per sample and uses it to gate both a0 and
    da. Inputs and masks come from independent named substreams of `seed`
    unless explicit generators are passed.
    """
    head = summary.head if head is None else head
    vals, _ = _bgln_s(summary, theta1, metric, n_samples, seed, head, False, input_rng, mask_rng)
    return _finish(vals, "bgln-s", metric, seed)


def _bgln_s_conv(summary, theta1, metric, n_samples, seed, head, need_grad, input_rng=None,
                 mask_rng=None):
    if n_samples < 1:
        raise InputError("n_samples must be at least 1")
    theta0 = summary.theta0
    theta0.check_same_arch(theta1)
    mu = _require_stats(summary, theta0)
    in_rng, m_rng = _streams(seed, input_rng, mask_rng)
    x = _bgln_inputs(summary, n_samples, in_rng)
    n = len(x)
    wb0, wb1 = layer_params(theta0, head), layer_params(theta1, head)
    h0 = h1 = x
    gates, r = [], 0
    for spec, p0, p1 in zip(theta0.arch, wb0, wb1):
        if spec.has_params:
            h0, h1 = apply_layer(spec, h0, p0), apply_layer(spec, h1, p1)
        elif spec.kind == "relu":
            ds = h1 - h0
            m = draw_mask(m_rng, mu[r], n)
            gates.append(m)
            h0 = m * h0
            h1 = h0 + m * ds
            r += 1
        else:
            h0, h1 = apply_layer(spec, h0), apply_layer(spec, h1)
    z0 = apply_layer(theta0.head_spec, h0, wb0[-1])
    dz = apply_layer(theta0.head_spec, h1, wb1[-1]) - z0
    vals = metric_values(z0, dz, metric)
    grad = _gated_grad(theta1, x, head, gates, z0, dz, metric) if need_grad else None
    return vals, grad


def bgln_s_conv_fsd(summary, theta1, metric="sq_euclid_logits", n_samples=64, seed=0, head=None,
                    input_rng=None, mask_rng=None):
    """BGLN-S for conv nets: two concrete passes, gated differences at each relu."""
    head = summary.head if head is None else head
    vals, _ = _bgln_s_conv(summary, theta1, metric, n_samples, seed, head, False,
                           input_rng, mask_rng)
    return _finish(vals, "bgln-s-conv", metric, seed)


# BGLN-D ----------------------------------------------------------------------

@dataclass
class DeltaState:
    """Moments of (a0, da) after one relu layer of the BGLN-D recursion."""

    mean_a0: np.ndarray
    mean_da: np.ndarray
    cov_a0: np.ndarray
    cov_da: np.ndarray
    cross: np.ndarray


def _block_linear(p0, p1, n_in):
    """Joint map [a0; da] -> [s0; ds] = [[W0, 0], [dW, W1]] [a0; da] + [b0; db]."""
    w0, b0 = p0
    w1, b1 = p1
    m = w0.shape[0]
    a = np.zeros((2 * m, 2 * n_in))
    a[:m, :n_in] = w0
    a[m:, :n_in] = w1 - w0
    a[m:, n_in:] = w1
    return a, np.concatenate([b0, b1 - b0])


def _gate_matrices(mu, mode):
    """Elementwise multiplier M and correction weights E for the gating step.

    cov' = M * cov + E * (cov + mean mean^T). With m ~ Ber(mu) shared by a0 and
    da, E[m_i m_j] is mu_i mu_j off the diagonal and mu_i on it; the verbatim
    rule uses mu mu^T everywhere and drops the a0/da cross covariance.
    """
    n = mu.size
    mu2 = np.concatenate([mu, mu])
    mult = np.outer(mu2, mu2)
    corr = np.zeros_like(mult)
    idx = np.arange(n)
    extra = mu * (1 - mu)
    if mode != "verbatim":
        corr[idx, idx] = extra
        corr[idx + n, idx + n] = extra
    if mode == "exact":
        corr[idx, idx + n] = extra
        corr[idx + n, idx] = extra
    else:
        mult[:n, n:] = 0.0
        mult[n:, :n] = 0.0
    return mu2, mult, corr


def _bgln_d(summary, theta1, head, mode, need_grad, keep_states=False):
    if mode not in BGLN_D_MODES:
        raise InputError(f"unknown BGLN-D mode {mode!r}")
    theta0 = summary.theta0
    theta0.check_same_arch(theta1)
    if any(s.kind not in ("dense", "relu") for s in theta0.arch):
        raise InputError("bgln-d supports dense relu networks only")
    if summary.moments is None:
        raise InputError("bgln-d needs data moments")
    mu = _require_stats(summary, theta0)
    wb0, wb1 = layer_params(theta0, head), layer_params(theta1, head)
    d = summary.moments.dim
    mean = np.concatenate([summary.moments.mean, np.zeros(d)])
    cov = np.zeros((2 * d, 2 * d))
    cov[:d, :d] = summary.moments.cov_matrix()
    tape, states = [], []
    r = 0
    steps = [(s, p0, p1) for s, p0, p1 in zip(theta0.arch, wb0, wb1)]
    steps.append((theta0.head_spec, wb0[-1], wb1[-1]))
    for spec, p0, p1 in steps:
        if spec.kind == "dense":
            a, c = _block_linear(p0, p1, mean.size // 2)
            tape.append(("lin", a, mean, cov))
            mean = a @ mean + c
            cov = a @ cov @ a.T
        else:
            mu2, mult, corr = _gate_matrices(mu[r], mode)
            tape.append(("gate", mu2, mult, corr, mean))
            cov = mult * cov + corr * (cov + np.outer(mean, mean))
            mean = mu2 * mean
            r += 1
            if keep_states:
                n = mean.size // 2
                states.append(DeltaState(mean[:n].copy(), mean[n:].copy(), cov[:n, :n].copy(),
                                         cov[n:, n:].copy(), cov[:n, n:].copy()))
    k = mean.size // 2
    e_dz, cov_dz = mean[k:], cov[k:, k:]
    value = 0.5 * float(e_dz @ e_dz) + 0.5 * float(np.trace(cov_dz))
    if not need_grad:
        return value, None, states
    g_mean = np.concatenate([np.zeros(k), e_dz])
    g_cov = np.zeros_like(cov)
    g_cov[k:, k:] = 0.5 * np.eye(k)
    grads = []
    for entry in reversed(tape):
        if entry[0] == "lin":
            _, a, m_in, c_in = entry
            ga = np.outer(g_mean, m_in) + 2.0 * g_cov @ a @ c_in
            n_out, n_in = a.shape[0] // 2, a.shape[1] // 2
            grads.append((ga[n_out:, :n_in] + ga[n_out:, n_in:], g_mean[n_out:].copy()))
            g_mean = a.T @ g_mean
            g_cov = a.T @ g_cov @ a
        else:
            _, mu2, mult, corr, m_in = entry
            gc = corr * g_cov
            g_mean = mu2 * g_mean + 2.0 * gc @ m_in
            g_cov = mult * g_cov + gc
    grads.reverse()
    heads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in theta1.heads]
    heads[head] = grads[-1]
    grad = theta1.with_tensors([t for pair in grads[:-1] + heads for t in pair])
    return value, grad, states


def bgln_d_fsd(summary, theta1, head=None, metric="sq_euclid_logits", mode="verbatim"):
    """Deterministic BGLN estimate by propagating first and second moments.

    Returns 0.5 ||E[dz]||^2 + 0.5 tr Cov(dz). `mode` selects the gating rule:
    "verbatim" multiplies covariances by mu mu^T and drops Cov(a0, da);
    "exact-diagonal" uses the exact Bernoulli second moment on the diagonal;
    "exact" additionally keeps Cov(a0, da), which makes the result equal to
    the expectation of BGLN-S with Gaussian inputs.
    """
    if metric != "sq_euclid_logits":
        raise InputError("bgln-d requires the squared Euclidean metric on logits")
    head = summary.head if head is None else head
    value, _, _ = _bgln_d(summary, theta1, head, mode, False)
    return FsdEstimate(max(value, 0.0), "bgln-d", metric, 0)


def bgln_d_states(summary, theta1, head=None, mode="verbatim"):
    """Per-relu-layer DeltaState list from the BGLN-D recursion."""
    head = summary.head if head is None else head
    return _bgln_d(summary, theta1, head, mode, False, keep_states=True)[2]


# dispatch -------------------------------------------------------------------

def _fixed_inputs(summary, n_samples, seed):
    """Concrete inputs for estimators that need them: coreset, else Gaussian draws."""
    if summary.coreset is not None:
        return summary.coreset.inputs.reshape((-1,) + summary.theta0.input_shape)
    if summary.moments is not None:
        x = sample_gaussian(summary.moments, n_samples, substream(seed, "gaussian"))
        return x.reshape((-1,) + summary.theta0.input_shape)
    raise InputError("summary has neither a coreset nor moments")


def _single(kind, summary, theta1, metric, n_samples, seed, head, mode, need_grad, inputs):
    theta0 = summary.theta0
    if kind == "ewc":
        if summary.fisher is None:
            raise InputError("ewc needs a fisher summary")
        out = taylor_fsd_diag(theta0, theta1, summary.fisher, need_grad)
        return out if need_grad else (out, None)
    if kind == "bgln-d":
        if metric != "sq_euclid_logits":
            raise InputError("bgln-d requires the squared Euclidean metric on logits")
        value, grad, _ = _bgln_d(summary, theta1, head, mode, need_grad)
        return FsdEstimate(max(value, 0.0), kind, metric, 0), grad
    if kind == "bgln-s":
        vals, grad = _bgln_s(summary, theta1, metric, n_samples, seed, head, need_grad)
        return _finish(vals, kind, metric, seed), grad
    if kind == "bgln-s-conv":
        vals, grad = _bgln_s_conv(summary, theta1, metric, n_samples, seed, head, need_grad)
        return _finish(vals, kind, metric, seed), grad
    x = inputs if inputs is not None else _fixed_inputs(summary, n_samples, seed)
    x = _nonempty(theta0, x)
    fn = {"empirical": _empirical, "ntk": _ntk, "laftr": _laftr}.get(kind)
    if fn is None:
        raise InputError(f"unknown estimator {kind!r}; expected one of {ESTIMATORS}")
    vals, grad = fn(theta0, theta1, x, metric, head, need_grad)
    return _finish(vals, kind, metric, seed), grad


def estimate(kind, summary, theta1, metric="sq_euclid_logits", n_samples=64, seed=0, head=None,
             mode="verbatim", inputs=None, need_grad=False):
    """Evaluate estimator `kind` from a TaskSummary; returns (FsdEstimate, grad or None).

    Classwise summaries are evaluated per class and mixed with the class
    frequencies as weights.
    """
    _check_metric(metric)
    head = summary.head if head is None else head
    if summary.kind == "classwise":
        return classwise_fsd(summary, theta1, kind, metric=metric, n_samples=n_samples,
                             seed=seed, head=head, mode=mode, need_grad=need_grad)
    return _single(kind, summary, theta1, metric, n_samples, seed, head, mode, need_grad, inputs)


def classwise_fsd(summary, theta1, estimator="bgln-d", metric="sq_euclid_logits", n_samples=64,
                  seed=0, head=None, mode="verbatim", need_grad=False):
    """Prior-weighted mixture of per-class estimates; returns (FsdEstimate, grad or None)."""
    if summary.kind != "classwise":
        raise InputError("classwise_fsd needs a classwise summary")
    head = summary.head if head is None else head
    priors = summary.priors
    value, grad, used = 0.0, None, 0
    for label in sorted(summary.classwise):
        comp = summary.component(label)
        if comp.moments.count == 0:
            raise InputError(f"class {label} component is empty")
        est, g = _single(estimator, comp, theta1, metric, n_samples, seed, head, mode,
                         need_grad, None)
        value += priors[label] * est.value
        used += est.samples_used
        if need_grad:
            g = g * priors[label]
            grad = g if grad is None else grad + g
    return FsdEstimate(value, estimator + "-cw", metric, used, seed), grad


def fsd_grad(kind, summary, theta1, **options):
    """(FsdEstimate, gradient w.r.t. theta1) for estimator `kind`."""
    return estimate(kind, summary, theta1, need_grad=True, **options)
