"""Losses, softmax, optimizers and minibatch iteration."""
import numpy as np

from .errors import InputError, NumericError
from .net import backward, forward


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def squared_error(pred, target):
    """Mean over the batch of 0.5 * ||pred - target||^2, and its gradient."""
    pred = np.atleast_2d(pred)
    diff = pred - np.asarray(target, dtype=float).reshape(pred.shape)
    n = pred.shape[0]
    return 0.5 * float(np.sum(diff**2)) / n, diff / n


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy for integer labels, and its gradient."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    lp = log_softmax(logits)
    loss = -float(lp[np.arange(n), labels].sum()) / n
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def per_example_loss(kind, pred, target):
    """Unreduced loss per example, used for self-influence scores."""
    pred = np.atleast_2d(pred)
    if kind == "mse":
        diff = pred - np.asarray(target, dtype=float).reshape(pred.shape)
        return 0.5 * np.sum(diff**2, axis=1)
    if kind == "ce":
        labels = np.asarray(target, dtype=int)
        return -log_softmax(pred)[np.arange(pred.shape[0]), labels]
    raise InputError(f"unknown loss {kind!r}")


LOSSES = {"mse": squared_error, "ce": cross_entropy}


def loss_and_grad(params, x, y, loss="ce", head=0):
    """Batch loss and its parameter gradient."""
    if len(x) == 0:
        raise InputError("empty batch")
    trace = forward(params, x, head)
    value, gz = LOSSES[loss](trace.z, y)
    return value, backward(params, trace, gz)


def minibatches(n, batch_size, rng=None):
    """Index arrays covering range(n) once; shuffled when `rng` is given."""
    if n == 0:
        raise InputError("empty dataset")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def sgd_step(params, grad, lr):
    return params.zip_map(grad, lambda p, g: p - lr * g)


class Adam:
    """Adam with bias correction; state is created lazily on the first step."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m, self.v = grad.zeros_like(), grad.zeros_like()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = self.m.zip_map(grad, lambda m, g: b1 * m + (1 - b1) * g)
        self.v = self.v.zip_map(grad, lambda v, g: b2 * v + (1 - b2) * g * g)
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        steps = self.m.zip_map(self.v, lambda m, v: (m / c1) / (np.sqrt(v / c2) + self.eps))
        return params.zip_map(steps, lambda p, s: p - self.lr * s)


class SGD:
    def __init__(self, lr=0.1):
        self.lr = lr

    def step(self, params, grad):
        return sgd_step(params, grad, self.lr)


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise InputError(f"unknown optimizer {name!r}")


def check_finite(value, what="loss"):
    if not np.isfinite(value):
        raise NumericError(f"{what} became non-finite")
    return value


def fit(params, x, y, loss="ce", epochs=1, batch_size=32, optimizer=None, rng=None, head=0,
        on_batch=None):
    """Plain minibatch training. `on_batch(epoch, params, idx)` runs before each step."""
    opt = optimizer or SGD(0.1)
    for epoch in range(epochs):
        for idx in minibatches(len(x), batch_size, rng):
            if on_batch is not None:
                on_batch(epoch, params, idx)
            value, grad = loss_and_grad(params, x[idx], y[idx], loss, head)
            check_finite(value)
            params = opt.step(params, grad)
    return params
