import numpy as np
import pytest

from fsdkit.net import NetworkParams, mlp_arch, mlp_params


def finite_diff_grad(fn, params, eps=1e-5):
    """Central finite-difference gradient of a scalar function of params."""
    flat = params.flat()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = eps
        out[i] = (fn(params.from_flat(flat + step)) - fn(params.from_flat(flat - step))) / (2 * eps)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    err = np.abs(analytic - numeric)
    assert np.all(err <= rtol * np.abs(numeric) + atol), float(np.max(err))


def scalar_net(w1, w2):
    """1 -> relu -> 1 network with zero biases."""
    arch, head = mlp_arch([1, 1, 1])
    return NetworkParams((1,), arch, head, [(np.array([[w1]]), np.zeros(1))],
                         [(np.array([[w2]]), np.zeros(1))])


def linear_net(w, b=0.0):
    arch, head = mlp_arch([1, 1])
    return NetworkParams((1,), arch, head, [], [(np.array([[w]]), np.array([b]))])


def perturbed(params, rng, scale):
    return params + params.map(lambda a: scale * rng.standard_normal(a.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def net_pair(rng):
    t0 = mlp_params([3, 6, 5, 2], rng)
    return t0, perturbed(t0, rng, 0.2)
