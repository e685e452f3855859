import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fsdkit.errors import CorruptFileError, InputError, VersionError
from fsdkit.estimators import estimate_fisher_diag
from fsdkit.net import forward, mlp_params
from fsdkit.summaries import (ActivationStats, build_summary, collect_stats, fit_moments,
                              load_summary, new_stats, sample_gaussian, save_summary,
                              stored_float_counts, summary_from_bytes, summary_to_bytes,
                              update_bernoulli)


def test_hand_covariance():
    m = fit_moments([np.array([0.0, 0.0]), np.array([2.0, 2.0])], mode="full")
    assert m.mean.tolist() == [1.0, 1.0]
    assert m.cov.tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_repeated_point_zero_variance():
    m = fit_moments(np.array([5.0, 5.0, 5.0]), mode="diagonal")
    assert m.mean.tolist() == [5.0] and m.cov.tolist() == [0.0]


def test_too_few_samples_and_dim_mismatch():
    with pytest.raises(InputError):
        fit_moments(np.zeros((1, 3)))
    with pytest.raises(InputError):
        fit_moments([np.zeros(2), np.zeros(3)])


@settings(max_examples=40, deadline=None)
@given(data=arrays(np.float64, st.tuples(st.integers(2, 60), st.integers(1, 5)),
                   elements=st.floats(-1e3, 1e3)),
       batch=st.integers(1, 7))
def test_streaming_matches_two_pass(data, batch):
    full = fit_moments((data[i : i + batch] for i in range(0, len(data), batch)), mode="full")
    diag = fit_moments(data, mode="diagonal")
    mean = data.mean(axis=0)
    cov = (data - mean).T @ (data - mean) / len(data)
    scale = max(1.0, float(np.abs(data).max()) ** 2)
    np.testing.assert_allclose(full.mean, mean, atol=1e-10 * max(1.0, np.abs(data).max()))
    np.testing.assert_allclose(full.cov, cov, atol=1e-10 * scale)
    np.testing.assert_allclose(diag.cov, np.diag(full.cov), atol=1e-12 * scale)
    assert np.array_equal(full.cov, full.cov.T)


def test_large_stream_moments(rng):
    data = rng.standard_normal((100000, 3)) * [1.0, 10.0, 0.1] + 1e3
    m = fit_moments(data, batch_size=997)
    mean = data.mean(axis=0)
    np.testing.assert_allclose(m.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(m.cov, np.cov(data.T, bias=True), atol=1e-10)


def test_sample_gaussian_degenerate_and_clt(rng):
    m = fit_moments(np.array([[1.0, -2.0], [1.0, -2.0]]))
    assert np.all(sample_gaussian(m, 5, rng) == [1.0, -2.0])
    m1 = fit_moments(np.array([[-1.0], [1.0]]))
    s = sample_gaussian(m1, 100000, rng)
    assert abs(s.mean()) < 0.02 and abs(s.var() - 1.0) < 0.05


def test_sample_gaussian_full_cov(rng):
    a = rng.standard_normal((3, 3))
    data = rng.standard_normal((5000, 3)) @ a.T + 1.0
    m = fit_moments(data)
    s = sample_gaussian(m, 100000, rng)
    emp = np.cov(s.T, bias=True)
    np.testing.assert_allclose(emp, m.cov, rtol=0.05, atol=0.05 * np.abs(m.cov).max())


def test_sample_gaussian_rank_deficient(rng):
    base = rng.standard_normal((50, 2))
    data = np.hstack([base, base.sum(axis=1, keepdims=True)])
    s = sample_gaussian(fit_moments(data), 10, rng)
    assert np.all(np.isfinite(s))


def test_bernoulli_always_on_and_half():
    p = mlp_params([1, 2, 1], np.random.default_rng(0))
    p.layers[0] = (np.array([[1.0], [-1.0]]), np.zeros(2))
    stats = new_stats(p)
    for _ in range(4):
        stats = update_bernoulli(stats, forward(p, np.array([[1.0], [-1.0]])))
    assert stats.mu[0].tolist() == [0.5, 0.5]
    stats = new_stats(p)
    stats = update_bernoulli(stats, forward(p, np.array([[2.0], [3.0]])))
    assert stats.mu[0].tolist() == [1.0, 0.0]


def test_streaming_bernoulli_matches_batch(rng):
    p = mlp_params([3, 6, 4, 2], rng)
    x = rng.standard_normal((120, 3))
    stats = new_stats(p, momentum=1 / 6)
    for i in range(0, 120, 20):
        stats = update_bernoulli(stats, forward(p, x[i : i + 20]))
    tr = forward(p, x)
    for mu, s in zip(stats.mu, tr.preactivations):
        np.testing.assert_allclose(mu, (s > 0).mean(axis=0), atol=1e-12)
        assert np.all((mu >= 0) & (mu <= 1))


def test_bernoulli_shape_mismatch(rng):
    p = mlp_params([3, 6, 2], rng)
    q = mlp_params([3, 5, 2], rng)
    with pytest.raises(InputError):
        update_bernoulli(new_stats(p), forward(q, np.zeros((2, 3))))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), momentum=st.floats(1e-3, 1.0), steps=st.integers(1, 8))
def test_bernoulli_range(seed, momentum, steps):
    rng = np.random.default_rng(seed)
    p = mlp_params([2, 4, 1], rng)
    stats = new_stats(p, momentum)
    for _ in range(steps):
        stats = update_bernoulli(stats, forward(p, rng.standard_normal((rng.integers(1, 9), 2))))
        assert all(np.all((m >= 0) & (m <= 1)) for m in stats.mu)


def two_class_data(rng):
    x = np.vstack([rng.standard_normal((30, 3)) + 2, rng.standard_normal((50, 3)) - 1])
    y = np.array([0] * 30 + [1] * 50)
    return x, y


def test_classwise_components(rng):
    x, y = two_class_data(rng)
    p = mlp_params([3, 4, 2], rng)
    s = build_summary(p, x, y, kind="classwise")
    assert sorted(s.classwise) == [0, 1]
    for c in (0, 1):
        np.testing.assert_allclose(s.classwise[c].moments.mean, x[y == c].mean(axis=0))
    pooled = fit_moments(x)
    pri = s.priors
    mean = sum(pri[c] * s.classwise[c].moments.mean for c in pri)
    np.testing.assert_allclose(mean, pooled.mean, atol=1e-12)
    cov = sum(pri[c] * (s.classwise[c].moments.cov
                        + np.outer(s.classwise[c].moments.mean - mean,
                                   s.classwise[c].moments.mean - mean)) for c in pri)
    np.testing.assert_allclose(cov, pooled.cov, atol=1e-10)


def test_classwise_needs_two_per_class(rng):
    p = mlp_params([3, 4, 2], rng)
    with pytest.raises(InputError):
        build_summary(p, rng.standard_normal((3, 3)), np.array([0, 0, 1]), kind="classwise")


def test_coreset_full_size_is_permutation(rng):
    x = rng.standard_normal((12, 3))
    p = mlp_params([3, 4, 2], rng)
    s = build_summary(p, x, kind="coreset", coreset_size=12, rng=rng)
    assert sorted(map(tuple, s.coreset.inputs)) == sorted(map(tuple, x))


def test_point_mass_mixture_moments(rng):
    p = mlp_params([1, 2, 1], rng)
    s = build_summary(p, np.array([[-1.0], [1.0]] * 5))
    assert s.moments.mean.tolist() == [0.0] and s.moments.cov.tolist() == [[1.0]]


def all_kinds(rng):
    x, y = two_class_data(rng)
    p = mlp_params([3, 4, 2], rng, head_count=2)
    return [build_summary(p, x, head=1),
            build_summary(p, x, mode="diagonal"),
            build_summary(p, x, y, kind="classwise"),
            build_summary(p, x, kind="coreset", coreset_size=5, rng=rng, coreset_stats=True),
            build_summary(p, x, kind="fisher", rng=rng)]


def test_summary_round_trip(rng, tmp_path):
    for i, s in enumerate(all_kinds(rng)):
        blob = summary_to_bytes(s)
        assert summary_to_bytes(summary_from_bytes(blob)) == blob
        save_summary(tmp_path / f"{i}.sum", s)
        back = load_summary(tmp_path / f"{i}.sum")
        assert back.kind == s.kind and back.head == s.head and back.theta0.identical(s.theta0)


def test_summary_corrupt_and_version(rng):
    blob = summary_to_bytes(all_kinds(rng)[0])
    with pytest.raises(CorruptFileError):
        summary_from_bytes(blob[:-5])
    bad = bytearray(blob)
    bad[4:8] = (9).to_bytes(4, "little")
    with pytest.raises(VersionError):
        summary_from_bytes(bytes(bad))


def test_stored_float_counts(rng):
    moments, diag, classwise, coreset, fisher = all_kinds(rng)
    p = moments.theta0
    assert stored_float_counts(moments)["MOMS"] == 3 + 9
    assert stored_float_counts(moments)["BERN"] == 4
    assert stored_float_counts(diag)["MOMS"] == 2 * 3
    assert stored_float_counts(classwise)["CLSW"] == 2 * (4 + 3 + 9)
    assert stored_float_counts(coreset)["CORE"] == 5 * 3
    assert stored_float_counts(fisher)["FISH"] == p.n_params
    assert stored_float_counts(moments)["THTA"] == p.n_params


def test_collect_stats_is_frequency(rng):
    p = mlp_params([2, 5, 1], rng)
    x = rng.standard_normal((1000, 2))
    stats = collect_stats(p, x, batch_size=128)
    np.testing.assert_allclose(stats.mu[0], (forward(p, x).preactivations[0] > 0).mean(0),
                               atol=1e-12)
    assert isinstance(stats, ActivationStats)


def test_fisher_summary_matches_direct(rng):
    x, _ = two_class_data(rng)
    p = mlp_params([3, 4, 2], rng)
    s = build_summary(p, x, kind="fisher", rng=np.random.default_rng(5))
    direct = estimate_fisher_diag(p, x, rng=np.random.default_rng(5))
    assert np.array_equal(s.fisher.flat(), direct.flat())
