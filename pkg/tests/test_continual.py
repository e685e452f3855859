import numpy as np
import pytest

from fsdkit.continual import (CONV_CHANNELS, AccuracyMatrix, CLRunConfig, average_accuracy,
                              backward_transfer, conv_params, fsd_penalty_grad, generate_tasks,
                              train_sequential)
from fsdkit.errors import InputError
from fsdkit.estimators import estimate


def test_average_accuracy():
    assert average_accuracy(np.array([[100.0, np.nan], [100.0, 100.0]])) == 100.0
    R = np.array([[80.0, np.nan, np.nan], [70, 90, np.nan], [80, 90, 100]])
    assert average_accuracy(R) == 90.0
    with pytest.raises(InputError):
        average_accuracy(np.array([[80.0, np.nan], [np.nan, 90.0]]))


def test_backward_transfer():
    assert backward_transfer(np.array([[90.0, np.nan], [90.0, 95.0]])) == 0.0
    assert backward_transfer(np.array([[100.0, np.nan], [90.0, 100.0]])) == -10.0
    R = np.array([[90.0, np.nan, np.nan], [85, 80, np.nan], [70, 75, 95]])
    assert backward_transfer(AccuracyMatrix(R)) == -12.5
    with pytest.raises(InputError):
        backward_transfer(np.array([[50.0]]))


def test_split_stream_partition():
    s = generate_tasks("split_digits", seed=0)
    assert len(s.tasks) == 5
    classes = [set(t.classes) for t in s.tasks]
    assert set().union(*classes) == set(range(10))
    assert all(a.isdisjoint(b) for i, a in enumerate(classes) for b in classes[i + 1 :])
    assert [t.head for t in s.tasks] == list(range(5))


def test_streams_are_deterministic():
    for kind in ("split_digits", "permuted_digits", "synthetic_gaussian_classes",
                 "toy_regression_2task"):
        a, b = generate_tasks(kind, seed=3), generate_tasks(kind, seed=3)
        for ta, tb in zip(a.tasks, b.tasks):
            assert np.array_equal(ta.x_train, tb.x_train) and np.array_equal(ta.y_test, tb.y_test)


def test_permuted_anchor_task_is_identity():
    s = generate_tasks("permuted_digits", seed=1, n_tasks=3)
    base = generate_tasks("split_digits", seed=1)
    assert s.tasks[0].x_train.shape[1] == 64
    assert not np.array_equal(s.tasks[1].x_train, s.tasks[0].x_train)
    assert np.array_equal(np.sort(s.tasks[1].x_train, axis=1), np.sort(s.tasks[0].x_train, axis=1))
    assert base.tasks[0].x_train.shape[1] == 64


def test_unknown_kind_and_missing_file(tmp_path):
    with pytest.raises(InputError):
        generate_tasks("split_cifar")
    with pytest.raises(InputError):
        generate_tasks("split_digits", source="idx", image_path=tmp_path / "a",
                       label_path=tmp_path / "b")


def test_config_validation():
    with pytest.raises(InputError):
        CLRunConfig(lambda_fsd=-1)
    with pytest.raises(InputError):
        CLRunConfig.from_dict({"epochs": 1, "bogus": 2})
    with pytest.raises(InputError):
        train_sequential(generate_tasks("synthetic_gaussian_classes", n_tasks=2, per_class=10),
                         CLRunConfig(estimator="ewc", summary="moments", epochs=1))


def small_stream():
    return generate_tasks("synthetic_gaussian_classes", seed=0, n_tasks=2, dim=4, per_class=30)


def test_zero_lambda_is_plain_finetuning(monkeypatch):
    import fsdkit.continual as cl

    def fail(*a, **k):
        raise AssertionError("regularizer evaluated")

    monkeypatch.setattr(cl, "fsd_penalty_grad", fail)
    cfg = CLRunConfig(lambda_fsd=0.0, epochs=2, hidden=(8,))
    r = train_sequential(small_stream(), cfg)
    assert r.matrix.R.shape == (2, 2) and np.isnan(r.matrix.R[0, 1])


def test_single_task_matrix():
    s = small_stream()
    s.tasks = s.tasks[:1]
    r = train_sequential(s, CLRunConfig(epochs=3, hidden=(8,)))
    assert r.matrix.R.shape == (1, 1) and 0 <= r.matrix.R[0, 0] <= 100


def test_reproducible_and_penalty_zero_at_anchor():
    cfg = CLRunConfig(lambda_fsd=1.0, epochs=2, hidden=(8,), estimator="bgln-s", n_samples=8)
    a, b = train_sequential(small_stream(), cfg), train_sequential(small_stream(), cfg)
    assert np.array_equal(a.matrix.R, b.matrix.R, equal_nan=True) and a.params.identical(b.params)
    s0 = a.summaries[0]
    value, _ = fsd_penalty_grad(s0.theta0, [s0], cfg, 0)
    assert value == 0.0
    v, _ = fsd_penalty_grad(a.params, a.summaries[:1], cfg, 0)
    assert np.isfinite(v) and v > 0


@pytest.mark.parametrize("est,extra", [("bgln-d", {}), ("bgln-d", {"classwise": True}),
                                       ("ewc", {}), ("ntk", {}), ("laftr", {}),
                                       ("laftr", {"summary": "coreset"})])
def test_estimators_run_in_loop(est, extra):
    cfg = CLRunConfig(estimator=est, lambda_fsd=0.5, epochs=2, hidden=(8, 8), **extra)
    r = train_sequential(small_stream(), cfg)
    assert np.all(np.isfinite(np.tril(r.matrix.R)))
    assert r.summaries[0].head == 0 and r.summaries[1].head == 1
    assert estimate(est, r.summaries[0], r.params)[0].value >= 0


def test_last_epoch_stats_are_frequencies():
    cfg = CLRunConfig(epochs=1, hidden=(6,), batch_size=7)
    s = small_stream()
    s.tasks = s.tasks[:1]
    seen = {}
    r = train_sequential(s, cfg, on_task_end=lambda t, p, summ: seen.update(summary=summ))
    mu = seen["summary"].stats.mu[0]
    assert np.all((mu >= 0) & (mu <= 1)) and mu.shape == (6,)
    assert r.summaries[0] is seen["summary"]


def test_conv_trunk_shapes(rng):
    p = conv_params(8, CONV_CHANNELS, (64,), 2, rng)
    kinds = [s.kind for s in p.arch]
    assert kinds.count("conv2d") == 4 and kinds.count("dense") == 1
    assert p.input_shape == (1, 8, 8)


def test_conv_run_with_conv_sampler():
    s = generate_tasks("split_digits", n_tasks=2)
    cfg = CLRunConfig(estimator="bgln-s-conv", lambda_fsd=1.0, conv_channels=CONV_CHANNELS,
                      hidden=(16,), epochs=1, lr=1e-2, n_samples=8)
    res = train_sequential(s, cfg)
    assert res.matrix.complete()
    assert res.summaries[0].theta0.input_shape == (1, 8, 8)
    with pytest.raises(InputError):
        train_sequential(generate_tasks("synthetic_gaussian_classes", n_tasks=2, dim=10),
                         CLRunConfig(conv_channels=(4,), epochs=1))
