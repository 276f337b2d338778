import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from confshield.classifier import (
    _forward,
    NetworkParams,
    TrainConfig,
    accuracy,
    forward,
    init_params,
    input_gradient,
    loss,
    loss_and_input_gradient,
    model_bytes,
    param_gradient,
    parse_model,
    predict_proba,
    save_model,
    load_model,
    softmax,
    train,
    train_arrays,
)
from confshield.errors import ConfigurationError, DomainError, FormatError, ShapeError
from confshield.signal import Dataset

from oracles import linear_surrogate_gradient


def _ds(x, y, split=0):
    n = len(y)
    return Dataset(x, y, np.zeros(n), np.arange(n), np.zeros(n), np.full(n, split))


def _relu_pattern(params, x):
    _, cache = _forward(params, np.asarray(x)[None])
    z1, z2, s = cache[2], cache[4], cache[7]
    return np.concatenate([(z1 > 0).ravel(), (z2 > 0).ravel(), (s > 0).ravel()])


def _fd_gradient(params, x, label, h=1e-5):
    """Central differences plus a flag telling whether any stencil crossed a ReLU kink."""
    g = np.zeros_like(x)
    base = _relu_pattern(params, x)
    crossed = False
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (loss(forward(params, xp), label) - loss(forward(params, xm), label)) / (2 * h)
        crossed |= not (np.array_equal(_relu_pattern(params, xp), base)
                        and np.array_equal(_relu_pattern(params, xm), base))
    return g, crossed


def smooth_pairs(n, seed, L=24, h=1e-5):
    """n random (params, frame, label, fd_gradient) draws whose stencils cross no ReLU kink.

    Across a kink the loss is not differentiable and central differences
    measure a mixture of two one-sided slopes, so such draws are redrawn.
    """
    rng = np.random.default_rng(seed)
    out, i = [], 0
    while len(out) < n:
        params = init_params(i)
        params.conv1_b[:] = rng.normal(0, 0.1, params.conv1_b.shape)
        x = rng.standard_normal((2, L))
        label = int(rng.integers(0, 11))
        i += 1
        fd, crossed = _fd_gradient(params, x, label, h)
        if not crossed:
            out.append((params, x, label, fd))
    return out


def _max_rel_err(a, b, floor=1e-8):
    err = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(scale < floor, err, err / np.maximum(scale, 1e-300))
    return float(rel.max())


def test_zero_dense_gives_uniform_output():
    p = init_params(3)
    p.dense_w[:] = 0
    p.dense_b[:] = 0
    out = forward(p, np.random.default_rng(0).standard_normal((2, 64)))
    assert np.all(out == 1.0 / 11)


def test_softmax_of_equal_logits_is_uniform():
    assert np.allclose(softmax(np.ones(11)), 1 / 11, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 50.0))
def test_outputs_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    out = predict_proba(init_params(seed % 1000), scale * rng.standard_normal((3, 2, 32)))
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(out >= 0)


def test_loss_examples():
    p = np.zeros(11)
    p[4] = 1.0
    assert loss(p, 4) == 0.0
    assert math.isclose(loss(np.full(11, 1 / 11), 0), math.log(11), rel_tol=1e-12)
    assert round(loss(np.full(11, 1 / 11), 0), 6) == 2.397895
    assert round(loss(np.zeros(11), 0), 6) == 27.631021


@given(st.lists(st.floats(0, 1), min_size=11, max_size=11), st.integers(0, 10))
def test_loss_non_negative(values, label):
    p = np.asarray(values)
    assert loss(p, label) >= 0.0


def test_shape_errors():
    p = init_params(0)
    with pytest.raises(ShapeError):
        forward(p, np.zeros((3, 32)))
    with pytest.raises(ShapeError):
        NetworkParams(*[a for a in p.arrays()[:-1]], np.zeros(5))


def test_input_gradient_matches_finite_differences():
    worst = 0.0
    for params, x, label, fd in smooth_pairs(10, seed=12):
        worst = max(worst, _max_rel_err(input_gradient(params, x, label), fd))
    assert worst <= 1e-4


def test_input_gradient_matches_linear_surrogate():
    rng = np.random.default_rng(4)
    p = init_params(7)
    p.conv1_b[:] = 2.0  # keeps every stem unit active for small inputs
    p.dense_w *= 0.2
    p.res_b_w[:] = 0.0
    p.res_b_b[:] = 0.0
    x = 0.1 * rng.standard_normal((2, 20))
    for label in (0, 5, 10):
        want = linear_surrogate_gradient(p.conv1_w, p.conv1_b, p.dense_w, p.dense_b, x, label)
        assert np.allclose(input_gradient(p, x, label), want, rtol=1e-10, atol=1e-13)


def test_input_gradient_is_deterministic():
    p = init_params(1)
    x = np.random.default_rng(0).standard_normal((2, 32))
    assert np.array_equal(input_gradient(p, x, 3), input_gradient(p, x, 3))


def test_batched_gradient_equals_single():
    p = init_params(2)
    x = np.random.default_rng(1).standard_normal((4, 2, 32))
    y = np.array([0, 3, 6, 9])
    _, dx = loss_and_input_gradient(p, x, y)
    for i in range(4):
        assert np.allclose(dx[i], input_gradient(p, x[i], y[i]), rtol=1e-12, atol=1e-15)


def test_param_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = init_params(5)
    p.conv1_b[:] = 0.05
    x = rng.standard_normal((3, 2, 16))
    y = np.array([1, 2, 3])
    _, g = param_gradient(p, x, y)

    def f(q):
        probs = predict_proba(q, x)
        return float(np.mean(-np.log(probs[np.arange(3), y])))

    for name in ("conv1_w", "res_a_b", "res_b_w", "dense_w"):
        arr = getattr(p, name)
        for idx in list(np.ndindex(*arr.shape))[:: max(1, arr.size // 7)]:
            qp, qm = p.copy(), p.copy()
            getattr(qp, name)[idx] += 1e-6
            getattr(qm, name)[idx] -= 1e-6
            fd = (f(qp) - f(qm)) / 2e-6
            assert abs(fd - getattr(g, name)[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_train_separable_toy_in_five_epochs():
    n = 64
    y = np.repeat([0, 1], n // 2)
    x = np.zeros((n, 2, 16))
    x[:, 0, :] = np.where(y == 0, 1.0, -1.0)[:, None]
    cfg = TrainConfig(epochs=5, batch_size=8, learning_rate=0.1, seed=0)
    params = train(_ds(x, y), cfg)
    assert accuracy(params, _ds(x, y, split=2), "test") == 1.0


def test_zero_learning_rate_leaves_params_unchanged():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((20, 2, 16)), rng.integers(0, 11, 20)
    init = init_params(4)
    out = train_arrays(x, y, TrainConfig(epochs=3, batch_size=5, learning_rate=0.0), init=init)
    assert out == init


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((30, 2, 16)), rng.integers(0, 11, 30)
    cfg = TrainConfig(epochs=2, batch_size=7, seed=9)
    assert model_bytes(train_arrays(x, y, cfg)) == model_bytes(train_arrays(x, y, cfg))


def test_empty_training_split_is_configuration_error():
    x = np.zeros((4, 2, 16))
    with pytest.raises(ConfigurationError):
        train(_ds(x, np.zeros(4, dtype=int), split=2), TrainConfig(epochs=1))


def test_uniform_predictor_accuracy_uses_lowest_code():
    p = init_params(0)
    p.dense_w[:] = 0
    p.dense_b[:] = 0
    y = np.array([0, 0, 3, 5, 0, 7])
    x = np.random.default_rng(0).standard_normal((6, 2, 16))
    assert accuracy(p, _ds(x, y, 2)) == pytest.approx(3 / 6)


def test_perfect_predictor_accuracy():
    p = init_params(0)
    p.dense_w[:] = 0
    p.dense_b[:] = 0
    p.dense_b[6] = 10.0
    x = np.random.default_rng(0).standard_normal((5, 2, 16))
    assert accuracy(p, _ds(x, np.full(5, 6), 2)) == 1.0


def test_accuracy_without_frames_is_domain_error():
    x = np.zeros((2, 2, 16))
    with pytest.raises(DomainError):
        accuracy(init_params(0), _ds(x, np.zeros(2, dtype=int), split=0), "test")


def test_model_round_trip(tmp_path):
    p = init_params(11)
    path = tmp_path / "m.csmd"
    save_model(p, path)
    assert load_model(path) == p
    assert path.read_bytes()[:4] == b"CSMD"


def test_model_format_errors():
    data = model_bytes(init_params(0))
    with pytest.raises(FormatError):
        parse_model(b"NOPE" + data[4:])
    with pytest.raises(FormatError):
        parse_model(data[:4] + b"\x02\x00" + data[6:])
    with pytest.raises(FormatError):
        parse_model(data[:-1])
    with pytest.raises(FormatError):
        parse_model(data + b"\x00")
