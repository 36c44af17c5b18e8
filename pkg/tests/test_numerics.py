import numpy as np
import pytest

from sepgnet import numerics as nm
from sepgnet.numerics import (
    CheckpointError,
    ConfigError,
    GradTape,
    Parameter,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    conv2d,
    finite_diff_check,
    linear,
    load_checkpoint,
    relu,
    save_checkpoint,
    strip_pool,
)

rng = np.random.default_rng(42)


def _p(name, arr):
    return Parameter(name, np.asarray(arr, dtype=np.float32))


# ---- conv2d ----


def test_conv2d_identity_kernel():
    x = Tensor(rng.standard_normal((1, 1, 3, 3)).astype(np.float32))
    w = _p("w", np.ones((1, 1, 1, 1)))
    y = conv2d(x, w, stride=1, padding=0)
    np.testing.assert_array_equal(y.data, x.data)


def test_conv2d_zero_input():
    x = Tensor(np.zeros((2, 3, 5, 4), np.float32))
    w = _p("w", rng.standard_normal((4, 3, 3, 3)))
    y = conv2d(x, w, stride=1, padding=1)
    assert not y.data.any()


def test_conv2d_weight_gradient_matches_finite_differences():
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
    w = _p("w", rng.standard_normal((3, 2, 3, 3)) * 0.5)

    def f(p):
        return nm.sum_all(conv2d(x, p, stride=1, padding=0))

    assert finite_diff_check(f, w, eps=1e-2) < 1e-3


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, _p("w", np.zeros((3, 5, 3, 3))), 1, 0)  # channel mismatch
    with pytest.raises(ShapeError):
        conv2d(x, _p("w2", np.zeros((3, 2, 7, 7))), 1, 0)  # kernel too large
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((2, 4), np.float32)), _p("w3", np.zeros((3, 2, 3, 3))), 1, 0)


def test_conv2d_output_shape_formula():
    x = Tensor(np.zeros((1, 1, 11, 7), np.float32))
    w = _p("w", np.zeros((2, 1, 3, 3)))
    y = conv2d(x, w, stride=2, padding=1)
    assert y.shape == (1, 2, (11 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


# ---- relu ----


def test_relu_basic():
    y = relu(Tensor(np.array([-1.0, 0.0, 2.0], np.float32)))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])


def test_relu_positive_passthrough():
    x = Tensor(np.abs(rng.standard_normal(10)).astype(np.float32) + 0.1)
    np.testing.assert_array_equal(relu(x).data, x.data)


def test_relu_gradient_away_from_kink():
    base = rng.standard_normal((4, 4))
    base[np.abs(base) < 5e-2] = 0.2  # keep clear of the kink
    p = _p("p", base)

    def f(param):
        return nm.sum_all(relu(param.value))

    assert finite_diff_check(f, p, eps=1e-3) < 1e-3


# ---- strip_pool ----


def test_strip_pool_rows():
    x = Tensor(rng.standard_normal((2, 3, 12, 5)).astype(np.float32))
    y = strip_pool(x, 12)
    assert y.shape == (2, 12, 3)
    np.testing.assert_allclose(y.data[1, 4, 2], x.data[1, 2, 4, :].mean(), rtol=1e-6)


def test_strip_pool_constant():
    x = Tensor(np.full((1, 2, 8, 3), 7.5, np.float32))
    np.testing.assert_allclose(strip_pool(x, 4).data, 7.5, rtol=1e-6)


def test_strip_pool_direct_averaging_oracle():
    x = Tensor(rng.standard_normal((1, 1, 4, 2)).astype(np.float32))
    y = strip_pool(x, 2)
    expect = np.stack(
        [x.data[0, 0, :2].mean(), x.data[0, 0, 2:].mean()]
    )
    np.testing.assert_allclose(y.data[0, :, 0], expect, rtol=1e-6)


def test_strip_pool_divisibility_error():
    with pytest.raises(ConfigError, match="7.*3|3.*7"):
        strip_pool(Tensor(np.zeros((1, 1, 7, 2), np.float32)), 3)


# ---- linear ----


def test_linear_identity():
    x = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    y = linear(x, _p("w", np.eye(4)), _p("b", np.zeros(4)))
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_zero_weight_bias_rows():
    b = np.array([1.0, -2.0, 3.0], np.float32)
    y = linear(Tensor(np.ones((5, 4), np.float32)), _p("w", np.zeros((4, 3))), _p("b", b))
    np.testing.assert_array_equal(y.data, np.tile(b, (5, 1)))


def test_linear_gradient():
    x = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    w = _p("w", rng.standard_normal((4, 2)))
    b = _p("b", rng.standard_normal(2))

    def f_w(p):
        return nm.sum_all(linear(x, p, b))

    def f_b(_):
        return nm.sum_all(linear(x, w, b))

    assert finite_diff_check(f_w, w, eps=1e-2) < 1e-3
    assert finite_diff_check(f_b, b, eps=1e-2) < 1e-3


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3), np.float32)), _p("w", np.zeros((4, 2))), _p("b", np.zeros(2)))


# ---- tape / backward ----


def test_backward_sum_gives_ones():
    p = _p("p", rng.standard_normal((3, 2)))
    with GradTape():
        out = nm.sum_all(p.value)
    backward(out)
    np.testing.assert_array_equal(p.grad.data, np.ones((3, 2), np.float32))


def test_backward_unused_parameter_gets_zero():
    p = _p("p", rng.standard_normal(4))
    q = _p("q", rng.standard_normal(4))
    with GradTape():
        out = nm.sum_all(p.value)
    backward(out)
    assert not q.grad.data.any()


def test_backward_composite_model_matches_finite_differences():
    x = Tensor(rng.uniform(0.2, 1.0, (2, 2, 8, 6)).astype(np.float32))
    w = _p("conv", rng.standard_normal((3, 2, 3, 3)) * 0.4)
    lw = _p("lin_w", rng.standard_normal((3, 2)) * 0.4)
    lb = _p("lin_b", np.zeros(2))

    def f(_):
        h = relu(conv2d(x, w, stride=2, padding=1))
        pooled = nm.global_avg_pool(h)
        return nm.mean_all(linear(pooled, lw, lb))

    for p in (w, lw, lb):
        assert finite_diff_check(f, p, eps=1e-2) < 1e-3


def test_backward_requires_scalar():
    p = _p("p", rng.standard_normal(4))
    with GradTape():
        out = relu(p.value)
    with pytest.raises(TapeError, match="scalar"):
        backward(out)


def test_double_backward_errors():
    p = _p("p", rng.standard_normal(4))
    with GradTape():
        out = nm.sum_all(p.value)
    backward(out)
    with pytest.raises(TapeError, match="twice"):
        backward(out)


def test_backward_without_tape_errors():
    out = nm.sum_all(Tensor(np.ones(3, np.float32)))
    with pytest.raises(TapeError, match="tape"):
        backward(out)


def test_grad_accumulates_additively():
    p = _p("p", rng.standard_normal(4))
    for _ in range(2):
        with GradTape():
            out = nm.sum_all(p.value)
        backward(out)
    np.testing.assert_array_equal(p.grad.data, 2 * np.ones(4, np.float32))
    p.zero_grad()
    assert not p.grad.data.any()


def test_nested_tapes_rejected():
    with GradTape():
        with pytest.raises(TapeError):
            with GradTape():
                pass


def test_forward_determinism():
    x = Tensor(rng.standard_normal((2, 3, 16, 8)).astype(np.float32))
    w = _p("w", rng.standard_normal((4, 3, 3, 3)))
    a = relu(conv2d(x, w, stride=2, padding=1)).data
    b = relu(conv2d(x, w, stride=2, padding=1)).data
    assert np.array_equal(a, b)


def test_all_finite_on_finite_inputs():
    x = Tensor(rng.standard_normal((2, 3, 12, 8)).astype(np.float32) * 100)
    w = _p("w", rng.standard_normal((4, 3, 3, 3)))
    y = strip_pool(relu(conv2d(x, w, stride=2, padding=1)), 3)
    assert np.isfinite(y.data).all()


# ---- finite_diff_check itself ----


def test_finite_diff_check_sum_is_tiny():
    p = _p("p", rng.standard_normal(5))

    def f(param):
        return nm.sum_all(param.value)

    assert finite_diff_check(f, p, eps=1e-3) < 1e-4


def test_finite_diff_check_constant_function_zero():
    p = _p("p", rng.standard_normal(5))
    c = Tensor(np.array([3.0], np.float32))

    def f(param):
        return nm.weighted_sum([(1.0, c), (0.0, nm.sum_all(param.value))])

    assert finite_diff_check(f, p, eps=1e-3) == 0.0


def test_finite_diff_check_rejects_bad_eps():
    p = _p("p", np.ones(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: nm.sum_all(q.value), p, eps=0.0)


# ---- checkpoint ----


def test_checkpoint_roundtrip_exact(tmp_path):
    params = [
        _p("alpha", rng.standard_normal((3, 4))),
        _p("beta/bias", rng.standard_normal(7)),
    ]
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    state = load_checkpoint(path)
    assert set(state) == {"alpha", "beta/bias"}
    for p in params:
        np.testing.assert_array_equal(state[p.name], p.value.data)


def test_checkpoint_magic_and_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint([_p("a", np.ones(3))], path)
    blob = path.read_bytes()
    assert blob.startswith(b"SEPGCKPT")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTAMAGC" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="truncat"):
        load_checkpoint(tmp_path / "trunc.ckpt")


def test_checkpoint_rejects_duplicate_names(tmp_path):
    with pytest.raises(CheckpointError, match="unique"):
        save_checkpoint([_p("a", np.ones(2)), _p("a", np.ones(2))], tmp_path / "x.ckpt")
