"""Unit tests for the autodiff engine: forward values against naive
references, gradients against central differences, and the contracts
(dtype policy, error cases, determinism) the rest of the package leans on.
"""
from __future__ import annotations

import numpy as np
import pytest

import restolab.tensor as T
from oracles import conv2d_naive, layer_norm_naive, psnr_naive


def check_grads(build, params, tol=1e-4, h=1e-4):
    """Compare reverse-mode grads of build(params) to central differences."""
    tensors = {k: T.Tensor(np.asarray(v, np.float64), requires_grad=True)
               for k, v in params.items()}
    loss = build(tensors)
    got = T.backprop(loss, tensors)

    def f(arrs):
        ts = {k: T.Tensor(arrs[k]) for k in arrs}
        return build(ts).item()

    want = T.finite_diff_grad(f, params, h=h)
    worst = max(T.max_rel_error(got[k], want[k]) for k in params)
    assert worst <= tol, f"worst grad rel err {worst:.3e} > {tol:.0e}"


class TestConv2d:
    def test_identity_kernel_preserves_input(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = T.conv2d(x, T.Tensor(w), T.Tensor(np.zeros(3, np.float32)), padding=1)
        assert out.shape == x.shape
        np.testing.assert_array_equal(out.data, x.data)

    def test_uniform_kernel_on_constant_image(self):
        x = T.Tensor(np.full((1, 1, 6, 6), 2.0, np.float64))
        w = T.Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0, np.float64))
        b = T.Tensor(np.array([0.5], np.float64))
        out = T.conv2d(x, w, b)
        # interior of a constant image averaged by a normalized kernel
        np.testing.assert_allclose(out.data, 2.5, rtol=0, atol=1e-12)
        assert out.shape == (1, 1, 4, 4)

    @pytest.mark.parametrize("stride,padding,k,cin,cout", [
        (1, 0, 1, 1, 1),
        (1, 1, 3, 2, 4),
        (2, 1, 3, 3, 5),
        (1, 2, 5, 2, 2),
        (2, 3, 7, 1, 3),
    ])
    def test_matches_naive_float64(self, stride, padding, k, cin, cout):
        rng = np.random.default_rng(hash((stride, padding, k)) % 2**32)
        x = rng.standard_normal((2, cin, 11, 9))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b),
                       stride=stride, padding=padding)
        want = conv2d_naive(x, w, b, stride=stride, padding=padding)
        assert got.data.shape == want.shape
        assert T.max_rel_error(got.data, want) < 1e-12

    def test_matches_naive_float32(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 4, 12, 12)).astype(np.float32)
        w = rng.standard_normal((6, 4, 3, 3)).astype(np.float32)
        b = rng.standard_normal(6).astype(np.float32)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=1, padding=1)
        want = conv2d_naive(x, w, b, stride=1, padding=1)
        assert T.max_rel_error(got.data, want) < 1e-5

    def test_gradients(self):
        rng = np.random.default_rng(3)
        params = {
            "x": rng.standard_normal((2, 2, 6, 6)),
            "w": rng.standard_normal((3, 2, 3, 3)),
            "b": rng.standard_normal(3),
        }

        def build(t):
            y = T.conv2d(t["x"], t["w"], t["b"], stride=2, padding=1)
            return (y * y).mean()

        check_grads(build, params)

    def test_rejects_even_kernel(self):
        x = T.Tensor(np.zeros((1, 1, 8, 8), np.float32))
        w = T.Tensor(np.zeros((1, 1, 2, 2), np.float32))
        b = T.Tensor(np.zeros(1, np.float32))
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(x, w, b)

    def test_rejects_kernel_larger_than_input(self):
        x = T.Tensor(np.zeros((1, 1, 3, 3), np.float32))
        w = T.Tensor(np.zeros((1, 1, 5, 5), np.float32))
        b = T.Tensor(np.zeros(1, np.float32))
        with pytest.raises(ValueError):
            T.conv2d(x, w, b)

    def test_rejects_channel_mismatch(self):
        x = T.Tensor(np.zeros((1, 2, 8, 8), np.float32))
        w = T.Tensor(np.zeros((1, 3, 3, 3), np.float32))
        b = T.Tensor(np.zeros(1, np.float32))
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(x, w, b)

    def test_strided_output_dims(self):
        x = T.Tensor(np.zeros((1, 1, 9, 9), np.float32))
        w = T.Tensor(np.zeros((4, 1, 3, 3), np.float32))
        b = T.Tensor(np.zeros(4, np.float32))
        out = T.conv2d(x, w, b, stride=2, padding=1)
        assert out.shape == (1, 4, 5, 5)


class TestLayerNorm:
    def test_matches_naive(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 6, 5, 4))
        gamma = rng.standard_normal(6)
        beta = rng.standard_normal(6)
        got = T.layer_norm(T.Tensor(x), T.Tensor(gamma), T.Tensor(beta))
        want = layer_norm_naive(x, gamma, beta)
        assert T.max_rel_error(got.data, want) < 1e-10

    def test_unit_gamma_zero_beta_statistics(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 16, 4, 4))
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16)))
        mu = out.data.mean(axis=1)
        var = out.data.var(axis=1)
        assert np.abs(mu).max() < 1e-9
        assert np.abs(var - 1.0).max() < 1e-5

    def test_gradients(self):
        rng = np.random.default_rng(13)
        params = {
            "x": rng.standard_normal((2, 4, 3, 3)),
            "g": rng.standard_normal(4),
            "b": rng.standard_normal(4),
        }

        def build(t):
            y = T.layer_norm(t["x"], t["g"], t["b"])
            return (y * y * y).mean()

        check_grads(build, params)


def test_upsample_nearest_values_and_grad():
    x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    out = T.upsample_nearest2x(T.Tensor(x))
    assert out.shape == (1, 2, 4, 4)
    assert out.data[0, 0, 0, 0] == out.data[0, 0, 1, 1] == x[0, 0, 0, 0]
    assert out.data[0, 1, 3, 3] == x[0, 1, 1, 1]

    def build(t):
        y = T.upsample_nearest2x(t["x"])
        return (y * y).sum()

    check_grads(build, {"x": np.random.default_rng(4).standard_normal((1, 2, 3, 3))})


def test_matmul_reshape_slice_grads():
    rng = np.random.default_rng(5)
    params = {"a": rng.standard_normal((4, 3)), "b": rng.standard_normal((3, 5))}

    def build(t):
        y = t["a"] @ t["b"]
        z = y.reshape(2, 10)[0:1, 2:7]
        return (z * z).sum()

    check_grads(build, params)


def test_elementwise_and_reduction_grads():
    rng = np.random.default_rng(6)
    params = {"x": rng.standard_normal(12) + 3.0, "y": rng.standard_normal(12)}

    def build(t):
        z = t["x"] * t["y"] - t["y"] + 0.5 * t["x"]
        return (z.abs() + t["x"].clamp_min(3.0).log10()).mean()

    check_grads(build, params, tol=2e-4)


def test_slice_gradient_scatters_into_place():
    x = T.Tensor(np.arange(6, dtype=np.float64), requires_grad=True)
    y = x[2:4].sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1, 1, 0, 0])


def test_psnr_loss_matches_reference_and_cap():
    rng = np.random.default_rng(8)
    a = rng.random((3, 8, 8)).astype(np.float32)
    b = rng.random((3, 8, 8)).astype(np.float32)
    loss = T.loss_psnr(T.Tensor(a), T.Tensor(b))
    assert abs(loss.item() + psnr_naive(a, b)) < 1e-4
    same = T.loss_psnr(T.Tensor(a), T.Tensor(a))
    assert same.item() == pytest.approx(-120.0, abs=1e-4)


def test_psnr_known_value():
    # constant difference of 0.5 -> mse 0.25 -> psnr 6.0206 dB
    a = T.Tensor(np.zeros((4, 4), np.float64))
    b = T.Tensor(np.full((4, 4), 0.5, np.float64))
    loss = T.loss_psnr(a, b)
    assert loss.item() == pytest.approx(-6.0205999, abs=1e-6)


def test_l1_loss_value_and_zero_subgradient():
    a = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = T.Tensor(np.array([1.0, 0.0, 5.0]))
    loss = T.loss_l1(a, b)
    assert loss.item() == pytest.approx(4.0 / 3.0)
    loss.backward()
    np.testing.assert_allclose(a.grad, [0.0, 1 / 3, -1 / 3], atol=1e-12)


def test_psnr_gradient():
    rng = np.random.default_rng(9)
    params = {"p": rng.random((2, 5, 5)), "t": rng.random((2, 5, 5))}

    def build(t):
        return T.loss_psnr(t["p"], t["t"])

    check_grads(build, params, tol=2e-4)


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_mixed_dtype_rejected():
    a = T.Tensor(np.ones(3, np.float32))
    b = T.Tensor(np.ones(3, np.float64))
    with pytest.raises(TypeError):
        a + b


def test_shape_mismatch_rejected():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((3, 2)))
    with pytest.raises(ValueError):
        a + b


def test_backprop_zero_for_disconnected_param():
    x = T.Tensor(np.ones(3), requires_grad=True)
    unused = T.Tensor(np.ones(2), requires_grad=True)
    loss = (x * x).sum()
    grads = T.backprop(loss, {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))
    np.testing.assert_allclose(grads["x"], 2 * np.ones(3))


def test_grad_accumulates_across_fanout():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0          # dy/dx = 2x + 3 = 7
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_conv_forward_is_run_to_run_deterministic():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    r1 = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1).data
    r2 = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1).data
    assert np.array_equal(r1, r2)


def test_finite_diff_on_known_function():
    def f(arrs):
        return float(arrs["w"] ** 2)

    g = T.finite_diff_grad(f, {"w": np.array(3.0)})
    assert g["w"] == pytest.approx(6.0, abs=1e-6)
