import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fndetect.errors import ConfigError, DimensionError
from fndetect.ops import (
    BatchNormParams,
    ConvWeights,
    activation,
    batchnorm,
    concat_channels,
    conv2d,
    count_ops,
    dwconv2d,
    fuse_conv_bn,
    maxpool2d,
    pconv2d,
    pwconv2d,
    upsample2x,
)
from fndetect.tensor import Tensor, default_dtype

from oracles import batchnorm_loops, conv_loops, maxpool_loops


def random_conv_case(rng, depthwise=False):
    n = int(rng.integers(1, 3))
    groups = 1
    if depthwise:
        c_in = c_out = groups = int(rng.integers(1, 5))
    else:
        groups = int(rng.choice([1, 1, 2]))
        c_in = groups * int(rng.integers(1, 4))
        c_out = groups * int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    h = int(rng.integers(max(k - 2 * p, 1), 8))
    w = int(rng.integers(max(k - 2 * p, 1), 8))
    x = rng.normal(size=(n, c_in, h, w))
    kernel = rng.normal(size=(c_out, c_in // groups, k, k))
    bias = rng.normal(size=c_out) if rng.random() < 0.5 else None
    return x, kernel, bias, s, p, groups


# -- conv2d ---------------------------------------------------------------

def test_conv_all_ones_3x3():
    out = conv2d(np.ones((1, 1, 3, 3)), ConvWeights(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = conv2d(x, ConvWeights(np.ones((1, 1, 1, 1)), np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_random_2x4x8x8_against_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 8, 8))
    kern = rng.normal(size=(5, 4, 3, 3))
    out = conv2d(x, ConvWeights(kern, padding=1))
    np.testing.assert_allclose(out.data, conv_loops(x, kern, padding=1), rtol=0, atol=1e-12)


def test_conv2d_matches_loops_200_cases():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x, kern, bias, s, p, g = random_conv_case(rng)
        out = conv2d(x, ConvWeights(kern, bias, s, p, g))
        np.testing.assert_allclose(out.data, conv_loops(x, kern, bias, s, p, g), rtol=0, atol=1e-12)


def test_conv_output_size_formula():
    out = conv2d(np.zeros((1, 2, 11, 7)), ConvWeights(np.zeros((3, 2, 3, 3)), stride=2, padding=1))
    assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError) as exc:
        conv2d(np.zeros((1, 3, 4, 4)), ConvWeights(np.zeros((2, 2, 3, 3))))
    assert exc.value.axis == "channel"


def test_conv_too_small_input_names_axis():
    with pytest.raises(DimensionError) as exc:
        conv2d(np.zeros((1, 1, 2, 8)), ConvWeights(np.zeros((1, 1, 3, 3))))
    assert exc.value.axis == "height"


def test_conv_weights_reject_bad_groups():
    with pytest.raises(ConfigError):
        ConvWeights(np.zeros((3, 1, 3, 3)), groups=2)


def test_conv_is_pure():
    rng = np.random.default_rng(3)
    x, kern, bias, s, p, g = random_conv_case(rng)
    w = ConvWeights(kern, bias, s, p, g)
    a, b = conv2d(x, w).data, conv2d(x, w).data
    assert a.tobytes() == b.tobytes()


# -- dwconv ---------------------------------------------------------------

def test_dwconv_identity_kernels():
    x = np.random.default_rng(4).normal(size=(1, 3, 5, 5))
    kern = np.zeros((3, 1, 3, 3))
    kern[:, 0, 1, 1] = 1.0
    out = dwconv2d(x, ConvWeights(kern, padding=1, groups=3))
    np.testing.assert_array_equal(out.data, x)


def test_dwconv_zeroed_channel_is_independent():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, 6, 6))
    kern = rng.normal(size=(4, 1, 3, 3))
    full = dwconv2d(x, ConvWeights(kern, padding=1, groups=4)).data
    kern[0] = 0.0
    zeroed = dwconv2d(x, ConvWeights(kern, padding=1, groups=4)).data
    assert np.all(zeroed[:, 0] == 0.0)
    np.testing.assert_array_equal(zeroed[:, 1:], full[:, 1:])


def test_dwconv_equals_block_diagonal_conv_and_loops():
    rng = np.random.default_rng(6)
    for _ in range(200):
        x, kern, bias, s, p, g = random_conv_case(rng, depthwise=True)
        c = x.shape[1]
        out = dwconv2d(x, ConvWeights(kern, bias, s, p, g)).data
        dense = np.zeros((c, c) + kern.shape[2:])
        for i in range(c):
            dense[i, i] = kern[i, 0]
        np.testing.assert_allclose(out, conv2d(x, ConvWeights(dense, bias, s, p)).data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out, conv_loops(x, kern, bias, s, p, g), rtol=0, atol=1e-12)


def test_dwconv_rejects_dense_weights():
    with pytest.raises(ConfigError):
        dwconv2d(np.zeros((1, 2, 4, 4)), ConvWeights(np.zeros((2, 2, 3, 3))))


# -- pconv ----------------------------------------------------------------

def test_pconv_full_equals_conv():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 4, 6, 6))
    w = ConvWeights(rng.normal(size=(4, 4, 3, 3)), padding=1)
    np.testing.assert_array_equal(pconv2d(x, w, 4).data, conv2d(x, w).data)


def test_pconv_zero_kernel_cp1():
    x = np.random.default_rng(8).normal(size=(1, 4, 5, 5))
    w = ConvWeights(np.zeros((1, 1, 3, 3)), np.array([0.25]), padding=1)
    out = pconv2d(x, w, 1).data
    assert np.all(out[:, 0] == 0.25)
    assert out[:, 1:].tobytes() == x[:, 1:].tobytes()


def test_pconv_matches_split_conv_concat():
    rng = np.random.default_rng(9)
    for _ in range(200):
        c = 4 * int(rng.integers(1, 4))
        cp = c // 4
        k = int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(int(rng.integers(1, 3)), c, int(rng.integers(3, 8)), int(rng.integers(3, 8))))
        kern = rng.normal(size=(cp, cp, k, k))
        out = pconv2d(x, ConvWeights(kern, padding=k // 2), cp).data
        expected = np.concatenate([conv_loops(x[:, :cp], kern, padding=k // 2), x[:, cp:]], axis=1)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
        assert out[:, cp:].tobytes() == x[:, cp:].tobytes()


def test_pconv_rejects_cp_above_c():
    with pytest.raises(ConfigError):
        pconv2d(np.zeros((1, 2, 4, 4)), ConvWeights(np.zeros((3, 3, 3, 3)), padding=1), 3)


def test_pconv_requires_same_padding():
    with pytest.raises(ConfigError):
        pconv2d(np.zeros((1, 4, 4, 4)), ConvWeights(np.zeros((1, 1, 3, 3))), 1)


# -- pwconv ---------------------------------------------------------------

def test_pwconv_identity_and_permutation():
    x = np.random.default_rng(10).normal(size=(2, 3, 4, 4))
    eye = np.eye(3)[:, :, None, None]
    np.testing.assert_array_equal(pwconv2d(x, ConvWeights(eye)).data, x)
    perm = np.eye(3)[[2, 0, 1]][:, :, None, None]
    np.testing.assert_array_equal(pwconv2d(x, ConvWeights(perm)).data, x[:, [2, 0, 1]])


def test_pwconv_matches_loops():
    rng = np.random.default_rng(11)
    for _ in range(200):
        c_in, c_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.normal(size=(int(rng.integers(1, 3)), c_in, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        kern = rng.normal(size=(c_out, c_in, 1, 1))
        bias = rng.normal(size=c_out)
        np.testing.assert_allclose(pwconv2d(x, ConvWeights(kern, bias)).data,
                                   conv_loops(x, kern, bias), rtol=0, atol=1e-12)


def test_pwconv_rejects_k3():
    with pytest.raises(ConfigError):
        pwconv2d(np.zeros((1, 1, 3, 3)), ConvWeights(np.zeros((1, 1, 3, 3))))


# -- batchnorm ------------------------------------------------------------

def test_batchnorm_standardized_input_is_unchanged():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batchnorm(x, BatchNormParams.identity(3), training=True).data
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-12)


def test_batchnorm_gamma0_beta5():
    p = BatchNormParams(np.zeros(2), np.full(2, 5.0), np.zeros(2), np.ones(2))
    out = batchnorm(np.random.default_rng(13).normal(size=(2, 2, 3, 3)), p).data
    assert np.all(out == 5.0)


def test_batchnorm_matches_loops_train_and_eval():
    rng = np.random.default_rng(14)
    for _ in range(200):
        n, c, h, w = (int(v) for v in rng.integers(1, 5, size=4))
        if n * h * w < 2:
            n = 2
        x = rng.normal(size=(n, c, h, w)) * 3 + 1
        gamma, beta = rng.normal(size=c), rng.normal(size=c)
        mean, var = rng.normal(size=c), rng.uniform(0.1, 2.0, size=c)
        p = BatchNormParams(gamma, beta, mean.copy(), var.copy())
        np.testing.assert_allclose(batchnorm(x, p, training=True).data,
                                   batchnorm_loops(x, gamma, beta), rtol=0, atol=1e-12)
        np.testing.assert_allclose(batchnorm(x, p, training=False).data,
                                   batchnorm_loops(x, gamma, beta, p.running_mean, p.running_var),
                                   rtol=0, atol=1e-12)


def test_batchnorm_running_stats_momentum():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(4, 2, 3, 3))
    p = BatchNormParams.identity(2, momentum=0.1)
    batchnorm(x, p, training=True)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(p.running_mean, 0.1 * mu, atol=1e-15)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * var, atol=1e-15)


def test_batchnorm_rejects_bad_params():
    with pytest.raises(ConfigError):
        BatchNormParams(np.ones(1), np.zeros(1), np.zeros(1), -np.ones(1))
    with pytest.raises(ConfigError):
        BatchNormParams(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps=0.0)


# -- fusion ---------------------------------------------------------------

def _random_bn(rng, c, zero_var=False):
    var = rng.uniform(0.2, 3.0, size=c)
    if zero_var:
        var[0] = 0.0
    return BatchNormParams(rng.normal(size=c), rng.normal(size=c), rng.normal(size=c), var, training=False)


def test_fuse_identity_bn():
    rng = np.random.default_rng(16)
    w = ConvWeights(rng.normal(size=(3, 2, 3, 3)), padding=1)
    fused = fuse_conv_bn(w, BatchNormParams.identity(3, training=False))
    np.testing.assert_allclose(fused.kernel.data, w.kernel.data / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(fused.bias.data, 0.0)


def test_fuse_matches_pipeline_100_triples():
    rng = np.random.default_rng(17)
    for _ in range(100):
        x, kern, bias, s, p, g = random_conv_case(rng)
        w = ConvWeights(kern, bias, s, p, g)
        bn = _random_bn(rng, kern.shape[0])
        ref = batchnorm(conv2d(x, w), bn).data
        got = conv2d(x, fuse_conv_bn(w, bn)).data
        assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_fuse_zero_variance_is_finite():
    rng = np.random.default_rng(18)
    w = ConvWeights(rng.normal(size=(2, 2, 1, 1)))
    fused = fuse_conv_bn(w, _random_bn(rng, 2, zero_var=True))
    assert np.all(np.isfinite(conv2d(rng.normal(size=(1, 2, 3, 3)), fused).data))


def test_fuse_rejects_training_mode():
    with pytest.raises(ConfigError):
        fuse_conv_bn(ConvWeights(np.ones((1, 1, 1, 1))), BatchNormParams.identity(1))


# -- activations and plumbing ---------------------------------------------

def test_activation_scalars():
    assert activation(np.array([-1.0]), "relu").data[0] == 0.0
    assert activation(np.array([0.0]), "sigmoid").data[0] == 0.5
    with pytest.raises(ConfigError):
        activation(np.zeros(1), "gelu")


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_silu_matches_scalar_formula(values):
    out = activation(np.array(values), "silu").data
    for v, o in zip(values, out):
        assert o == pytest.approx(v / (1.0 + np.exp(-v)), rel=1e-12, abs=1e-300)


def test_upsample_single_value():
    out = upsample2x(np.full((1, 1, 1, 1), 3.5)).data
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 3.5))


def test_concat_single_is_identity_and_order():
    a = Tensor(np.zeros((1, 1, 2, 2)))
    b = Tensor(np.ones((1, 2, 2, 2)))
    assert concat_channels([a]) is a
    out = concat_channels([a, b]).data
    assert out.shape == (1, 3, 2, 2) and np.all(out[:, 0] == 0) and np.all(out[:, 1:] == 1)


def test_concat_mismatch_names_axis():
    with pytest.raises(DimensionError) as exc:
        concat_channels([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2))])
    assert exc.value.axis == "height"


def test_maxpool_hand_case():
    out = maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).data
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4.0


def test_maxpool_matches_loops():
    rng = np.random.default_rng(19)
    for _ in range(100):
        k = int(rng.integers(1, 6))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, k // 2 + 1))
        x = rng.normal(size=(1, 2, int(rng.integers(k, 9)), int(rng.integers(k, 9))))
        np.testing.assert_array_equal(maxpool2d(x, k, s, p).data, maxpool_loops(x, k, s, p))


def test_count_ops_records_macs():
    with count_ops() as counter:
        conv2d(np.zeros((2, 4, 8, 8)), ConvWeights(np.zeros((6, 4, 3, 3)), padding=1))
    assert counter.macs == 8 * 8 * 9 * 4 * 6


def test_float32_mode_keeps_dtype():
    with default_dtype(np.float32):
        x = Tensor(np.ones((1, 2, 4, 4)))
        w = ConvWeights(Tensor(np.ones((2, 2, 3, 3))), padding=1)
        assert conv2d(x, w).dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 7), st.integers(1, 3))
def test_conv_output_shape_property(n, c, hw, k):
    x = np.zeros((n, c, hw, hw))
    k = min(k, hw)
    out = conv2d(x, ConvWeights(np.zeros((2, c, k, k))))
    assert out.shape == (n, 2, hw - k + 1, hw - k + 1)
