import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from utils.errors import DegenerateBatchError, DimensionError, OptimizerError, TrainingStepError
from utils.tensor_core import (
    GradientContext,
    LSTMWeights,
    Parameter,
    adam_step,
    conv2d,
    linear,
    lstm_step,
    normalize,
    parameter_checksum,
    spectral_power_iteration,
    transposed_conv2d,
    upsample,
)


def _conv_oracle(x, w, b, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    out[i, o, y, xx] = b[o] + np.sum(xp[i, :, y:y + k, xx:xx + k] * w[o])
    return out


def _deconv_oracle(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    full = np.zeros((n, cout, 2 * h + 2, 2 * wd + 2))
    for i in range(n):
        for c in range(cin):
            for y in range(h):
                for xx in range(wd):
                    for o in range(cout):
                        full[i, o, 2 * y:2 * y + 4, 2 * xx:2 * xx + 4] += x[i, c, y, xx] * w[c, o]
    return full[:, :, 1:1 + 2 * h, 1:1 + 2 * wd] + b[None, :, None, None]


def _bilinear_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))

    def taps(dst, size):
        src = max((dst + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(math.floor(src)), size - 1)
        hi = min(lo + 1, size - 1)
        return lo, hi, src - lo

    for y in range(2 * h):
        y0, y1, fy = taps(y, h)
        for xx in range(2 * w):
            x0, x1, fx = taps(xx, w)
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bottom = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, y, xx] = top * (1 - fy) + bottom * fy
    return out


def test_conv2d_ones_kernel_counts_neighbours():
    x = torch.ones(1, 1, 5, 5)
    out = conv2d(x, torch.ones(1, 1, 3, 3), torch.zeros(1), padding=1)
    assert out.shape == (1, 1, 5, 5)
    assert out[0, 0, 2, 2].item() == 9.0
    assert out[0, 0, 0, 0].item() == 4.0
    assert out[0, 0, 0, 2].item() == 6.0


@given(
    seed=st.integers(0, 10_000),
    n=st.integers(1, 2),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    size=st.integers(3, 8),
    k=st.sampled_from([1, 3]),
)
def test_conv2d_matches_loop_oracle(seed, n, cin, cout, size, k):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, cin, size, size, generator=g)
    w = torch.randn(cout, cin, k, k, generator=g)
    b = torch.randn(cout, generator=g)
    padding = k // 2
    out = conv2d(x, w, b, padding=padding).numpy()
    expected = _conv_oracle(x.numpy().astype(np.float64), w.numpy(), b.numpy(), padding)
    np.testing.assert_allclose(out, expected, atol=1e-4)


def test_conv2d_rejects_bad_shapes():
    x = torch.zeros(1, 2, 4, 4)
    with pytest.raises(DimensionError):
        conv2d(x, torch.zeros(1, 3, 3, 3), torch.zeros(1), padding=1)
    with pytest.raises(DimensionError):
        conv2d(x, torch.zeros(1, 2, 5, 5), torch.zeros(1), padding=2)
    with pytest.raises(DimensionError):
        conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 2, 3, 3), torch.zeros(1))


@given(seed=st.integers(0, 10_000), cin=st.integers(1, 3), cout=st.integers(1, 3), size=st.integers(1, 4))
def test_transposed_conv2d_matches_scatter_oracle(seed, cin, cout, size):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, cin, size, size, generator=g)
    w = torch.randn(cin, cout, 4, 4, generator=g)
    b = torch.randn(cout, generator=g)
    out = transposed_conv2d(x, w, b)
    assert out.shape == (1, cout, 2 * size, 2 * size)
    expected = _deconv_oracle(x.numpy().astype(np.float64), w.numpy(), b.numpy())
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-4)


def test_transposed_conv2d_needs_4x4_kernel():
    with pytest.raises(DimensionError):
        transposed_conv2d(torch.zeros(1, 2, 3, 3), torch.zeros(2, 2, 3, 3), torch.zeros(2))


def test_bilinear_upsample_half_pixel_centres():
    x = torch.tensor([[[[0.0, 2.0], [0.0, 2.0]]]])
    out = upsample(x, "bilinear")
    np.testing.assert_allclose(out.numpy(), _bilinear_oracle(x.numpy().astype(np.float64)), atol=1e-6)
    np.testing.assert_allclose(out[0, 0, 0].numpy(), [0.0, 0.5, 1.5, 2.0], atol=1e-6)


@given(seed=st.integers(0, 10_000), size=st.integers(1, 6))
def test_upsample_modes_match_oracles(seed, size):
    x = torch.randn(2, 3, size, size, generator=torch.Generator().manual_seed(seed))
    np.testing.assert_allclose(
        upsample(x, "bilinear").numpy(), _bilinear_oracle(x.numpy().astype(np.float64)), atol=1e-5
    )
    nearest = upsample(x, "nearest")
    np.testing.assert_array_equal(nearest.numpy(), x.numpy().repeat(2, axis=2).repeat(2, axis=3))


def test_upsample_unknown_mode():
    with pytest.raises(ValueError):
        upsample(torch.zeros(1, 1, 2, 2), "bicubic")


def test_batch_norm_is_identity_on_standardized_input():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(8, 3, 4, 4, generator=g)
    x = (x - x.mean(dim=(0, 2, 3), keepdim=True)) / x.std(dim=(0, 2, 3), unbiased=False, keepdim=True)
    out = normalize(x, "batch", torch.ones(3), torch.zeros(3), training=True)
    np.testing.assert_allclose(out.numpy(), x.numpy(), atol=1e-4)


def test_instance_norm_statistics_per_image():
    x = torch.randn(3, 2, 5, 5, generator=torch.Generator().manual_seed(4)) * 4 + 7
    out = normalize(x, "instance", torch.ones(2), torch.zeros(2), training=False)
    np.testing.assert_allclose(out.mean(dim=(2, 3)).numpy(), np.zeros((3, 2)), atol=1e-5)
    np.testing.assert_allclose(out.var(dim=(2, 3), unbiased=False).numpy(), np.ones((3, 2)), atol=1e-3)


def test_batch_norm_single_sample_training_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        normalize(torch.randn(1, 2, 3, 3), "batch", torch.ones(2), torch.zeros(2), training=True)
    out = normalize(torch.randn(1, 2, 3, 3), "none", torch.ones(2), torch.zeros(2), training=True)
    assert out.shape == (1, 2, 3, 3)


def test_lstm_step_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(5)
    hidden, width = 3, 2
    x = torch.randn(1, width, generator=g, dtype=torch.float64)
    h = torch.randn(1, hidden, generator=g, dtype=torch.float64)
    c = torch.randn(1, hidden, generator=g, dtype=torch.float64)
    w_ih = torch.randn(4 * hidden, width, generator=g, dtype=torch.float64, requires_grad=True)
    w_hh = torch.randn(4 * hidden, hidden, generator=g, dtype=torch.float64, requires_grad=True)
    bias = torch.randn(4 * hidden, generator=g, dtype=torch.float64, requires_grad=True)

    def scalar(w_ih, w_hh, bias):
        h_next, c_next = lstm_step(x, h, c, LSTMWeights(w_ih, w_hh, bias))
        return (h_next * torch.arange(1, hidden + 1, dtype=torch.float64)).sum() + c_next.sum()

    assert torch.autograd.gradcheck(scalar, (w_ih, w_hh, bias), eps=1e-6, atol=1e-6, rtol=1e-3)


def _float64(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


def _gradcheck_case(op, g):
    if op == "conv2d":
        inputs = (_float64(g, 2, 2, 4, 4), _float64(g, 3, 2, 3, 3), _float64(g, 3))
        return lambda x, w, b: conv2d(x, w, b, padding=1), inputs
    if op == "transposed_conv2d":
        return transposed_conv2d, (_float64(g, 1, 2, 3, 3), _float64(g, 2, 3, 4, 4), _float64(g, 3))
    if op == "upsample_bilinear":
        return lambda x: upsample(x, "bilinear"), (_float64(g, 2, 2, 3, 3),)
    if op in ("normalize_batch", "normalize_instance"):
        mode = op.split("_")[1]
        return (
            lambda x, gamma, beta: normalize(x, mode, gamma, beta, training=True),
            (_float64(g, 3, 2, 3, 3), _float64(g, 2), _float64(g, 2)),
        )
    return linear, (_float64(g, 3, 4), _float64(g, 5, 4), _float64(g, 5))


@pytest.mark.parametrize(
    "op", ["conv2d", "transposed_conv2d", "upsample_bilinear", "normalize_batch", "normalize_instance", "linear"]
)
def test_op_gradients_match_finite_differences(op):
    fn, inputs = _gradcheck_case(op, torch.Generator().manual_seed(17))
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-6, rtol=1e-3)


def test_lstm_step_rejects_mismatched_weights():
    with pytest.raises(DimensionError):
        lstm_step(torch.zeros(1, 2), torch.zeros(1, 3), torch.zeros(1, 3),
                  LSTMWeights(torch.zeros(12, 3), torch.zeros(12, 3), torch.zeros(12)))


def test_spectral_power_iteration_on_diagonal():
    w = torch.diag(torch.tensor([3.0, 1.0]))
    u = torch.tensor([0.6, 0.8])
    sigma, u_next, normalized = spectral_power_iteration(w, u, iters=20)
    assert sigma.item() == pytest.approx(3.0, abs=1e-3)
    assert abs(u_next[0].item()) == pytest.approx(1.0, abs=1e-3)
    np.testing.assert_allclose(normalized.numpy(), (w / 3.0).numpy(), atol=1e-3)


@given(seed=st.integers(0, 10_000), rows=st.integers(2, 8), cols=st.integers(2, 8))
def test_spectral_normalized_weight_has_unit_top_singular_value(seed, rows, cols):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(rows, cols, generator=g)
    u = torch.randn(rows, generator=g)
    _, _, normalized = spectral_power_iteration(w, u / u.norm(), iters=500)
    top = torch.linalg.matrix_norm(normalized, ord=2).item()
    assert 0.99 <= top <= 1.01


def test_spectral_power_iteration_needs_matching_u():
    with pytest.raises(DimensionError):
        spectral_power_iteration(torch.zeros(3, 2), torch.zeros(2))


def test_gradient_context_fills_unused_with_zeros():
    used = Parameter("used", torch.tensor([2.0, 3.0]))
    unused = Parameter("unused", torch.tensor([1.0]))
    with GradientContext([used, unused]) as ctx:
        ctx.backward((used.value ** 2).sum())
    np.testing.assert_allclose(used.gradient.numpy(), [4.0, 6.0])
    assert unused.gradient.tolist() == [0.0]


def test_gradient_context_rejects_bad_losses():
    p = Parameter("p", torch.ones(2))
    with GradientContext([p]) as ctx:
        with pytest.raises(DimensionError):
            ctx.backward(p.value * 2)
        with pytest.raises(TrainingStepError):
            ctx.backward((p.value * float("inf")).sum())


def test_adam_first_step_moves_by_learning_rate():
    p = Parameter("w", torch.tensor([1.0, -1.0, 0.5]))
    p.gradient = torch.tensor([0.3, -2.0, 1e-3])
    adam_step(p, lr=0.1, beta1=0.0, beta2=0.9)
    np.testing.assert_allclose(p.value.detach().numpy(), [0.9, -0.9, 0.4], atol=1e-4)
    assert p.step_count == 1


def test_adam_bias_correction_over_constant_gradient():
    p = Parameter("w", torch.zeros(1))
    for _ in range(5):
        p.gradient = torch.tensor([2.0])
        adam_step(p, lr=0.01, beta1=0.9, beta2=0.999)
    assert p.value.item() == pytest.approx(-0.05, abs=1e-5)
    assert p.step_count == 5


def test_adam_rejects_non_finite_gradient():
    p = Parameter("cell0.conv.weight", torch.zeros(2))
    p.gradient = torch.tensor([float("nan"), 0.0])
    with pytest.raises(OptimizerError) as info:
        adam_step(p, lr=0.1, beta1=0.0, beta2=0.9)
    assert info.value.parameter_name == "cell0.conv.weight"


def test_parameter_checksum_tracks_values():
    a = {"x": Parameter("x", torch.ones(3))}
    b = {"x": Parameter("x", torch.ones(3))}
    assert parameter_checksum(a) == parameter_checksum(b)
    with torch.no_grad():
        b["x"].value[0] += 1e-3
    assert parameter_checksum(a) != parameter_checksum(b)
