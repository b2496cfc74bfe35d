import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_error
from eyelearn.pconv import PartialConv2d, dense_conv2d, mask_update, partial_conv2d, pconv_backward, pconv_forward


def test_hand_worked_window():
    x = torch.arange(1.0, 10.0).view(1, 1, 3, 3)
    mask = torch.tensor([[1.0, 1, 0], [1, 1, 0], [0, 0, 0]]).view(1, 1, 3, 3)
    w = torch.ones(1, 1, 3, 3)
    out, new_mask = pconv_forward(x, mask, w, torch.zeros(1), padding=0)
    # (1 + 2 + 4 + 5) * 9 / 4
    assert out.item() == 27.0
    assert new_mask.item() == 1.0


def test_empty_window_is_zero_and_invalid():
    x = torch.randn(1, 2, 5, 5)
    mask = torch.zeros(1, 1, 5, 5)
    out, new_mask = pconv_forward(x, mask, torch.randn(3, 2, 3, 3), torch.randn(3))
    assert torch.all(out == 0) and torch.all(new_mask == 0)


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-6), (torch.float64, 1e-12)])
@pytest.mark.parametrize("stride", [1, 2])
def test_full_mask_matches_dense_conv(dtype, tol, stride):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 12, 12, generator=g, dtype=dtype)
    w = torch.randn(4, 3, 3, 3, generator=g, dtype=dtype)
    b = torch.randn(4, generator=g, dtype=dtype)
    ones = torch.ones(2, 1, 12, 12, dtype=dtype)
    # no padding: every window lies inside the image so the ratio is exactly 1
    out, _ = pconv_forward(x, ones, w, b, stride, padding=0)
    assert (out - dense_conv2d(x, w, b, stride, padding=0)).abs().max() <= tol
    # same padding: identical away from the zero-padded border
    out, _ = pconv_forward(x, ones, w, b, stride)
    ref = dense_conv2d(x, w, b, stride)
    assert (out - ref)[..., 1:-1, 1:-1].abs().max() <= tol


def test_invalid_values_are_inert():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    mask = (torch.rand(1, 1, 8, 8, generator=g) > 0.4).double()
    w = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64)
    b = torch.randn(3, generator=g, dtype=torch.float64)
    x2 = x + (1 - mask) * 1e3 * torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    up = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    o1, _ = pconv_forward(x, mask, w, b)
    o2, _ = pconv_forward(x2, mask, w, b)
    assert (o1 - o2).abs().max().item() == 0.0
    g1 = pconv_backward(x, mask, w, b, up)
    g2 = pconv_backward(x2, mask, w, b, up)
    for a, c in zip(g1, g2):
        assert (a - c).abs().max().item() == 0.0


def test_per_channel_masks():
    x = torch.ones(1, 2, 3, 3)
    mask = torch.zeros(1, 2, 3, 3)
    mask[0, 0] = 1.0  # first channel fully valid, second fully invalid
    w = torch.ones(1, 2, 3, 3)
    out, m = pconv_forward(x, mask, w, None, padding=0)
    # 9 valid of 18 entries: sum 9 scaled by 18/9
    assert out.item() == 18.0 and m.item() == 1.0


def test_rejects_non_binary_mask():
    with pytest.raises(ValueError):
        pconv_forward(torch.ones(1, 1, 4, 4), torch.full((1, 1, 4, 4), 0.5), torch.ones(1, 1, 3, 3), None)


def test_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        pconv_forward(torch.ones(1, 2, 4, 4), torch.ones(1, 1, 4, 4), torch.ones(1, 3, 3, 3), None)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(stride, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
    mask = (torch.rand(1, 1, 8, 8, generator=g) > 0.3).double()
    w = torch.randn(2, 1, 3, 3, generator=g, dtype=torch.float64)
    b = torch.randn(2, generator=g, dtype=torch.float64)
    out, _ = pconv_forward(x, mask, w, b, stride)
    up = torch.randn(out.shape, generator=g, dtype=torch.float64)

    def loss():
        return (pconv_forward(x, mask, w, b, stride)[0] * up).sum()

    gi, gw, gb = pconv_backward(x, mask, w, b, up, stride)
    assert rel_error(gi, central_difference(loss, x)) <= 1e-4
    assert rel_error(gw, central_difference(loss, w)) <= 1e-4
    assert rel_error(gb, central_difference(loss, b)) <= 1e-4
    assert torch.all(gi[mask.expand_as(gi) == 0] == 0)


def test_zero_upstream_gives_zero_gradients():
    x = torch.randn(1, 2, 6, 6)
    mask = torch.ones(1, 1, 6, 6)
    w, b = torch.randn(3, 2, 3, 3), torch.randn(3)
    grads = pconv_backward(x, mask, w, b, torch.zeros(1, 3, 6, 6))
    assert all(torch.all(t == 0) for t in grads)


def test_full_mask_gradients_equal_dense():
    g = torch.Generator().manual_seed(4)
    x = torch.randn(2, 3, 7, 7, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, generator=g, dtype=torch.float64, requires_grad=True)
    up = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)
    F.conv2d(x, w, b).backward(up)
    gi, gw, gb = pconv_backward(x.detach(), torch.ones(2, 1, 7, 7, dtype=torch.float64), w.detach(), b.detach(), up, padding=0)
    assert (gi - x.grad).abs().max() <= 1e-12
    assert (gw - w.grad).abs().max() <= 1e-12
    assert (gb - b.grad).abs().max() <= 1e-12


def test_autograd_function_uses_manual_backward():
    g = torch.Generator().manual_seed(5)
    x = torch.randn(1, 2, 6, 6, generator=g, dtype=torch.float64, requires_grad=True)
    mask = (torch.rand(1, 1, 6, 6, generator=g) > 0.5).double()
    w = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(3, generator=g, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x, w, b: partial_conv2d(x, mask, w, b)[0], (x, w, b))


def test_module_wraps_function():
    layer = PartialConv2d(1, 4, 5, stride=2)
    out, m = layer(torch.rand(2, 1, 16, 16), torch.ones(2, 1, 16, 16))
    assert out.shape == (2, 4, 8, 8) and m.shape == (2, 1, 8, 8)
    with pytest.raises(ValueError):
        PartialConv2d(1, 1, 4)


def test_mask_update_examples():
    full = torch.ones(1, 1, 6, 6)
    assert torch.equal(mask_update(full, 3), full)
    zero = torch.zeros(1, 1, 6, 6)
    assert torch.equal(mask_update(zero, 3), zero)
    single = torch.zeros(1, 1, 7, 7)
    single[0, 0, 3, 3] = 1
    out = mask_update(single, 3)
    expected = torch.zeros(1, 1, 7, 7)
    expected[0, 0, 2:5, 2:5] = 1
    assert torch.equal(out, expected)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.sampled_from([1, 3, 5, 7]), p=st.floats(0.0, 1.0))
def test_mask_update_is_dilation_superset(seed, k, p):
    rng = np.random.default_rng(seed)
    mask = torch.from_numpy((rng.random((1, 1, 12, 12)) < p).astype(np.float32))
    out = mask_update(mask, k)
    assert torch.all(out >= mask)
    ref = F.max_pool2d(mask, k, stride=1, padding=k // 2)
    assert torch.equal(out, ref)
