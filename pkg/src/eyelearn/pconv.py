"""Partial convolution with mask propagation.

For every output location the convolution only sees valid inputs and is
re-weighted by ``window_size / valid_count``, where ``window_size`` counts the
whole window across input channels (``k * k * C_in``). Output locations whose
window holds no valid input are exactly zero and become invalid in the
propagated mask.

Masks are ``(B, 1, H, W)`` (shared by all channels) or ``(B, C_in, H, W)``
(per channel, as produced by concatenating feature maps with different masks).
The mask and the re-weighting ratio are constants for differentiation.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.grad import conv2d_input, conv2d_weight


def _check_mask(mask: torch.Tensor, in_channels: int) -> None:
    if mask.dim() != 4 or mask.shape[1] not in (1, in_channels):
        raise ValueError(f"mask must be (B, 1|{in_channels}, H, W), got {tuple(mask.shape)}")
    if bool(((mask != 0) & (mask != 1)).any()):
        raise ValueError("mask must be binary")


def valid_counts(mask: torch.Tensor, in_channels: int, kernel_size: int, stride: int, padding: int) -> torch.Tensor:
    """Number of valid (channel, pixel) entries under every output window, shape (B, 1, H', W')."""
    ones = torch.ones(1, mask.shape[1], kernel_size, kernel_size, dtype=mask.dtype, device=mask.device)
    counts = F.conv2d(mask, ones, stride=stride, padding=padding)
    if mask.shape[1] == 1:
        counts = counts * in_channels
    return counts


def mask_update(mask: torch.Tensor, kernel_size: int, stride: int = 1, padding: int | None = None) -> torch.Tensor:
    """Output mask: 1 where the window contains at least one valid input."""
    if padding is None:
        padding = kernel_size // 2
    counts = valid_counts(mask, 1, kernel_size, stride, padding)
    return (counts > 0).to(mask.dtype)


def _ratio_and_mask(mask, in_channels, kernel_size, stride, padding):
    counts = valid_counts(mask, in_channels, kernel_size, stride, padding)
    new_mask = (counts > 0).to(mask.dtype)
    window = kernel_size * kernel_size * in_channels
    ratio = torch.where(counts > 0, window / counts.clamp(min=1.0), torch.zeros_like(counts))
    return ratio, new_mask


def pconv_forward(
    x: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None,
    stride: int = 1,
    padding: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Plain (non-autograd) partial convolution. Returns ``(features, new_mask)``."""
    out_ch, in_ch, k, _ = weight.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"expected {in_ch} input channels, got {x.shape[1]}")
    _check_mask(mask, in_ch)
    if padding is None:
        padding = k // 2
    ratio, new_mask = _ratio_and_mask(mask, in_ch, k, stride, padding)
    raw = F.conv2d(x * mask, weight, None, stride, padding)
    out = raw * ratio
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out * new_mask, new_mask


def pconv_backward(
    x: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None,
    grad_out: torch.Tensor,
    stride: int = 1,
    padding: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Gradients of :func:`pconv_forward` w.r.t. input features, weights and bias."""
    out_ch, in_ch, k, _ = weight.shape
    if padding is None:
        padding = k // 2
    ratio, new_mask = _ratio_and_mask(mask, in_ch, k, stride, padding)
    if grad_out.shape != (x.shape[0], out_ch, *new_mask.shape[-2:]):
        raise ValueError(f"upstream gradient has shape {tuple(grad_out.shape)}")
    g = grad_out * new_mask
    grad_bias = g.sum(dim=(0, 2, 3)) if bias is not None else None
    g = g * ratio
    xm = x * mask
    grad_weight = conv2d_weight(xm, weight.shape, g, stride=stride, padding=padding)
    grad_input = conv2d_input(x.shape, weight, g, stride=stride, padding=padding) * mask
    return grad_input, grad_weight, grad_bias


class _PartialConvFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mask, weight, bias, stride, padding):
        out, new_mask = pconv_forward(x, mask, weight, bias, stride, padding)
        ctx.save_for_backward(x, mask, weight, bias)
        ctx.stride, ctx.padding = stride, padding
        ctx.mark_non_differentiable(new_mask)
        return out, new_mask

    @staticmethod
    def backward(ctx, grad_out, _grad_mask):
        x, mask, weight, bias = ctx.saved_tensors
        gi, gw, gb = pconv_backward(x, mask, weight, bias, grad_out.contiguous(), ctx.stride, ctx.padding)
        return gi, None, gw, gb, None, None


def partial_conv2d(x, mask, weight, bias=None, stride=1, padding=None):
    """Differentiable partial convolution using the hand-written backward pass."""
    if padding is None:
        padding = weight.shape[-1] // 2
    return _PartialConvFn.apply(x, mask, weight, bias, stride, padding)


class PartialConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_normal_(self.weight, a=0.0, mode="fan_in")

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return partial_conv2d(x, mask, self.weight, self.bias, self.stride, self.padding)

    def extra_repr(self) -> str:
        return f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, stride={self.stride}"


def dense_conv2d(x, weight, bias=None, stride=1, padding=None):
    """Ordinary convolution with the same geometry, for equivalence checks."""
    if padding is None:
        padding = weight.shape[-1] // 2
    return F.conv2d(x, weight, bias, stride, padding)


def output_size(size: int, kernel_size: int, stride: int) -> int:
    return math.floor((size + 2 * (kernel_size // 2) - kernel_size) / stride) + 1
