"""
CPU convolution kernels for small batch-1 volumes.

PyTorch only dispatches 3D convolutions to oneDNN when the input is "large"
(batch > 1 or many channels); below that it falls back to an im2col kernel
that is 5-10x slower on a single core. ``conv3d`` here always runs the
forward, input-gradient and weight-gradient passes as oneDNN forward
convolutions. float64 and non-CPU tensors go through ``F.conv3d`` unchanged.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

_mkldnn = getattr(torch.ops.aten, "mkldnn_convolution", None)
ENABLED = _mkldnn is not None and torch.backends.mkldnn.is_available()


def _mk(x, w, b, padding, stride, dilation):
    return _mkldnn(x.contiguous(), w.contiguous(), b, list(padding), list(stride),
                   list(dilation), 1)


class _Conv3dFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, stride, padding):
        ctx.save_for_backward(x, weight)
        ctx.stride, ctx.padding, ctx.has_bias = stride, padding, bias is not None
        return _mk(x, weight, bias, padding, stride, (1, 1, 1))

    @staticmethod
    def backward(ctx, grad_out):
        x, weight = ctx.saved_tensors
        stride, padding = ctx.stride, ctx.padding
        k = weight.shape[2:]
        grad_x = grad_w = grad_b = None
        if ctx.needs_input_grad[0]:
            g = grad_out
            if any(s > 1 for s in stride):
                # re-insert the skipped positions as zeros, then it is a stride-1 problem
                size = [(n - 1) * s + 1 for n, s in zip(g.shape[2:], stride)]
                dil = g.new_zeros(g.shape[:2] + tuple(size))
                dil[:, :, :: stride[0], :: stride[1], :: stride[2]] = g
                g = dil
            # high-side remainder lost to integer division in the forward pass
            extra = [xi + 2 * p - ki - (gi - 1)
                     for xi, p, ki, gi in zip(x.shape[2:], padding, k, g.shape[2:])]
            if any(extra):
                g = F.pad(g, (0, extra[2], 0, extra[1], 0, extra[0]))
            w_t = weight.flip(2, 3, 4).transpose(0, 1)
            grad_x = _mk(g, w_t, None, [ki - 1 - p for ki, p in zip(k, padding)],
                         (1, 1, 1), (1, 1, 1))
        if ctx.needs_input_grad[1]:
            # correlate input with output gradient; batch acts as the channel axis
            gw = _mk(x.transpose(0, 1), grad_out.transpose(0, 1), None, padding,
                     (1, 1, 1), stride)
            grad_w = gw[:, :, : k[0], : k[1], : k[2]].transpose(0, 1)
        if ctx.has_bias and ctx.needs_input_grad[2]:
            grad_b = grad_out.sum(dim=(0, 2, 3, 4))
        return grad_x, grad_w, grad_b, None, None


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    if ENABLED and x.dtype == torch.float32 and x.device.type == "cpu" and x.dim() == 5:
        return _Conv3dFn.apply(x, weight, bias, tuple(stride), tuple(padding))
    return F.conv3d(x, weight, bias, stride, padding)


class Conv3d(nn.Conv3d):
    """Drop-in ``nn.Conv3d`` (zero padding, no groups or dilation) using :func:`conv3d`."""

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(nn.ConvTranspose3d):
    """
    ``nn.ConvTranspose3d`` restricted to kernel == stride, written as a matmul
    followed by a voxel shuffle (the output blocks do not overlap).
    """

    def __init__(self, in_channels, out_channels, factor=2):
        super().__init__(in_channels, out_channels, factor, stride=factor)
        self.factor = factor

    def forward(self, x):
        n, c, d, h, w = x.shape
        f, co = self.factor, self.out_channels
        cols = x.permute(0, 2, 3, 4, 1).reshape(-1, c) @ self.weight.reshape(c, -1)
        out = cols.reshape(n, d, h, w, co, f, f, f).permute(0, 4, 1, 5, 2, 6, 3, 7)
        out = out.reshape(n, co, d * f, h * f, w * f)
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1, 1)
        return out
