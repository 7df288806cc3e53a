"""
Functional neural ops
Dense / grouped / depthwise / dilated 3D convolution, batch normalization,
activations, x2 upsampling and softmax, each with its backward rule

Convolution is cross-correlation (no kernel flip) with zero padding.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from utils.errors import ArgumentError, ShapeError
from utils.tensor import _result, costs_enabled, emit_cost

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.01

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _triple(value):
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ArgumentError(f"expected 3 values, got {value}")
    return value


@dataclass(frozen=True)
class Conv3dSpec:
    """Geometry of a 3D convolution"""
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    dilation: tuple = (1, 1, 1)
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for field in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, field, _triple(getattr(self, field)))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ArgumentError(f"channels and groups must be positive: {self}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ArgumentError(f"illegal kernel geometry: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"channels {self.in_channels}->{self.out_channels} not divisible by groups {self.groups}")

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3, dilation=1, groups=1, has_bias=True):
        """Stride-1 spec whose padding keeps the spatial extents"""
        kernel, dilation = _triple(kernel), _triple(dilation)
        padding = tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))
        return cls(in_channels, out_channels, kernel, 1, padding, dilation, groups, has_bias)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def output_extents(self, extents):
        """
        Output spatial extents for the given input extents

        Raises:
            ShapeError: if any output extent is below 1
        """
        out = tuple(
            (n + 2 * p - d * (k - 1) - 1) // s + 1
            for n, k, s, p, d in zip(extents, self.kernel, self.stride, self.padding, self.dilation)
        )
        if min(out) < 1:
            raise ShapeError(f"input extents {tuple(extents)} too small for {self}: output {out}")
        return out


def _window(xp, offset, spec, out_sp):
    """View of the padded input read by one kernel tap, shape (b, C, oS, oH, oW)"""
    slices = [slice(None), slice(None)]
    for o, d, s, n in zip(offset, spec.dilation, spec.stride, out_sp):
        start = o * d
        slices.append(slice(start, start + s * (n - 1) + 1, s))
    return xp[tuple(slices)]


def conv3d(x, weight, bias, spec):
    """
    3D cross-correlation

    Args:
        x: Tensor (b, in_channels, S, H, W)
        weight: Tensor (out, in/groups, kS, kH, kW)
        bias: Tensor (out,) or None
        spec: Conv3dSpec

    Returns:
        Tensor (b, out_channels, S', H', W')

    Raises:
        ShapeError: on channel / weight mismatch or empty output
    """
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d expects (b, {spec.in_channels}, S, H, W), got {x.shape}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv3d weight shape {weight.shape} != {spec.weight_shape}")
    if (bias is not None) != spec.has_bias or (bias is not None and bias.shape != (spec.out_channels,)):
        raise ShapeError(f"conv3d bias does not match {spec}")

    b = x.shape[0]
    out_sp = spec.output_extents(x.shape[2:])
    out_shape = (b, spec.out_channels) + out_sp
    parents = (x, weight) + ((bias,) if bias is not None else ())
    if costs_enabled():
        params = weight.size + (bias.size if bias is not None else 0)
        emit_cost("conv3d", params=params, macs=count_macs(spec, out_shape), shape=out_shape)
    if x.is_meta:
        return _result(None, parents, None, "conv3d", shape=out_shape)

    g_count = spec.groups
    cin_g = spec.in_channels // g_count
    cout_g = spec.out_channels // g_count
    pad = [(0, 0), (0, 0)] + [(p, p) for p in spec.padding]
    xp = np.pad(x.data, pad) if any(spec.padding) else x.data
    wg = weight.data.reshape((g_count, cout_g, cin_g) + spec.kernel)
    taps = list(itertools.product(*(range(k) for k in spec.kernel)))
    elementwise_taps = cin_g == 1 and cout_g == 1

    out = np.zeros((b, g_count, cout_g) + out_sp, dtype=x.dtype)
    for tap in taps:
        win = _window(xp, tap, spec, out_sp)
        win = win.reshape((b, g_count, cin_g) + out_sp)
        w_tap = wg[(Ellipsis,) + tap]
        if elementwise_taps:
            out += w_tap.reshape(1, g_count, 1, 1, 1, 1) * win
        else:
            out += np.einsum("goi,bgi...->bgo...", w_tap, win, optimize=True)
    out = out.reshape(out_shape)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(grad):
        gg = grad.reshape((b, g_count, cout_g) + out_sp)
        grad_xp = np.zeros((b, g_count, cin_g) + xp.shape[2:], dtype=x.dtype)
        grad_w = np.zeros_like(wg)
        flat_grad_xp = grad_xp.reshape((b, g_count * cin_g) + xp.shape[2:])
        for tap in taps:
            win = _window(xp, tap, spec, out_sp)
            win = win.reshape((b, g_count, cin_g) + out_sp)
            w_tap = wg[(Ellipsis,) + tap]
            target = _window(flat_grad_xp, tap, spec, out_sp)
            if elementwise_taps:
                grad_w[(Ellipsis,) + tap] = np.sum(gg * win, axis=(0, 3, 4, 5)).reshape(g_count, 1, 1)
                target += (w_tap.reshape(1, g_count, 1, 1, 1, 1) * gg).reshape(target.shape)
            else:
                grad_w[(Ellipsis,) + tap] = np.einsum("bgo...,bgi...->goi", gg, win, optimize=True)
                target += np.einsum("goi,bgo...->bgi...", w_tap, gg, optimize=True).reshape(target.shape)
        grad_x = flat_grad_xp
        if any(spec.padding):
            core = tuple(slice(p, p + n) for p, n in zip(spec.padding, x.shape[2:]))
            grad_x = flat_grad_xp[(slice(None), slice(None)) + core]
        grads = [np.ascontiguousarray(grad_x), grad_w.reshape(spec.weight_shape)]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _result(out, parents, backward, "conv3d")


def count_macs(spec, out_shape):
    """Multiply-accumulates of one convolution producing out_shape (batch included)"""
    b, _, s, h, w = out_shape
    k_volume = spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
    return b * s * h * w * spec.out_channels * (spec.in_channels // spec.groups) * k_volume


def batchnorm3d(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """
    Batch normalization over (b, S, H, W) per channel

    In training mode the batch statistics normalize the input and the running
    statistics (NumPy arrays) are updated in place with the unbiased variance;
    in eval mode the running statistics are used and left untouched.

    Args:
        x: Tensor (b, C, S, H, W)
        gamma, beta: Tensors (C,)
        running_mean, running_var: arrays (C,)
        training: bool

    Returns:
        Tensor of the same shape as x
    """
    if x.ndim != 5 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm3d expects (b, {gamma.shape[0]}, S, H, W), got {x.shape}")
    if costs_enabled():
        emit_cost("batchnorm3d", params=gamma.size + beta.size, elementwise=2 * x.size, shape=x.shape)
    if x.is_meta:
        return _result(None, (x, gamma, beta), None, "batchnorm3d", shape=x.shape)

    axes = (0, 2, 3, 4)
    count = x.size // x.shape[1]
    shape = (1, -1, 1, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = x_hat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(grad):
        grad_gamma = np.sum(grad * x_hat, axis=axes)
        grad_beta = np.sum(grad, axis=axes)
        g_hat = grad * gamma.data.reshape(shape)
        if training:
            grad_x = (inv_std.reshape(shape) / count) * (
                count * g_hat
                - np.sum(g_hat, axis=axes).reshape(shape)
                - x_hat * np.sum(g_hat * x_hat, axis=axes).reshape(shape)
            )
        else:
            grad_x = g_hat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm3d")


def gelu(x):
    """GELU with the exact Gaussian CDF: x * Phi(x)"""
    if costs_enabled():
        emit_cost("gelu", elementwise=x.size, shape=x.shape)
    if x.is_meta:
        return _result(None, (x,), None, "gelu", shape=x.shape)
    cdf = ndtr(x.data)
    out = x.data * cdf

    def backward(grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (grad * (cdf + x.data * pdf),)
    return _result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def leaky_relu(x, alpha=LEAKY_SLOPE):
    if costs_enabled():
        emit_cost("leaky_relu", elementwise=x.size, shape=x.shape)
    if x.is_meta:
        return _result(None, (x,), None, "leaky_relu", shape=x.shape)
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    out = x.data * slope

    def backward(grad):
        return (grad * slope,)
    return _result(out, (x,), backward, "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


def activation(kind, x, alpha=LEAKY_SLOPE):
    """Dispatch on 'gelu', 'leaky_relu' or 'relu'"""
    if kind == "gelu":
        return gelu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "relu":
        return relu(x)
    raise ArgumentError(f"unknown activation '{kind}'")


def _linear_up(a, axis):
    """x2 linear interpolation along one axis, align_corners=False"""
    n = a.shape[axis]
    first = np.take(a, [0], axis=axis)
    last = np.take(a, [n - 1], axis=axis)
    prev = np.concatenate([first, np.take(a, range(n - 1), axis=axis)], axis=axis)
    nxt = np.concatenate([np.take(a, range(1, n), axis=axis), last], axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _linear_up_adjoint(g, axis):
    """Transpose of _linear_up"""
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    pairs = g.reshape(shape)
    ge = np.take(pairs, 0, axis=axis + 1)
    go = np.take(pairs, 1, axis=axis + 1)
    out = 0.75 * (ge + go)

    def sl(start, stop):
        index = [slice(None)] * out.ndim
        index[axis] = slice(start, stop)
        return tuple(index)

    out[sl(0, n - 1)] += 0.25 * ge[sl(1, n)]
    out[sl(0, 1)] += 0.25 * ge[sl(0, 1)]
    out[sl(1, n)] += 0.25 * go[sl(0, n - 1)]
    out[sl(n - 1, n)] += 0.25 * go[sl(n - 1, n)]
    return out


def upsample2x(x, mode="trilinear"):
    """
    Double every spatial extent

    nearest replicates each voxel into a 2x2x2 block; trilinear uses the
    align_corners=False convention with edge clamping.
    """
    if mode not in ("trilinear", "nearest"):
        raise ArgumentError(f"unknown upsample mode '{mode}'")
    if x.ndim != 5 or min(x.shape[2:]) < 1:
        raise ShapeError(f"upsample2x expects (b, C, S, H, W) with positive extents, got {x.shape}")
    b, c, s, h, w = x.shape
    out_shape = (b, c, 2 * s, 2 * h, 2 * w)
    if costs_enabled():
        emit_cost(f"upsample_{mode}", elementwise=b * c * 8 * s * h * w, shape=out_shape)
    if x.is_meta:
        return _result(None, (x,), None, "upsample2x", shape=out_shape)

    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

        def backward(grad):
            return (grad.reshape(b, c, s, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)
    else:
        out = x.data
        for axis in (2, 3, 4):
            out = _linear_up(out, axis)

        def backward(grad):
            g = grad
            for axis in (4, 3, 2):
                g = _linear_up_adjoint(g, axis)
            return (g,)
    return _result(out.astype(x.dtype, copy=False), (x,), backward, "upsample2x")


def softmax(x, axis=-1, temperature=1.0):
    """
    Softmax of x / temperature along one axis, max-subtracted for stability

    Raises:
        ArgumentError: if temperature <= 0
    """
    if not temperature > 0:
        raise ArgumentError(f"softmax temperature must be positive, got {temperature}")
    if x.is_meta:
        return _result(None, (x,), None, "softmax", shape=x.shape)
    scaled = x.data / x.dtype.type(temperature)
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        inner = np.sum(grad * p, axis=axis, keepdims=True)
        return (p * (grad - inner) / x.dtype.type(temperature),)
    return _result(p, (x,), backward, "softmax")
