"""Minimal dense numeric layer: masked 2-D convolutions, backprop, SGD.

Arrays are numpy, channels-last: inputs are (H, W, C) or batched (B, H, W, C).
Convolutions are stride 1 with zero same-padding, so spatial dims are
preserved for any input size; that is what lets one trained model run on any
road-section length and time horizon.

The convolution core iterates over kernel offsets, accumulating one GEMM per
offset into the output. Offsets whose causality-mask bit is 0 are skipped
outright: the layer invariant keeps those weights exactly zero, so skipping
is exact and the cone masks also cut compute. Gradients at masked positions
are forced to zero, which together with plain SGD keeps masked weights at
hard zero through any amount of training.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import blas as _blas
from scipy.special import expit

from .anisotropy import CausalityMask, count_active

_GEMM = {np.dtype(np.float32): _blas.sgemm, np.dtype(np.float64): _blas.dgemm}


class Activation(enum.Enum):
    NONE = 0
    RELU = 1
    SIGMOID = 2


@dataclass
class ConvLayer:
    """One convolution layer; weights (kh, kw, c_in, c_out), bias (c_out,)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.NONE
    mask: CausalityMask | None = None

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4:
            raise ValueError(f"weights must be 4-D (kh, kw, c_in, c_out), got {w.shape}")
        if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {w.shape[:2]}")
        if b.shape != (w.shape[3],):
            raise ValueError(f"bias shape {b.shape} != ({w.shape[3]},)")
        if self.mask is not None:
            if (self.mask.kh, self.mask.kw) != w.shape[:2]:
                raise ValueError("mask dims do not match kernel dims")
            if w[self.mask.bits == 0].any():
                raise ValueError("weights at masked-out positions must be exactly 0")
        self.weights = np.ascontiguousarray(w)
        self.bias = np.ascontiguousarray(b)

    @property
    def kh(self) -> int:
        return self.weights.shape[0]

    @property
    def kw(self) -> int:
        return self.weights.shape[1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[3]

    @property
    def dtype(self):
        return self.weights.dtype

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weights.astype(dtype), self.bias.astype(dtype),
                         self.activation, self.mask)


@dataclass
class DualBranchLayer:
    """Two masked convolutions (free-flow / congested cones), outputs concatenated."""

    free: ConvLayer
    cong: ConvLayer

    def __post_init__(self):
        if self.free.c_in != self.cong.c_in:
            raise ValueError("branches must share c_in")

    @property
    def c_in(self) -> int:
        return self.free.c_in

    @property
    def c_out(self) -> int:
        return self.free.c_out + self.cong.c_out

    @property
    def dtype(self):
        return self.free.dtype

    def astype(self, dtype) -> "DualBranchLayer":
        return DualBranchLayer(self.free.astype(dtype), self.cong.astype(dtype))


Layer = ConvLayer | DualBranchLayer


def init_layer(kh: int, kw: int, c_in: int, c_out: int, *,
               mask: CausalityMask | None = None,
               activation: Activation = Activation.NONE,
               seed: int = 0, init_scale: float = 1.0,
               dtype=np.float32) -> ConvLayer:
    """Uniform(-s, s) init with s = init_scale * sqrt(6 / (fan_in + fan_out)).

    Fan counts use only unmasked kernel positions, keeping activation variance
    comparable between cone-masked and isotropic layers. Bias starts at zero.
    """
    active = count_active(mask) if mask is not None else kh * kw
    fan_in = active * c_in
    fan_out = active * c_out
    s = init_scale * np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    w = rng.uniform(-s, s, size=(kh, kw, c_in, c_out))
    if mask is not None:
        w[mask.bits == 0] = 0.0
    return ConvLayer(w.astype(dtype), np.zeros(c_out, dtype=dtype),
                     activation=activation, mask=mask)


# ---------------------------------------------------------------------------
# convolution core
# ---------------------------------------------------------------------------

def _accum_gemm(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """c += a @ b for 2-D arrays with a and c C-contiguous."""
    gemm = _GEMM.get(a.dtype)
    if gemm is not None and a.dtype == b.dtype == c.dtype:
        # work in the transposed space so BLAS sees Fortran order in place
        gemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)
    else:
        c += a @ b


def _pad(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, H, W, C = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((B, H + kh - 1, W + kw - 1, C), dtype=x.dtype)
    xp[:, ph:ph + H, pw:pw + W] = x
    return xp


def _same_corr(x: np.ndarray, weights: np.ndarray, bias, bits) -> np.ndarray:
    """Stride-1 zero-same-padded correlation of (B,H,W,Cin) with (kh,kw,Cin,Cout)."""
    B, H, W, _ = x.shape
    kh, kw, _, c_out = weights.shape
    out = np.zeros((B, H, W, c_out), dtype=x.dtype)
    if bias is not None:
        out += bias
    xp = _pad(x, kh, kw)
    buf = np.empty(x.shape, dtype=x.dtype)
    out2 = out.reshape(-1, c_out)
    buf2 = buf.reshape(-1, x.shape[3])
    for ki in range(kh):
        for kj in range(kw):
            if bits is not None and not bits[ki, kj]:
                continue
            np.copyto(buf, xp[:, ki:ki + H, kj:kj + W])
            _accum_gemm(buf2, weights[ki, kj], out2)
    return out


def _grad_weights(x: np.ndarray, g: np.ndarray, kh: int, kw: int, bits) -> np.ndarray:
    B, H, W, c_in = x.shape
    c_out = g.shape[3]
    gw = np.zeros((kh, kw, c_in, c_out), dtype=x.dtype)
    xp = _pad(x, kh, kw)
    buf = np.empty(x.shape, dtype=x.dtype)
    g2 = np.ascontiguousarray(g).reshape(-1, c_out)
    buf2 = buf.reshape(-1, c_in)
    for ki in range(kh):
        for kj in range(kw):
            if bits is not None and not bits[ki, kj]:
                continue  # gradient gated to zero at masked positions
            np.copyto(buf, xp[:, ki:ki + H, kj:kj + W])
            np.matmul(buf2.T, g2, out=gw[ki, kj])
    return gw


def _apply_activation(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0, out=z)
    if act is Activation.SIGMOID:
        return expit(z, out=z)
    return z


def _activation_grad(y: np.ndarray, act: Activation):
    """Derivative of the activation written in terms of its output y."""
    if act is Activation.RELU:
        return (y > 0).astype(y.dtype)
    if act is Activation.SIGMOID:
        return y * (1.0 - y)
    return None


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"input must be (H, W, C) or (B, H, W, C), got shape {x.shape}")


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Forward pass: same-padded correlation, bias, then activation."""
    xb, squeeze = _as_batch(x)
    if xb.shape[3] != layer.c_in:
        raise ValueError(f"input has {xb.shape[3]} channels, layer expects {layer.c_in}")
    xb = xb.astype(layer.dtype, copy=False)
    bits = layer.mask.bits if layer.mask is not None else None
    out = _apply_activation(_same_corr(xb, layer.weights, layer.bias, bits),
                            layer.activation)
    return out[0] if squeeze else out


def conv_backward(grad_out: np.ndarray, x: np.ndarray, layer: ConvLayer,
                  output: np.ndarray | None = None, need_input: bool = True):
    """Exact gradients of conv_forward at cached input x.

    Returns (grad_input, grad_weights, grad_bias). grad_weights is zero at
    masked positions. The layer output may be passed to skip recomputing it
    for the activation derivative; need_input=False skips the input gradient
    (returned as None) when the layer sits at the bottom of a stack.
    """
    gb_, squeeze = _as_batch(grad_out)
    xb, _ = _as_batch(x)
    if xb.shape[:3] != gb_.shape[:3] or gb_.shape[3] != layer.c_out \
            or xb.shape[3] != layer.c_in:
        raise ValueError(
            f"shape mismatch: input {xb.shape}, grad_out {gb_.shape}, "
            f"layer {layer.c_in}->{layer.c_out}")
    xb = xb.astype(layer.dtype, copy=False)
    gb_ = gb_.astype(layer.dtype, copy=False)

    if layer.activation is not Activation.NONE:
        if output is None:
            y = conv_forward(xb, layer)
        else:
            y, _ = _as_batch(output)
        gz = np.empty_like(gb_)
        np.multiply(gb_, _activation_grad(y, layer.activation), out=gz)
    else:
        gz = gb_

    bits = layer.mask.bits if layer.mask is not None else None
    grad_input = None
    if need_input:
        # grad wrt input: correlate gz with the spatially flipped, channel-
        # swapped kernel; point symmetry of the masks means the same bits apply
        w_flip = np.ascontiguousarray(layer.weights[::-1, ::-1].transpose(0, 1, 3, 2))
        grad_input = _same_corr(gz, w_flip, None, bits)
        if squeeze:
            grad_input = grad_input[0]
    grad_w = _grad_weights(xb, gz, layer.kh, layer.kw, bits)
    grad_b = gz.sum(axis=(0, 1, 2))
    return grad_input, grad_w, grad_b


def forward(x: np.ndarray, layer: Layer) -> np.ndarray:
    """Forward through a plain or dual-branch layer."""
    if isinstance(layer, DualBranchLayer):
        return np.concatenate([conv_forward(x, layer.free),
                               conv_forward(x, layer.cong)], axis=-1)
    return conv_forward(x, layer)


def layer_params(layer: Layer) -> list[np.ndarray]:
    """Trainable arrays of a layer, in a fixed order matching backward()."""
    if isinstance(layer, DualBranchLayer):
        return [layer.free.weights, layer.free.bias,
                layer.cong.weights, layer.cong.bias]
    return [layer.weights, layer.bias]


def backward(grad_out: np.ndarray, x: np.ndarray, layer: Layer,
             output: np.ndarray | None = None, need_input: bool = True):
    """Gradients through a plain or dual-branch layer.

    Returns (grad_input, grads) with grads ordered like layer_params(layer).
    """
    if isinstance(layer, DualBranchLayer):
        nf = layer.free.c_out
        yf = yc = None
        if output is not None:
            yf, yc = output[..., :nf], output[..., nf:]
        gi_f, gw_f, gb_f = conv_backward(grad_out[..., :nf], x, layer.free, yf,
                                         need_input)
        gi_c, gw_c, gb_c = conv_backward(grad_out[..., nf:], x, layer.cong, yc,
                                         need_input)
        gi = gi_f + gi_c if need_input else None
        return gi, [gw_f, gb_f, gw_c, gb_c]
    gi, gw, gb = conv_backward(grad_out, x, layer, output, need_input)
    return gi, [gw, gb]


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], learning_rate: float):
    """In-place p <- p - lr * g. Masked weight positions stay 0 (their grads are 0)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        p -= learning_rate * np.asarray(g, dtype=p.dtype)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(layer: Layer, input_shape: tuple[int, int, int], *,
                      eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Uses L = sum(forward * R) for a fixed random R, checking every unmasked
    weight, every bias, and the input gradient. Run on float64 layers.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(input_shape)
    y0 = forward(x, layer)
    r = rng.standard_normal(y0.shape)

    def loss() -> float:
        return float(np.sum(forward(x, layer) * r))

    grad_in, grads = backward(r, x, layer)
    worst = 0.0
    for p, g in zip(layer_params(layer), grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        free = _free_param_mask(layer, p)
        for idx in np.flatnonzero(free):
            orig = flat_p[idx]
            flat_p[idx] = orig + eps
            up = loss()
            flat_p[idx] = orig - eps
            dn = loss()
            flat_p[idx] = orig
            num = (up - dn) / (2.0 * eps)
            worst = max(worst, _rel_err(num, flat_g[idx]))
    # input gradient via directional probes
    for _ in range(10):
        d = rng.standard_normal(x.shape)
        num = (float(np.sum(forward(x + eps * d, layer) * r))
               - float(np.sum(forward(x - eps * d, layer) * r))) / (2.0 * eps)
        worst = max(worst, _rel_err(num, float(np.sum(grad_in * d))))
    return worst


def _free_param_mask(layer: Layer, p: np.ndarray) -> np.ndarray:
    """Flat boolean mask of unconstrained entries of parameter array p."""
    for sub in ([layer.free, layer.cong] if isinstance(layer, DualBranchLayer)
                else [layer]):
        if p is sub.weights and sub.mask is not None:
            return np.broadcast_to(sub.mask.bits.astype(bool)[:, :, None, None],
                                   p.shape).reshape(-1)
    return np.ones(p.size, dtype=bool)


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / scale
