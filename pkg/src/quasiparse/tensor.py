"""Dense numeric kernels for the matching network.

Feature maps are plain numpy arrays in ``[channels, height, width]`` layout,
or ``[batch, channels, height, width]`` when batched.  Convolutions are
computed by lowering each input window onto a row of a matrix (im2col) and
multiplying against the flattened filter bank; the backward pass reverses the
same lowering, which keeps forward and backward numerics consistent enough
for tight finite-difference checks.

Precision is a process-global mode rather than a per-array property: training
runs in 32-bit floats, gradient checking in 64-bit.  `precision` switches the
dtype used by parameter constructors; existing arrays are never converted
behind the caller's back.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, TrainingError

_ACTIVE_DTYPE = np.dtype(np.float32)

_DTYPES = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}


def active_dtype() -> np.dtype:
    """Dtype new parameters and network inputs are created with."""
    return _ACTIVE_DTYPE


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global precision mode ("float32" or "float64")."""
    global _ACTIVE_DTYPE
    if name not in _DTYPES:
        raise ConfigurationError(f"unknown precision mode {name!r}")
    previous = _ACTIVE_DTYPE
    _ACTIVE_DTYPE = _DTYPES[name]
    try:
        yield
    finally:
        _ACTIVE_DTYPE = previous


def assert_finite(name: str, array: np.ndarray) -> None:
    """Raise NumericError if `array` contains NaN or Inf.

    Finiteness is enforced at operation boundaries that matter (losses,
    gradients, parameter updates) instead of after every kernel call.
    """
    if not np.isfinite(array).all():
        raise NumericError(f"non-finite values in {name}")


@dataclass
class ConvLayer:
    """One convolution layer: filters [out_maps, in_maps, k, k] plus bias.

    The matching network itself always uses stride 2 (that constraint lives in
    the model configuration); this layer type accepts any stride >= 1 so that
    small hand-checked cases can use stride 1.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise ConfigurationError("conv weights must be [out, in, k, k]")
        out_maps, _, kh, kw = self.weights.shape
        if kh != kw:
            raise ConfigurationError("conv kernels must be square")
        if self.bias.shape != (out_maps,):
            raise ConfigurationError("conv bias must have one entry per output map")
        if self.stride < 1:
            raise ConfigurationError("conv stride must be >= 1")
        if self.padding < 0:
            raise ConfigurationError("conv padding must be >= 0")

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def in_maps(self) -> int:
        return self.weights.shape[1]

    @property
    def out_maps(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def initialized(
        cls,
        rng: np.random.Generator,
        out_maps: int,
        in_maps: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
    ) -> "ConvLayer":
        """Uniform init with ReLU gain (He), bound sqrt(6/fan-in); biases start at zero."""
        bound = np.sqrt(6.0 / (in_maps * kernel * kernel))
        weights = rng.uniform(-bound, bound, size=(out_maps, in_maps, kernel, kernel))
        dtype = active_dtype()
        return cls(
            weights=weights.astype(dtype),
            bias=np.zeros(out_maps, dtype=dtype),
            stride=stride,
            padding=padding,
        )


@dataclass
class FcLayer:
    """Fully connected layer: weights [out_dim, in_dim] plus bias [out_dim]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ConfigurationError("fc weights must be [out, in]")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError("fc bias must have one entry per output unit")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def initialized(
        cls, rng: np.random.Generator, out_dim: int, in_dim: int, gain: float = 1.0
    ) -> "FcLayer":
        bound = gain / np.sqrt(in_dim)
        weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        dtype = active_dtype()
        return cls(weights=weights.astype(dtype), bias=np.zeros(out_dim, dtype=dtype))


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    """Spatial output size: floor((dim + 2*padding - kernel)/stride) + 1."""
    ph, pw = h + 2 * padding, w + 2 * padding
    if ph < kernel or pw < kernel:
        raise ConfigurationError(
            f"input {h}x{w} with padding {padding} is smaller than kernel {kernel}"
        )
    return (ph - kernel) // stride + 1, (pw - kernel) // stride + 1


def _lower_windows(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, int, int]:
    """im2col: return (rows [n*oh*ow, c*k*k], oh, ow) for batched input x."""
    n, c, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    oh, ow = conv_output_hw(h, w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(
    x: np.ndarray, layer: ConvLayer, _cols_out: list | None = None
) -> np.ndarray:
    """Cross-correlate `x` with the layer's filters and add the bias.

    Accepts [c, h, w] or [n, c, h, w]; returns the matching rank.  If
    `_cols_out` is given, the lowered window matrix is appended to it so a
    caller can reuse it in the backward pass.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ConfigurationError("conv input must be [c,h,w] or [n,c,h,w]")
    n, c = x.shape[0], x.shape[1]
    if c != layer.in_maps:
        raise ConfigurationError(
            f"conv input has {c} channels, layer expects {layer.in_maps}"
        )
    cols, oh, ow = _lower_windows(x, layer)
    if _cols_out is not None:
        _cols_out.append(cols)
    flat = cols @ layer.weights.reshape(layer.out_maps, -1).T + layer.bias
    out = flat.reshape(n, oh, ow, layer.out_maps).transpose(0, 3, 1, 2)
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray,
    layer: ConvLayer,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv2d_forward.

    Returns (grad_input, grad_weights, grad_bias).  `cols` may carry the
    lowered windows captured during the forward pass; otherwise they are
    recomputed.  grad_input is None when `need_input_grad` is False (used for
    the first layer, whose inputs are data).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        grad_out = grad_out[None]
    n, c, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    oh, ow = conv_output_hw(h, w, k, s, p)
    if grad_out.shape != (n, layer.out_maps, oh, ow):
        raise ConfigurationError("grad_out shape does not match conv output")
    if cols is None:
        cols, _, _ = _lower_windows(x, layer)

    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, layer.out_maps)
    grad_bias = gmat.sum(axis=0)
    grad_weights = (gmat.T @ cols).reshape(layer.weights.shape)

    grad_input = None
    if need_input_grad:
        gcols = gmat @ layer.weights.reshape(layer.out_maps, -1)
        g6 = gcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gpad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += g6[
                    :, :, i, j
                ]
        grad_input = gpad[:, :, p : p + h, p : p + w] if p else gpad
        if squeeze:
            grad_input = grad_input[0]
    return grad_input, grad_weights, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0.
    return grad_out * (pre_activation > 0)


def fc_forward(x: np.ndarray, layer: FcLayer) -> np.ndarray:
    """Affine map W x + b for [in] or [n, in] inputs."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[1] != layer.in_dim:
        raise ConfigurationError(
            f"fc input has {x.shape[1]} features, layer expects {layer.in_dim}"
        )
    out = x @ layer.weights.T + layer.bias
    return out[0] if squeeze else out


def fc_backward(
    x: np.ndarray, layer: FcLayer, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients through fc_forward: (grad_input, grad_weights, grad_bias)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
        grad_out = grad_out[None]
    grad_input = grad_out @ layer.weights
    grad_weights = grad_out.T @ x
    grad_bias = grad_out.sum(axis=0)
    return (grad_input[0] if squeeze else grad_input), grad_weights, grad_bias


@dataclass
class SgdState:
    """Momentum SGD with decoupled-from-nothing classic weight decay.

    Update per parameter: v <- momentum*v + grad + weight_decay*param, then
    param <- param - learning_rate*v.  Momentum buffers are keyed by the
    parameter name and created lazily as zeros.
    """

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: SgdState
) -> None:
    """Apply one in-place SGD update to every named parameter."""
    for name, param in params.items():
        if name not in grads:
            raise ConfigurationError(f"missing gradient for parameter {name}")
        grad = grads[name]
        if grad.shape != param.shape:
            raise ConfigurationError(f"gradient shape mismatch for parameter {name}")
        if not np.isfinite(grad).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        buf = state.momentum_buffers.get(name)
        if buf is None:
            buf = np.zeros_like(param)
            state.momentum_buffers[name] = buf
        np.multiply(buf, state.momentum, out=buf)
        buf += grad
        if state.weight_decay:
            buf += state.weight_decay * param
        param -= state.learning_rate * buf


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    epsilon: float = 1e-4,
    max_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    Perturbs up to `max_samples` randomly chosen parameter coordinates in
    place (restoring each one), evaluating `loss_fn` twice per coordinate.
    Returns the maximum relative error, |numeric - analytic| divided by
    max(|numeric|, |analytic|, floor).  Requires 64-bit parameters.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    coords: list[tuple[str, int]] = []
    for name, param in params.items():
        if param.dtype != np.float64:
            raise ConfigurationError(
                f"finite_diff_check needs float64 parameters, {name} is {param.dtype}"
            )
        if name not in grads:
            raise ConfigurationError(f"missing analytic gradient for {name}")
        coords.extend((name, i) for i in range(param.size))
    if not coords:
        raise ConfigurationError("no parameters to check")
    if len(coords) > max_samples:
        picked = rng.choice(len(coords), size=max_samples, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    floor = 1e-12
    for name, index in coords:
        flat = params[name].reshape(-1)
        saved = flat[index]
        flat[index] = saved + epsilon
        plus = loss_fn()
        flat[index] = saved - epsilon
        minus = loss_fn()
        flat[index] = saved
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"non-finite loss while perturbing {name}[{index}]")
        numeric = (plus - minus) / (2.0 * epsilon)
        analytic = grads[name].reshape(-1)[index]
        scale = max(abs(numeric), abs(analytic), floor)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
