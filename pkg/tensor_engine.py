"""
TENSOR ENGINE
Dense float32 tensors with a reverse-mode autodiff tape.

Covers exactly what the volumetric networks need:
1. conv3d / maxpool3d / upsample3d_nearest (encoder + decoder)
2. dense / relu / softmax_channels (projection head, class probabilities)
3. dropout with train / mc_inference / off modes (inverted scaling)
4. concat / reshape / add / multiply / sum (plumbing for skips and losses)
5. Adam optimizer + finite-difference gradcheck

Rules:
- float32 everywhere; float64 only inside gradcheck
- a Tape is confined to the thread that opened it
- no broadcasting between tensors
"""

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, NumericError, ParameterError

logger = logging.getLogger("TENSOR_ENGINE")

DTYPE = np.float32

_TAPE_STACK = threading.local()


class Tensor:
    """N-dimensional float array that can take part in a Tape"""

    def __init__(self, data, requires_grad=False, name=None, dtype=DTYPE):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name, dtype=None)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"


# =================================================================
# THE TAPE
# =================================================================
@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable


@dataclass
class Tape:
    """
    Ordered list of recorded operations. Usage:

        with Tape() as tape:
            loss = dice_loss(...)
            tape.backward(loss)
    """
    records: list = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_TAPE_STACK, "stack", None)
        if stack is None:
            stack = _TAPE_STACK.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.stack.pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        output._tape = self
        self.records.append(TapeRecord(op, tuple(inputs), output, backward_fn))

    def backward(self, loss):
        """Populate .grad of every requires_grad tensor reachable from loss"""
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self and not loss.requires_grad:
            raise ParameterError("loss was not recorded on this tape")

        grads = {id(loss): (loss, np.ones_like(loss.data))}
        produced = set()
        for rec in reversed(self.records):
            produced.add(id(rec.output))
            entry = grads.get(id(rec.output))
            if entry is None:
                continue
            input_grads = rec.backward_fn(entry[1])
            for tensor, g in zip(rec.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                g = np.asarray(g, dtype=tensor.data.dtype)
                prev = grads.get(id(tensor))
                grads[id(tensor)] = (tensor, g if prev is None else prev[1] + g)

        for key, (tensor, g) in grads.items():
            if not tensor.requires_grad:
                continue
            if key in produced or tensor.grad is None:
                tensor.grad = g
            else:
                tensor.grad = tensor.grad + g
        return loss


def active_tape() -> Optional[Tape]:
    stack = getattr(_TAPE_STACK, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor):
    """Run the backward pass of the tape that produced loss"""
    if loss._tape is None:
        raise ParameterError("loss is not on a tape")
    return loss._tape.backward(loss)


def _check_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name}: non-finite values in output")


def record_op(op_name, inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    """
    Wrap a forward result as a Tensor and register its backward rule.
    backward_fn(grad_out) returns one gradient (or None) per input.
    """
    _check_finite(out_data, op_name)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, dtype=None)
    tape = active_tape()
    if tape is not None and needs_grad:
        tape.record(op_name, inputs, out, backward_fn)
    return out


def _as_tensor(value, like: Tensor):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype), dtype=None)


def _same_shape(a: Tensor, b: Tensor, op_name):
    if a.shape != b.shape:
        raise DimensionError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")


# =================================================================
# 1. ELEMENTWISE & PLUMBING
# =================================================================
def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def multiply(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "multiply")
    return record_op("multiply", (a, b), a.data * b.data,
                     lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1)
    return record_op("sum", (x,), out,
                     lambda g: (np.full(x.shape, g.reshape(()), dtype=x.data.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from exc
    return record_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [N,C_k,...] tensors along the channel axis"""
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape[:1] != first.shape[:1] or t.shape[2:] != first.shape[2:]:
            raise DimensionError(f"concat_channels: {t.shape} incompatible with {first.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return record_op("concat_channels", tuple(tensors), out,
                     lambda g: tuple(np.split(g, bounds, axis=1)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype),
                     lambda g: (g * mask,))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of an [N,C,...] tensor, max-subtracted"""
    if x.ndim < 2:
        raise DimensionError(f"softmax_channels needs [N,C,...], got {x.shape}")
    _check_finite(x.data, "softmax_channels input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record_op("softmax_channels", (x,), s, _backward)


# =================================================================
# 2. DENSE
# =================================================================
def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def _backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record_op("dense", (x, weight, bias), out, _backward)


# =================================================================
# 3. CONVOLUTION & RESAMPLING
# =================================================================
def _conv_out_dims(spatial, kernel_dims, stride, padding):
    out = []
    for extent, k in zip(spatial, kernel_dims):
        padded = extent + 2 * padding
        if k > padded:
            raise DimensionError(f"conv3d: kernel {kernel_dims} larger than padded input {spatial}")
        out.append((padded - k) // stride + 1)
    return tuple(out)


def _window_slices(a, b, c, stride, out_dims):
    do, ho, wo = out_dims
    return (slice(None), slice(None),
            slice(a, a + stride * (do - 1) + 1, stride),
            slice(b, b + stride * (ho - 1) + 1, stride),
            slice(c, c + stride * (wo - 1) + 1, stride))


def _conv3d_direct(xp, w, stride, out_dims):
    # one kernel offset at a time; innermost work runs over the contiguous W axis
    cout, _, kd, kh, kw = w.shape
    out = np.zeros((xp.shape[0], cout) + out_dims, dtype=np.result_type(xp, w))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                window = xp[_window_slices(a, b, c, stride, out_dims)]
                out += np.tensordot(w[:, :, a, b, c], window, axes=([1], [1])).transpose(1, 0, 2, 3, 4)
    return out


def _conv3d_im2col(xp, w, stride, out_dims):
    _, _, kd, kh, kw = w.shape
    cols = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    cols = cols[:, :, :out_dims[0], :out_dims[1], :out_dims[2]]
    out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return out.transpose(0, 4, 1, 2, 3)


CONV_IMPLEMENTATIONS = {
    "direct": _conv3d_direct,
    "im2col": _conv3d_im2col,
}


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride=1, padding=0, impl="direct") -> Tensor:
    """[N,Cin,D,H,W] * [Cout,Cin,kd,kh,kw] + [Cout] -> [N,Cout,D',H',W']"""
    if x.ndim != 5 or kernel.ndim != 5:
        raise DimensionError(f"conv3d: expected 5D input and kernel, got {x.shape}, {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv3d: kernel expects {kernel.shape[1]} channels, input has {x.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv3d: bias {bias.shape} vs {kernel.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv3d: stride {stride} / padding {padding} out of range")
    if impl not in CONV_IMPLEMENTATIONS:
        raise ParameterError(f"conv3d: unknown implementation '{impl}'")

    out_dims = _conv_out_dims(x.shape[2:], kernel.shape[2:], stride, padding)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    w = kernel.data
    out = CONV_IMPLEMENTATIONS[impl](xp, w, stride, out_dims)
    out += bias.data.reshape(1, -1, 1, 1, 1)

    def _backward(g):
        _, _, kd, kh, kw = w.shape
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if kernel.requires_grad else None
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    sl = _window_slices(a, b, c, stride, out_dims)
                    if gw is not None:
                        gw[:, :, a, b, c] = np.tensordot(g, xp[sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                    if gxp is not None:
                        gxp[sl] += np.tensordot(w[:, :, a, b, c], g, axes=([0], [1])).transpose(1, 0, 2, 3, 4)
        gx = None
        if gxp is not None:
            d, h, wd = x.shape[2:]
            gx = gxp[:, :, p:p + d, p:p + h, p:p + wd]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return record_op("conv3d", (x, kernel, bias), out, _backward)


def maxpool3d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first row-major maximum"""
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d: expected 5D input, got {x.shape}")
    n, c, d, h, w = x.shape
    k = window
    if k < 1 or d % k or h % k or w % k:
        raise DimensionError(f"maxpool3d: extents {(d, h, w)} not divisible by window {k}")
    out_dims = (d // k, h // k, w // k)
    blocks = (x.data.reshape(n, c, out_dims[0], k, out_dims[1], k, out_dims[2], k)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7)
              .reshape((n, c) + out_dims + (k ** 3,)))
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _backward(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, idx, g[..., None], axis=-1)
        gx = (routed.reshape((n, c) + out_dims + (k, k, k))
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(x.shape))
        return (gx,)

    return record_op("maxpool3d", (x,), out, _backward)


def upsample3d_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ParameterError(f"upsample3d_nearest: factor {factor} < 1")
    if x.ndim != 5:
        raise DimensionError(f"upsample3d_nearest: expected 5D input, got {x.shape}")
    f = factor
    out = x.data
    for axis in (2, 3, 4):
        out = np.repeat(out, f, axis=axis)
    n, c, d, h, w = x.shape

    def _backward(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return record_op("upsample3d_nearest", (x,), out, _backward)


# =================================================================
# 4. DROPOUT
# =================================================================
class DropoutMode(Enum):
    TRAIN = "train"
    MC_INFERENCE = "mc_inference"
    OFF = "off"


@dataclass
class DropoutMask:
    mask: np.ndarray
    keep_rate: float
    mode: DropoutMode

    def scaled(self, dtype=DTYPE):
        if self.mode is DropoutMode.OFF:
            return np.ones(self.mask.shape, dtype=dtype)
        return (self.mask * (1.0 / self.keep_rate)).astype(dtype)


def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate {rate} outside [0, 1)")


def sample_dropout_mask(shape, rate, rng: np.random.Generator, mode=DropoutMode.TRAIN) -> DropoutMask:
    _check_rate(rate)
    if mode is DropoutMode.OFF or rate == 0.0:
        return DropoutMask(np.ones(shape, dtype=bool), 1.0, mode)
    return DropoutMask(rng.random(shape) >= rate, 1.0 - rate, mode)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], mode=DropoutMode.TRAIN) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); mode off and rate 0 are the identity"""
    _check_rate(rate)
    if mode is DropoutMode.OFF or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train/mc mode needs an rng stream")
    scale = sample_dropout_mask(x.shape, rate, rng, mode).scaled(x.data.dtype)
    return record_op("dropout", (x,), x.data * scale, lambda g: (g * scale,))


# =================================================================
# 5. OPTIMIZER
# =================================================================
@dataclass(frozen=True)
class OptimizerSpec:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, frozen=()):
    """
    One Adam update over name -> array dicts. Returns (new_params, new_state);
    inputs are not mutated. Frozen names keep both their value and their moments.
    """
    new_params, new_state = {}, AdamState(dict(state.m), dict(state.v), dict(state.steps))
    for name, value in params.items():
        if name in frozen:
            new_params[name] = value
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        if m.shape != value.shape or v.shape != value.shape or g.shape != value.shape:
            raise DimensionError(f"adam_step: state for '{name}' not congruent with {value.shape}")
        t = state.steps.get(name, 0) + 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = (value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
        new_state.m[name] = m.astype(value.dtype)
        new_state.v[name] = v.astype(value.dtype)
        new_state.steps[name] = t
    return new_params, new_state


class AdamOptimizer:
    """Single-owner Adam over a name -> Tensor parameter dict"""

    def __init__(self, params: Dict[str, Tensor], spec: OptimizerSpec = OptimizerSpec()):
        self.params = params
        self.spec = spec
        self.state = AdamState()

    def step(self, frozen=()):
        values = {name: t.data for name, t in self.params.items()}
        grads = {name: t.grad for name, t in self.params.items() if t.grad is not None}
        new_values, self.state = adam_step(values, grads, self.state, self.spec.learning_rate,
                                           self.spec.beta1, self.spec.beta2, self.spec.eps, frozen)
        for name, t in self.params.items():
            t.data = new_values[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


# =================================================================
# 6. GRADCHECK
# =================================================================
def gradcheck(fragment: Callable[..., Tensor], inputs: Sequence[Tensor], eps=1e-3,
              max_coords: Optional[int] = None, seed=0) -> float:
    """
    Max relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    over sampled coordinates of `inputs`. Non-scalar outputs are reduced with a
    fixed random projection. Runs in float64; inputs are restored afterwards.
    """
    rng = np.random.default_rng(seed)
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    projection = {}

    def _scalar(out):
        if out.size == 1:
            return out
        if "p" not in projection:
            projection["p"] = rng.standard_normal(out.shape)
        return tensor_sum(multiply(out, Tensor(projection["p"], dtype=None)))

    try:
        for t in inputs:
            t.data = np.array(t.data, dtype=np.float64)
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            loss = _scalar(fragment(*inputs))
            tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        worst = 0.0
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            a_flat = a.reshape(-1)
            if max_coords is None or flat.size <= max_coords:
                coords = range(flat.size)
            else:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for k in coords:
                keep = flat[k]
                flat[k] = keep + eps
                f_plus = _scalar(fragment(*inputs)).item()
                flat[k] = keep - eps
                f_minus = _scalar(fragment(*inputs)).item()
                flat[k] = keep
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(a_flat[k]), abs(numeric), 1e-8)
                worst = max(worst, abs(a_flat[k] - numeric) / denom)
        return worst
    finally:
        for t, (data, flag, grad) in zip(inputs, saved):
            t.data, t.requires_grad, t.grad = data, flag, grad
