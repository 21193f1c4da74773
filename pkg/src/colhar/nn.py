"""Numerical core: a conv -> ReLU -> max-pool -> dense classifier in NumPy.

All parameters of a model live in one flat float64 vector. The layout is

    conv weight  (conv_out_channels, input_channels, conv_kernel)   row-major
    conv bias    (conv_out_channels,)
    dense weight (num_classes, conv_out_channels * pool_length)     row-major
    dense bias   (num_classes,)

and the dense layer consumes the pooled feature map flattened channel-major,
i.e. feature ``f * pool_length + t`` is channel ``f`` at pooled step ``t``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ArchitectureError, UsageError

ParameterVector = np.ndarray


@dataclass(frozen=True)
class ModelArchitecture:
    input_channels: int
    num_classes: int
    window_length: int = 100
    conv_out_channels: int = 64
    conv_kernel: int = 3
    pool_kernel: int = 2

    def __post_init__(self):
        for name in ("input_channels", "num_classes", "window_length",
                     "conv_out_channels", "conv_kernel", "pool_kernel"):
            if int(getattr(self, name)) < 1:
                raise ArchitectureError(f"{name} must be >= 1")
        if self.window_length < self.conv_kernel:
            raise ArchitectureError("window_length must be >= conv_kernel")
        if self.pool_length < 1:
            raise ArchitectureError("pooled feature map would be empty")

    @property
    def conv_length(self) -> int:
        return self.window_length - self.conv_kernel + 1

    @property
    def pool_length(self) -> int:
        return self.conv_length // self.pool_kernel

    @property
    def dense_input(self) -> int:
        return self.conv_out_channels * self.pool_length

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv_w": (self.conv_out_channels, self.input_channels, self.conv_kernel),
            "conv_b": (self.conv_out_channels,),
            "dense_w": (self.num_classes, self.dense_input),
            "dense_b": (self.num_classes,),
        }

    @property
    def num_params(self) -> int:
        return (self.conv_kernel * self.input_channels * self.conv_out_channels
                + self.conv_out_channels
                + self.dense_input * self.num_classes
                + self.num_classes)

    def fingerprint(self) -> bytes:
        """8-byte digest over the architecture fields, for mismatch detection."""
        text = ";".join(f"{k}={getattr(self, k)}" for k in (
            "input_channels", "num_classes", "window_length",
            "conv_out_channels", "conv_kernel", "pool_kernel"))
        return hashlib.blake2b(text.encode(), digest_size=8).digest()


@dataclass(frozen=True)
class SensorWindow:
    """One fixed-length multichannel segment with its class index.

    ``subject`` is a provenance tag naming the recording the window came from.
    """
    data: np.ndarray
    label: int
    subject: str = ""


class Layers(NamedTuple):
    conv_w: np.ndarray
    conv_b: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray


def check_params(params: np.ndarray, arch: ModelArchitecture) -> np.ndarray:
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != arch.num_params:
        raise ArchitectureError(
            f"parameter vector has shape {params.shape}, architecture needs ({arch.num_params},)")
    return params


def unflatten(params: ParameterVector, arch: ModelArchitecture) -> Layers:
    """Split a flat vector into layer views (no copy)."""
    params = check_params(params, arch)
    views = []
    offset = 0
    for shape in arch.shapes.values():
        n = int(np.prod(shape))
        views.append(params[offset:offset + n].reshape(shape))
        offset += n
    return Layers(*views)


def flatten(layers: Layers | Sequence[np.ndarray]) -> ParameterVector:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in layers])


def init_params(arch: ModelArchitecture, seed: int) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    conv_bound = 1.0 / np.sqrt(arch.input_channels * arch.conv_kernel)
    dense_bound = 1.0 / np.sqrt(arch.dense_input)
    shapes = arch.shapes
    return flatten(Layers(
        rng.uniform(-conv_bound, conv_bound, size=shapes["conv_w"]),
        np.zeros(shapes["conv_b"]),
        rng.uniform(-dense_bound, dense_bound, size=shapes["dense_w"]),
        np.zeros(shapes["dense_b"]),
    ))


def stack_windows(windows: Sequence[SensorWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``(x[B, C, L], y[B])`` arrays."""
    if len(windows) == 0:
        raise UsageError("no windows to stack")
    x = np.stack([np.asarray(w.data, dtype=np.float64) for w in windows])
    y = np.array([w.label for w in windows], dtype=np.int64)
    return x, y


def _as_batch(x: np.ndarray, arch: ModelArchitecture) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (arch.input_channels, arch.window_length):
        raise ArchitectureError(
            f"input shape {x.shape[1:]} != ({arch.input_channels}, {arch.window_length})")
    return x


def _forward(layers: Layers, arch: ModelArchitecture, x: np.ndarray):
    # patches[b, c, t, k] = x[b, c, t + k]
    patches = np.lib.stride_tricks.sliding_window_view(x, arch.conv_kernel, axis=2)
    z = np.tensordot(patches, layers.conv_w, axes=([1, 3], [1, 2]))  # (B, L', F)
    z = z.transpose(0, 2, 1) + layers.conv_b[None, :, None]          # (B, F, L')
    a = np.maximum(z, 0.0)
    n, f, p, k = x.shape[0], arch.conv_out_channels, arch.pool_length, arch.pool_kernel
    blocks = a[:, :, :p * k].reshape(n, f, p, k)
    arg = blocks.argmax(axis=3)
    pooled = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]
    h = pooled.reshape(n, f * p)
    logits = h @ layers.dense_w.T + layers.dense_b
    return logits, (patches, z, arg, h)


def forward_batch(params: ParameterVector, arch: ModelArchitecture, x: np.ndarray) -> np.ndarray:
    """Logits for a batch ``x[B, C, L]`` (or a single ``[C, L]`` window)."""
    logits, _ = _forward(unflatten(params, arch), arch, _as_batch(x, arch))
    return logits


def forward(params: ParameterVector, arch: ModelArchitecture, window: SensorWindow) -> np.ndarray:
    return forward_batch(params, arch, window.data)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    return -_log_softmax(logits)[np.arange(len(y)), y]


def loss_and_grad_arrays(params: ParameterVector, arch: ModelArchitecture,
                         x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    x = _as_batch(x, arch)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise UsageError("empty batch")
    if y.shape != (x.shape[0],) or y.min() < 0 or y.max() >= arch.num_classes:
        raise UsageError("labels must be one class index in [0, num_classes) per window")
    layers = unflatten(params, arch)
    logits, (patches, z, arg, h) = _forward(layers, arch, x)
    n = x.shape[0]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    d_dense_w = dlogits.T @ h
    d_dense_b = dlogits.sum(axis=0)

    f, p, k = arch.conv_out_channels, arch.pool_length, arch.pool_kernel
    dpooled = (dlogits @ layers.dense_w).reshape(n, f, p)
    dblocks = np.zeros((n, f, p, k))
    np.put_along_axis(dblocks, arg[..., None], dpooled[..., None], axis=3)
    dz = np.zeros_like(z)
    dz[:, :, :p * k] = dblocks.reshape(n, f, p * k)
    dz *= z > 0.0
    d_conv_b = dz.sum(axis=(0, 2))
    d_conv_w = np.tensordot(dz, patches, axes=([0, 2], [0, 2]))  # (F, C, K)
    return loss, flatten(Layers(d_conv_w, d_conv_b, d_dense_w, d_dense_b))


def loss_and_grad(params: ParameterVector, arch: ModelArchitecture,
                  batch: Sequence[SensorWindow]) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over ``batch`` and its gradient."""
    if len(batch) == 0:
        raise UsageError("empty batch")
    x, y = stack_windows(batch)
    return loss_and_grad_arrays(params, arch, x, y)


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, num_params: int, **hyper) -> "AdamState":
        return cls(np.zeros(num_params), np.zeros(num_params), 0, **hyper)

    def reset(self) -> "AdamState":
        return replace(self, first_moment=np.zeros_like(self.first_moment),
                       second_moment=np.zeros_like(self.second_moment), step_count=0)


def adam_step(params: ParameterVector, grad: np.ndarray,
              state: AdamState) -> tuple[ParameterVector, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.first_moment.shape):
        raise UsageError(
            f"length mismatch: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def argmax_first(logits: np.ndarray) -> np.ndarray | int:
    # np.argmax already returns the lowest index among ties
    return np.argmax(logits, axis=-1)


def predict(params: ParameterVector, arch: ModelArchitecture, window: SensorWindow) -> int:
    return int(argmax_first(forward(params, arch, window)))


def predict_batch(params: ParameterVector, arch: ModelArchitecture, x: np.ndarray) -> np.ndarray:
    return argmax_first(forward_batch(params, arch, x))
