"""Minimal CNN layer toolkit with analytic forward/backward passes.

Layers operate on numpy arrays shaped (batch, channels, height, width) up to
the dense stage, all in the dtype the network was built with (float32 for
training; gradient tests build float64 networks). Each layer caches what its
backward pass needs; backward returns the input gradient and accumulates
parameter gradients in place.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def state_arrays(self) -> list[np.ndarray]:
        """Parameter values plus any running statistics, in a fixed order."""
        return [p.value for p in self.params()]

    def config(self) -> dict:
        return {"kind": self.kind}

    def _require_cache(self, cache):
        if cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a training forward")
        return cache


def _im2col(x_pad: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Columns of every kernel window: (B * Ho * Wo, C * kh * kw)."""
    view = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))
    b, c, ho, wo = view.shape[:4]
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * kh * kw), (b, ho, wo)


class Conv2d(Layer):
    """Stride-1 cross-correlation with zero 'same' or 'valid' padding,
    computed as one im2col matrix product per call."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, padding="same",
                 rng=None, dtype=np.float32, name="conv"):
        if padding not in ("same", "valid"):
            raise ConfigError(f"unsupported padding {padding!r}")
        if padding == "same" and kernel_size % 2 == 0:
            raise ConfigError("same padding requires an odd kernel size")
        self.padding = padding
        self.pad = (kernel_size - 1) // 2 if padding == "same" else 0
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Param(f"{name}.weight", _uniform_init(rng, shape, fan_in, dtype),
                            np.zeros(shape, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels, dtype),
                          np.zeros(out_channels, dtype))
        self._cache = None

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.weight.value.shape[1]:
            raise ValueError(
                f"{self.weight.name}: input shape {x.shape} incompatible with "
                f"weight shape {self.weight.value.shape}"
            )
        w = self.weight.value
        p = self.pad
        x_pad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols, (b, ho, wo) = _im2col(x_pad, w.shape[2], w.shape[3])
        if train:
            self._cache = (cols, x_pad.shape)
        out = cols @ w.reshape(w.shape[0], -1).T + self.bias.value
        return np.ascontiguousarray(out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2))

    def backward(self, grad):
        cols, pad_shape = self._require_cache(self._cache)
        w = self.weight.value
        f, c, kh, kw = w.shape
        b, _, ho, wo = grad.shape
        g_mat = grad.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
        self.weight.grad += (g_mat.T @ cols).reshape(w.shape)
        self.bias.grad += g_mat.sum(axis=0)
        # Scatter the window gradients back: one shifted slice-add per kernel
        # offset, accumulated channels-last so reads and writes stay local.
        w_cols = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
        dcols = (g_mat @ w_cols.T).reshape(b, ho, wo, kh, kw, c)
        dx_hwc = np.zeros((pad_shape[0], pad_shape[2], pad_shape[3], c), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dx_hwc[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
        p = self.pad
        if p:
            dx_hwc = dx_hwc[:, p : pad_shape[2] - p, p : pad_shape[3] - p, :]
        return np.ascontiguousarray(dx_hwc.transpose(0, 3, 1, 2))

    def params(self):
        return [self.weight, self.bias]

    def config(self):
        f, c, k, _ = self.weight.value.shape
        return {"kind": self.kind, "in_channels": c, "out_channels": f,
                "kernel_size": k, "padding": self.padding}


class BatchNorm(Layer):
    """Per-channel batch normalization with running statistics.

    Training normalizes with batch moments (population variance) and updates
    running statistics; inference uses the running statistics only.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32, name="bn"):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype), np.zeros(channels, dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype), np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self._cache = None

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.gamma.value.size:
            raise ValueError(
                f"{self.gamma.name}: input shape {x.shape} incompatible with "
                f"{self.gamma.value.size} channels"
            )
        expand = (None, slice(None), None, None)
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            ivar = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[expand]) * ivar[expand]
            self._cache = (xhat, ivar, x.shape)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
        else:
            ivar = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[expand]) * ivar[expand]
        return self.gamma.value[expand] * xhat + self.beta.value[expand]

    def backward(self, grad):
        xhat, ivar, shape = self._require_cache(self._cache)
        expand = (None, slice(None), None, None)
        n = shape[0] * shape[2] * shape[3]
        self.gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma.value[expand]
        # Standard batch-norm input gradient through the batch moments.
        dx = (
            dxhat
            - dxhat.mean(axis=(0, 2, 3))[expand]
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3))[expand]
        ) * ivar[expand]
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [self.gamma.value, self.beta.value, self.running_mean, self.running_var]

    def config(self):
        return {"kind": self.kind, "channels": int(self.gamma.value.size),
                "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        mask = self._require_cache(self._cache)
        return grad * mask


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped."""

    kind = "maxpool"

    def __init__(self, size=2):
        self.size = size
        self._cache = None

    def forward(self, x, train):
        s = self.size
        b, c, h, w = x.shape
        ho, wo = h // s, w // s
        if ho < 1 or wo < 1:
            raise ValueError(f"maxpool: input {x.shape} smaller than window {s}")
        windows = x[:, :, : ho * s, : wo * s].reshape(b, c, ho, s, wo, s)
        windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, s * s)
        best = windows.argmax(axis=4)
        if train:
            self._cache = (best, x.shape)
        return np.take_along_axis(windows, best[..., None], axis=4)[..., 0]

    def backward(self, grad):
        best, shape = self._require_cache(self._cache)
        s = self.size
        b, c, h, w = shape
        ho, wo = h // s, w // s
        flat = np.zeros((b, c, ho, wo, s * s), dtype=grad.dtype)
        np.put_along_axis(flat, best[..., None], grad[..., None], axis=4)
        dx = np.zeros(shape, dtype=grad.dtype)
        dx[:, :, : ho * s, : wo * s] = (
            flat.reshape(b, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(
                b, c, ho * s, wo * s
            )
        )
        return dx

    def config(self):
        return {"kind": self.kind, "size": self.size}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, name="dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(f"{name}.weight",
                            _uniform_init(rng, (in_features, out_features), in_features, dtype),
                            np.zeros((in_features, out_features), dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_features, dtype),
                          np.zeros(out_features, dtype))
        self._cache = None

    def forward(self, x, train):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.weight.value.shape[0]:
            raise ValueError(
                f"{self.weight.name}: flattened input shape {flat.shape} incompatible "
                f"with weight shape {self.weight.value.shape}"
            )
        if train:
            self._cache = (flat, x.shape)
        return flat @ self.weight.value + self.bias.value

    def backward(self, grad):
        flat, shape = self._require_cache(self._cache)
        self.weight.grad += flat.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return (grad @ self.weight.value.T).reshape(shape)

    def params(self):
        return [self.weight, self.bias]

    def config(self):
        d, k = self.weight.value.shape
        return {"kind": self.kind, "in_features": d, "out_features": k}


class Softmax(Layer):
    kind = "softmax"

    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        if train:
            self._cache = y
        return y

    def backward(self, grad):
        y = self._require_cache(self._cache)
        return y * (grad - (grad * y).sum(axis=1, keepdims=True))


_LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, BatchNorm, ReLU, MaxPool, Dense, Softmax)}


class Network:
    """An ordered layer stack with in-place parameter updates."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grads(self) -> None:
        for p in self.params():
            p.grad[...] = 0

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def get_state(self) -> list[np.ndarray]:
        return [a.copy() for layer in self.layers for a in layer.state_arrays()]

    def set_state(self, state: list[np.ndarray]) -> None:
        arrays = [a for layer in self.layers for a in layer.state_arrays()]
        if len(arrays) != len(state):
            raise ValueError(f"state has {len(state)} arrays, network expects {len(arrays)}")
        for dst, src in zip(arrays, state):
            dst[...] = src


def build_baseline(
    n_mels: int,
    patch_frames: int,
    n_classes: int,
    channels: tuple[int, int, int] = (32, 64, 128),
    kernel_size: int = 5,
    pool_size: int = 2,
    seed: int = 0,
    dtype=np.float32,
) -> Network:
    """Three pre-activation conv stages (BN, ReLU, Conv, MaxPool) feeding a
    dense softmax classifier.

    Default widths put the trainable parameter count near half a million for
    96-mel, 86-frame inputs; smaller widths can be passed for quick
    experiments.
    """
    if n_mels < 1 or patch_frames < 1 or n_classes < 2:
        raise ConfigError("n_mels, patch_frames must be >= 1 and n_classes >= 2")
    h, w = n_mels, patch_frames
    for _ in channels:
        h, w = h // pool_size, w // pool_size
        if h < 1 or w < 1:
            raise ConfigError(
                f"input {n_mels}x{patch_frames} too small for {len(channels)} "
                f"pooling stages of size {pool_size}"
            )
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    in_ch = 1
    for i, out_ch in enumerate(channels, start=1):
        layers.append(BatchNorm(in_ch, dtype=dtype, name=f"bn{i}"))
        layers.append(ReLU())
        layers.append(Conv2d(in_ch, out_ch, kernel_size, "same", rng, dtype, name=f"conv{i}"))
        layers.append(MaxPool(pool_size))
        in_ch = out_ch
    layers.append(Dense(in_ch * h * w, n_classes, rng, dtype, name="dense"))
    layers.append(Softmax())
    return Network(layers)


# ---------------------------------------------------------------------------
# Checkpoints: JSON header (layer configs plus caller metadata), then every
# state array as little-endian float32 in layer order.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"NBCKPT1\n"


def save_checkpoint(path, net: Network, meta: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    extra_arrays = extra_arrays or {}
    header = {
        "layers": [layer.config() for layer in net.layers],
        "meta": meta or {},
        "extra": {k: list(v.shape) for k, v in extra_arrays.items()},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for layer in net.layers:
            for arr in layer.state_arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for name in sorted(extra_arrays):
            fh.write(np.ascontiguousarray(extra_arrays[name], dtype="<f4").tobytes())


def _layer_from_config(cfg: dict, dtype) -> Layer:
    kind = cfg["kind"]
    if kind == "conv2d":
        return Conv2d(cfg["in_channels"], cfg["out_channels"], cfg["kernel_size"],
                      cfg["padding"], dtype=dtype)
    if kind == "batchnorm":
        return BatchNorm(cfg["channels"], cfg["eps"], cfg["momentum"], dtype=dtype)
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(cfg["size"])
    if kind == "dense":
        return Dense(cfg["in_features"], cfg["out_features"], dtype=dtype)
    if kind == "softmax":
        return Softmax()
    raise ConfigError(f"unknown layer kind {kind!r} in checkpoint")


def load_checkpoint(path, dtype=np.float32):
    """Rebuild (network, meta, extra_arrays) from a checkpoint file."""
    with Path(path).open("rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        net = Network([_layer_from_config(c, dtype) for c in header["layers"]])
        for layer in net.layers:
            for arr in layer.state_arrays():
                data = np.frombuffer(fh.read(4 * arr.size), dtype="<f4")
                arr[...] = data.reshape(arr.shape)
        extra = {}
        for name in sorted(header["extra"]):
            shape = tuple(header["extra"][name])
            count = int(np.prod(shape)) if shape else 1
            extra[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).copy()
    return net, header["meta"], extra
