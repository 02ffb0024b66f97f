"""Convolutional image encoder: small strided trunk plus a 2-layer head.

The trunk is a stack of (conv, leaky relu) blocks with 'same'-style
padding (kernel // 2). Global average pooling bridges to the head, which
is FC -> leaky relu -> FC and returns raw embeddings; callers decide
whether to L2-normalize. There is deliberately no batch normalization:
rows of a batch must never influence each other, which keeps encoders
bit-reproducible regardless of batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    input_size: int = 64
    # (out_channels, kernel, stride) per trunk layer
    trunk: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    hidden_dim: int = 128
    embed_dim: int = 32
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.input_channels < 1 or self.input_size < 1:
            raise ValueError("input_channels and input_size must be positive")
        if not self.trunk:
            raise ValueError("trunk needs at least one layer")
        for i, layer in enumerate(self.trunk):
            if len(layer) != 3:
                raise ValueError(f"trunk layer {i} must be (out_channels, kernel, stride)")
            oc, k, s = layer
            if oc < 1 or k < 1 or s < 1:
                raise ValueError(f"trunk layer {i} has non-positive out_channels/kernel/stride")
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ValueError("hidden_dim and embed_dim must be positive")
        if self.spatial_size() < 1:
            raise ValueError("trunk strides collapse the input below 1x1")

    def spatial_size(self) -> int:
        """Side length of the trunk output feature map."""
        size = self.input_size
        for _, k, s in self.trunk:
            size = (size + 2 * (k // 2) - k) // s + 1
            if size < 1:
                return 0
        return size

    def total_stride(self) -> int:
        out = 1
        for _, _, s in self.trunk:
            out *= s
        return out

    def trunk_channels(self) -> int:
        return self.trunk[-1][0]


@dataclass
class EncoderParams:
    """Ordered, named parameter tensors. Order and shapes depend only on config."""

    names: list[str] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)

    def add(self, name: str, t: Tensor) -> None:
        if name in self.names:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.names.append(name)
        self.tensors.append(t)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __iter__(self):
        return iter(zip(self.names, self.tensors))

    def __len__(self) -> int:
        return len(self.tensors)

    def clone(self, requires_grad: bool) -> "EncoderParams":
        out = EncoderParams()
        for name, t in self:
            out.add(name, Tensor(t.data.copy(), requires_grad=requires_grad, dtype=t.dtype))
        return out

    def byte_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c_in = config.input_channels
    for i, (oc, k, _) in enumerate(config.trunk):
        shapes.append((f"conv{i}.weight", (oc, c_in, k, k)))
        shapes.append((f"conv{i}.bias", (oc,)))
        c_in = oc
    shapes.append(("fc1.weight", (c_in, config.hidden_dim)))
    shapes.append(("fc1.bias", (config.hidden_dim,)))
    shapes.append(("fc2.weight", (config.hidden_dim, config.embed_dim)))
    shapes.append(("fc2.bias", (config.embed_dim,)))
    return shapes


def init_params(config: EncoderConfig, seed: int, requires_grad: bool = True, dtype=np.float32) -> EncoderParams:
    """Fan-in-scaled uniform init: weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero."""
    gen = substream(seed, "init")
    params = EncoderParams()
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = float(np.sqrt(1.0 / fan_in))
            data = gen.uniform(-bound, bound, size=shape).astype(dtype)
        params.add(name, Tensor(data, requires_grad=requires_grad, dtype=dtype))
    return params


def _check_images(config: EncoderConfig, images: Tensor) -> None:
    if images.ndim != 4:
        raise DimensionError(f"expected [n, c, h, w] images, got shape {images.shape}")
    n, c, h, w = images.shape
    if c != config.input_channels or h != config.input_size or w != config.input_size:
        raise DimensionError(
            f"images {images.shape} do not match config "
            f"({config.input_channels} channels, {config.input_size}x{config.input_size})"
        )


def spatial_features(params: EncoderParams, config: EncoderConfig, images: Tensor) -> Tensor:
    """Trunk output before pooling: [n, trunk_channels, s, s]."""
    _check_images(config, images)
    x = images
    for i, (_, k, s) in enumerate(config.trunk):
        x = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=s, padding=k // 2)
        x = T.leaky_relu(x, config.leaky_slope)
    return x


def _bias_rows(b: Tensor, n: int) -> Tensor:
    # Broadcast a bias vector over n rows via a ones matmul; keeps the op set minimal.
    ones = Tensor(np.ones((n, 1), dtype=b.dtype))
    return T.matmul(ones, T.reshape(b, (1, b.shape[0])))


def head(params: EncoderParams, config: EncoderConfig, pooled: Tensor) -> Tensor:
    """Project pooled trunk features [n, trunk_channels] to raw embeddings [n, embed_dim]."""
    if pooled.ndim != 2 or pooled.shape[1] != config.trunk_channels():
        raise DimensionError(f"pooled features must be [n, {config.trunk_channels()}], got {pooled.shape}")
    n = pooled.shape[0]
    h = T.add(T.matmul(pooled, params["fc1.weight"]), _bias_rows(params["fc1.bias"], n))
    h = T.leaky_relu(h, config.leaky_slope)
    return T.add(T.matmul(h, params["fc2.weight"]), _bias_rows(params["fc2.bias"], n))


def global_avg_pool(features: Tensor) -> Tensor:
    if features.ndim != 4:
        raise DimensionError(f"expected [n, c, h, w] features, got {features.shape}")
    n, c, h, w = features.shape
    return T.reduce_mean(T.reshape(features, (n, c, h * w)), axis=2)


def encode(params: EncoderParams, config: EncoderConfig, images: Tensor) -> Tensor:
    """Raw (un-normalized) embeddings [n, embed_dim]."""
    return head(params, config, global_avg_pool(spatial_features(params, config, images)))
