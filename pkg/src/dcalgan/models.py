"""Generator and discriminator graphs, parameter initialization and feature fusion.

Two presets share one code path:

* ``paper``: 512x512 grayscale input, AlexNet-style discriminator
  (96@11x11/4, 256@5x5, 384@3x3, 384@3x3, 256@5x5 with overlapping 3x3/2
  pools after layers 1, 2 and 5) and a 4x4x1024 projection followed by seven
  doubling transposed-convolution stages.
* ``desk``: the same five-conv / three-pool structure scaled to 64x64, small
  enough to train on a CPU.

Discriminator features are the post-activation (post-pool where a pool
exists) outputs of conv layers 1..5. Fusion mode F1 uses layer 5, F2 layers
5 and 4, F3 layers 5, 4 and 3; lower layers are max-pooled down to the last
layer's grid, then the blocks are concatenated channel-wise in that order
and flattened, so F1 is a prefix of F2 and F2 a prefix of F3.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Literal, NamedTuple

import numpy as np

from .autodiff import (
    Tensor,
    activate,
    batchnorm,
    concat,
    conv2d,
    conv_transpose2d,
    linear,
    maxpool,
    normalize_padding,
    reshape,
)
from .autodiff.ops import conv_output_size, conv_transpose_output_size
from .errors import ConfigError, NumericError

FusionMode = Literal["F1", "F2", "F3"]
FUSION_LAYERS: dict[str, tuple[int, ...]] = {"F1": (5,), "F2": (5, 4), "F3": (5, 4, 3)}


@dataclass(frozen=True)
class PoolSpec:
    window: int
    stride: int
    pad: int


@dataclass(frozen=True)
class GenStage:
    out_channels: int
    kernel: int
    stride: int
    pad: int


@dataclass(frozen=True)
class DiscLayer:
    out_channels: int
    kernel: int
    stride: int
    pad: tuple[int, int, int, int]
    pool: PoolSpec | None = None
    batchnorm: bool = True


@dataclass(frozen=True)
class NetworkConfig:
    preset: str
    image_size: int
    proj_channels: int
    gen_stages: tuple[GenStage, ...]
    disc_layers: tuple[DiscLayer, ...]
    z_dim: int = 100
    proj_size: int = 4
    fusion_mode: str = "F2"
    leaky_alpha: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_LAYERS:
            raise ConfigError(f"fusion mode must be one of F1, F2, F3, got {self.fusion_mode!r}")
        if len(self.disc_layers) != 5:
            raise ConfigError("the discriminator has exactly five convolutional layers")
        if not self.gen_stages or self.gen_stages[-1].out_channels != 1:
            raise ConfigError("the last generator stage must emit one channel")
        if self.z_dim < 1:
            raise ConfigError("z_dim must be positive")
        size = generator_shapes(self)[-1][-1]
        if size != self.image_size:
            raise ConfigError(f"generator emits {size}x{size}, expected {self.image_size}")
        discriminator_shapes(self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        d = dict(d)
        d["gen_stages"] = tuple(GenStage(**s) for s in d["gen_stages"])
        layers = []
        for layer in d["disc_layers"]:
            layer = dict(layer)
            layer["pad"] = tuple(layer["pad"])
            if layer.get("pool") is not None:
                layer["pool"] = PoolSpec(**layer["pool"])
            layers.append(DiscLayer(**layer))
        d["disc_layers"] = tuple(layers)
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()

    def with_fusion(self, mode: str) -> NetworkConfig:
        d = self.to_dict()
        d["fusion_mode"] = mode
        return NetworkConfig.from_dict(d)


def paper_config(fusion_mode: str = "F2") -> NetworkConfig:
    pool = PoolSpec(3, 2, 1)
    return NetworkConfig(
        preset="paper",
        image_size=512,
        proj_channels=1024,
        gen_stages=tuple(GenStage(c, 4, 2, 1) for c in (512, 256, 128, 64, 32, 16, 1)),
        disc_layers=(
            DiscLayer(96, 11, 4, (3, 4, 3, 4), pool, batchnorm=False),
            DiscLayer(256, 5, 1, (2, 2, 2, 2), pool),
            DiscLayer(384, 3, 1, (1, 1, 1, 1)),
            DiscLayer(384, 3, 1, (1, 1, 1, 1)),
            DiscLayer(256, 5, 1, (2, 2, 2, 2), pool),
        ),
        fusion_mode=fusion_mode,
    )


def desk_config(fusion_mode: str = "F2") -> NetworkConfig:
    pool = PoolSpec(3, 2, 1)
    return NetworkConfig(
        preset="desk",
        image_size=64,
        proj_channels=256,
        gen_stages=tuple(GenStage(c, 4, 2, 1) for c in (128, 64, 32, 1)),
        disc_layers=(
            DiscLayer(32, 5, 2, (2, 2, 2, 2), pool, batchnorm=False),
            DiscLayer(64, 5, 1, (2, 2, 2, 2), pool),
            DiscLayer(96, 3, 1, (1, 1, 1, 1)),
            DiscLayer(96, 3, 1, (1, 1, 1, 1)),
            DiscLayer(64, 5, 1, (2, 2, 2, 2), pool),
        ),
        fusion_mode=fusion_mode,
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


def get_config(preset: str, fusion_mode: str = "F2") -> NetworkConfig:
    try:
        return PRESETS[preset](fusion_mode)
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


# -- shape pipelines -----------------------------------------------------------


def generator_shapes(config: NetworkConfig) -> list[tuple[int, int, int]]:
    """(channels, height, width) after the projection and after every stage."""
    c, s = config.proj_channels, config.proj_size
    shapes = [(c, s, s)]
    for stage in config.gen_stages:
        s = conv_transpose_output_size(s, stage.kernel, stage.stride, stage.pad, stage.pad)
        if s <= 0:
            raise ConfigError("generator stage produces a nonpositive size")
        shapes.append((stage.out_channels, s, s))
    return shapes


def discriminator_shapes(config: NetworkConfig) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    """Per layer: (conv output shape, feature shape after the optional pool)."""
    h = w = config.image_size
    out = []
    for layer in config.disc_layers:
        t, b, l, r = normalize_padding(layer.pad)
        h = conv_output_size(h, layer.kernel, layer.stride, t, b)
        w = conv_output_size(w, layer.kernel, layer.stride, l, r)
        if h <= 0 or w <= 0:
            raise ConfigError("discriminator layer produces a nonpositive size")
        conv_shape = (layer.out_channels, h, w)
        if layer.pool is not None:
            p = layer.pool
            h = (h + 2 * p.pad - p.window) // p.stride + 1
            w = (w + 2 * p.pad - p.window) // p.stride + 1
        out.append((conv_shape, (layer.out_channels, h, w)))
    return out


def fused_dim(config: NetworkConfig, mode: str) -> int:
    shapes = [s for _, s in discriminator_shapes(config)]
    _, hf, wf = shapes[-1]
    return sum(shapes[layer - 1][0] * hf * wf for layer in FUSION_LAYERS[mode])


# -- parameters ----------------------------------------------------------------


@dataclass
class LayerParams:
    kernels: Tensor
    bias: Tensor
    bn_gamma: Tensor | None = None
    bn_beta: Tensor | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "kernels", self.kernels
        yield "bias", self.bias
        if self.bn_gamma is not None:
            yield "bn_gamma", self.bn_gamma
            yield "bn_beta", self.bn_beta  # type: ignore[misc]

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.bn_running_mean is not None:
            yield "bn_running_mean", self.bn_running_mean
            yield "bn_running_var", self.bn_running_var  # type: ignore[misc]


Network = dict[str, LayerParams]


@dataclass
class GanParams:
    generator: Network = field(default_factory=dict)
    discriminator: Network = field(default_factory=dict)


def named_parameters(net: Network, prefix: str = "") -> dict[str, Tensor]:
    return {f"{prefix}{layer}.{name}": t for layer, lp in net.items() for name, t in lp.tensors()}


def named_buffers(net: Network, prefix: str = "") -> dict[str, np.ndarray]:
    return {f"{prefix}{layer}.{name}": a for layer, lp in net.items() for name, a in lp.buffers()}


def set_requires_grad(net: Network, flag: bool) -> None:
    for t in named_parameters(net).values():
        t.requires_grad = flag
        if not flag:
            t.grad = None


def parameter_fingerprint(net: Network) -> str:
    h = hashlib.sha256()
    for name, t in named_parameters(net).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    for name, a in named_buffers(net).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _layer(rng: np.random.Generator, kernel_shape, channels: int, with_bn: bool, dtype) -> LayerParams:
    lp = LayerParams(
        kernels=Tensor(rng.normal(0.0, 0.02, size=kernel_shape).astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
    )
    if with_bn:
        lp.bn_gamma = Tensor(rng.normal(1.0, 0.02, size=channels).astype(dtype), requires_grad=True)
        lp.bn_beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        lp.bn_running_mean = np.zeros(channels, dtype=dtype)
        lp.bn_running_var = np.ones(channels, dtype=dtype)
    return lp


def init_params(config: NetworkConfig, seed: int, dtype=np.float32) -> GanParams:
    """Weights ~ N(0, 0.02), biases 0, batchnorm gamma ~ N(1, 0.02), beta 0."""
    rng = np.random.default_rng(seed)
    gen: Network = {}
    c_in = config.z_dim
    c0 = config.proj_channels
    gen["proj"] = _layer(rng, (c_in, c0, config.proj_size, config.proj_size), c0, True, dtype)
    c_in = c0
    last = len(config.gen_stages)
    for i, stage in enumerate(config.gen_stages, start=1):
        gen[f"stage{i}"] = _layer(rng, (c_in, stage.out_channels, stage.kernel, stage.kernel),
                                  stage.out_channels, i < last, dtype)
        c_in = stage.out_channels

    disc: Network = {}
    c_in = 1
    for i, layer in enumerate(config.disc_layers, start=1):
        disc[f"conv{i}"] = _layer(rng, (layer.out_channels, c_in, layer.kernel, layer.kernel),
                                  layer.out_channels, layer.batchnorm, dtype)
        c_in = layer.out_channels
    disc["head"] = _layer(rng, (1, fused_dim(config, config.fusion_mode)), 1, False, dtype)
    return GanParams(gen, disc)


def _check_layer(lp: LayerParams, shape: tuple[int, ...], name: str) -> None:
    if lp.kernels.shape != shape:
        raise ConfigError(f"parameter {name} has shape {lp.kernels.shape}, config expects {shape}")


def _bn(h: Tensor, lp: LayerParams, training: bool, update_stats: bool) -> Tensor:
    out, mean, var = batchnorm(h, lp.bn_gamma, lp.bn_beta, lp.bn_running_mean, lp.bn_running_var,
                               training=training)
    if training and update_stats:
        lp.bn_running_mean = mean.astype(lp.bn_running_mean.dtype)
        lp.bn_running_var = var.astype(lp.bn_running_var.dtype)
    return out


# -- forward passes ------------------------------------------------------------


def sample_z(rng: np.random.Generator, n: int, z_dim: int = 100, dtype=np.float32) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, z_dim)).astype(dtype)


def generator_forward(z, params: Network, config: NetworkConfig, training: bool = False,
                      update_stats: bool = True) -> Tensor:
    """Map a (batch, z_dim) noise matrix to (batch, 1, S, S) images in (-1, 1)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim == 2:
        z = reshape(z, (z.shape[0], z.shape[1], 1, 1))
    if z.ndim != 4 or z.shape[1] != config.z_dim or z.shape[2:] != (1, 1):
        raise ConfigError(f"noise must be (batch, {config.z_dim}), got {z.shape}")
    proj = params["proj"]
    _check_layer(proj, (config.z_dim, config.proj_channels, config.proj_size, config.proj_size), "proj")
    h = conv_transpose2d(z, proj.kernels, proj.bias, stride=1, pad=0)
    h = activate(_bn(h, proj, training, update_stats), "relu")
    last = len(config.gen_stages)
    c_in = config.proj_channels
    for i, stage in enumerate(config.gen_stages, start=1):
        lp = params[f"stage{i}"]
        _check_layer(lp, (c_in, stage.out_channels, stage.kernel, stage.kernel), f"stage{i}")
        h = conv_transpose2d(h, lp.kernels, lp.bias, stride=stage.stride, pad=stage.pad)
        if i < last:
            h = activate(_bn(h, lp, training, update_stats), "relu")
        else:
            h = activate(h, "tanh")
        c_in = stage.out_channels
    return h


class DiscriminatorOutput(NamedTuple):
    prob: Tensor
    logit: Tensor
    features: dict[int, Tensor]
    fused: Tensor


def discriminator_features(x, params: Network, config: NetworkConfig, training: bool = False,
                           update_stats: bool = True) -> dict[int, Tensor]:
    """Per-layer features (layer number -> tensor) for a (batch, 1, S, S) input."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    s = config.image_size
    if x.ndim != 4 or x.shape[1:] != (1, s, s):
        raise ConfigError(f"discriminator expects (batch, 1, {s}, {s}), got {x.shape}")
    feats: dict[int, Tensor] = {}
    h = x
    c_in = 1
    for i, layer in enumerate(config.disc_layers, start=1):
        lp = params[f"conv{i}"]
        _check_layer(lp, (layer.out_channels, c_in, layer.kernel, layer.kernel), f"conv{i}")
        h = conv2d(h, lp.kernels, lp.bias, stride=layer.stride, pad=layer.pad)
        if layer.batchnorm:
            h = _bn(h, lp, training, update_stats)
        h = activate(h, "leaky_relu", config.leaky_alpha)
        if layer.pool is not None:
            h, _ = maxpool(h, layer.pool.window, layer.pool.stride, layer.pool.pad)
        feats[i] = h
        c_in = layer.out_channels
    return feats


def fuse_features(features: dict[int, Tensor], mode: str) -> Tensor:
    """Concatenate layers (5, 4, 3)[:k] on the last layer's grid; returns (batch, dim)."""
    if mode not in FUSION_LAYERS:
        raise ConfigError(f"fusion mode must be one of F1, F2, F3, got {mode!r}")
    layers = FUSION_LAYERS[mode]
    missing = [layer for layer in layers if layer not in features]
    if missing:
        raise ConfigError(f"fusion {mode} needs features from layers {missing}")
    final = features[layers[0]]
    n, _, hf, wf = final.shape
    blocks = []
    for layer in layers:
        block = features[layer]
        h, w = block.shape[2:]
        if (h, w) != (hf, wf):
            if h % hf or w % wf or h // hf != w // wf:
                raise ConfigError(f"layer {layer} grid {h}x{w} cannot be pooled onto {hf}x{wf}")
            f = h // hf
            block, _ = maxpool(block, f, f, 0)
        blocks.append(reshape(block, (n, -1)))
    return blocks[0] if len(blocks) == 1 else concat(blocks, axis=1)


def discriminator_forward(x, params: Network, config: NetworkConfig, training: bool = False,
                          update_stats: bool = True) -> DiscriminatorOutput:
    feats = discriminator_features(x, params, config, training, update_stats)
    fused = fuse_features(feats, config.fusion_mode)
    head = params["head"]
    _check_layer(head, (1, fused.shape[1]), "head")
    logit = reshape(linear(fused, head.kernels, head.bias), (fused.shape[0],))
    if not np.all(np.isfinite(logit.data)):
        raise NumericError("non-finite discriminator activations")
    prob = activate(logit, "sigmoid")
    return DiscriminatorOutput(prob, logit, feats, fused)
