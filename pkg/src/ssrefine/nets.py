"""Refiner generator, patch projection heads, and patch discriminator.

The generator is a residual encoder-decoder. Its encoder exposes a list of
intermediate "tap" features (index 0 is the raw input) that the projection
heads turn into unit-norm patch embeddings; ``encode_taps`` re-runs the same
encoder weights on any image, which is how the refined output is embedded
with shared weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensorcore import Tensor, ops


def gaussian_init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _match_dtype(x: Tensor, param: Tensor) -> Tensor:
    """Cast a constant input tensor to the model's parameter dtype."""
    want = param.data.dtype
    if x.data.dtype == want:
        return x
    if x.requires_grad:
        raise ContractError(
            f"input dtype {x.data.dtype} differs from model dtype {want}; "
            "cast the input before building a graph through it"
        )
    return Tensor(x.data, dtype=want)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial standardization (no affine terms)."""
    mu = ops.mean(x, axis=(2, 3), keepdims=True)
    xc = ops.sub(x, mu)
    var = ops.mean(ops.mul(xc, xc), axis=(2, 3), keepdims=True)
    return ops.div(xc, ops.sqrt(ops.add(var, eps)))


class Conv2d:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        self.weight = gaussian_init(rng, (cout, cin, k, k))
        self.bias = zeros_param((cout,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class ConvTranspose2d:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        self.weight = gaussian_init(rng, (cin, cout, k, k))
        self.bias = zeros_param((cout,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)

    def params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class Linear:
    def __init__(self, rng, cin: int, cout: int):
        self.weight = gaussian_init(rng, (cin, cout))
        self.bias = zeros_param((cout,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)

    def params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class ResBlock:
    def __init__(self, rng, channels: int):
        self.conv1 = Conv2d(rng, channels, channels, 3, 1, 1)
        self.conv2 = Conv2d(rng, channels, channels, 3, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.relu(instance_norm(self.conv1(x)))
        h = instance_norm(self.conv2(h))
        return ops.add(x, h)

    def params(self, prefix: str):
        yield from self.conv1.params(f"{prefix}.conv1")
        yield from self.conv2.params(f"{prefix}.conv2")


@dataclass
class GeneratorConfig:
    in_channels: int = 3
    base_width: int = 16
    n_down: int = 2
    n_res_blocks: int = 2
    tap_layers: tuple[int, ...] = (0, 2, 4)

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if self.base_width < 1:
            raise ConfigError("base_width", f"must be >= 1, got {self.base_width}")
        if self.n_down < 1:
            raise ConfigError("n_down", f"must be >= 1, got {self.n_down}")
        if self.n_res_blocks < 0:
            raise ConfigError("n_res_blocks", f"must be >= 0, got {self.n_res_blocks}")
        depth = self.n_down + 3  # input, stem, downs..., residual stack
        if not self.tap_layers:
            raise ConfigError("tap_layers", "need at least one tap")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ConfigError("tap_layers", f"must be strictly increasing, got {self.tap_layers}")
        if self.tap_layers[0] < 0 or self.tap_layers[-1] >= depth:
            raise ConfigError(
                "tap_layers", f"indices must lie in [0, {depth - 1}], got {self.tap_layers}"
            )

    def layer_channels(self) -> list[int]:
        """Channel count of every encoder level, input included."""
        chans = [self.in_channels, self.base_width]
        for i in range(self.n_down):
            chans.append(self.base_width * (2 ** (i + 1)))
        chans.append(chans[-1])  # residual stack keeps width
        return chans

    def tap_channels(self) -> list[int]:
        chans = self.layer_channels()
        return [chans[i] for i in self.tap_layers]


class Generator:
    """Residual encoder-decoder refiner with tanh output in (-1, 1)."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.base_width
        self.stem = Conv2d(rng, cfg.in_channels, w, 3, 1, 1)
        self.downs = []
        cur = w
        for _ in range(cfg.n_down):
            self.downs.append(Conv2d(rng, cur, cur * 2, 3, 2, 1))
            cur *= 2
        self.res = [ResBlock(rng, cur) for _ in range(cfg.n_res_blocks)]
        self.ups = []
        for _ in range(cfg.n_down):
            self.ups.append(ConvTranspose2d(rng, cur, cur // 2, 4, 2, 1))
            cur //= 2
        self.head = Conv2d(rng, cur, cfg.in_channels, 3, 1, 1)

    # -- encoder -----------------------------------------------------------
    def encoder_features(self, x: Tensor) -> list[Tensor]:
        x = _match_dtype(x, self.stem.weight)
        feats = [x]
        h = ops.relu(instance_norm(self.stem(x)))
        feats.append(h)
        for down in self.downs:
            h = ops.relu(instance_norm(down(h)))
            feats.append(h)
        for block in self.res:
            h = block(h)
        feats.append(h)
        return feats

    def encode_taps(self, x: Tensor) -> list[Tensor]:
        feats = self.encoder_features(x)
        return [feats[i] for i in self.cfg.tap_layers]

    # -- full pass ----------------------------------------------------------
    def generate(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError("input", f"expected (B,{self.cfg.in_channels},H,W), got {x.shape}")
        factor = 2 ** self.cfg.n_down
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigError(
                "input", f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by {factor}"
            )
        feats = self.encoder_features(x)
        h = feats[-1]
        for up in self.ups:
            h = ops.relu(instance_norm(up(h)))
        y = ops.tanh(self.head(h))
        return y, [feats[i] for i in self.cfg.tap_layers]

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.stem.params("gen.stem"))
        for i, down in enumerate(self.downs):
            out.update(down.params(f"gen.down{i}"))
        for i, block in enumerate(self.res):
            out.update(block.params(f"gen.res{i}"))
        for i, up in enumerate(self.ups):
            out.update(up.params(f"gen.up{i}"))
        out.update(self.head.params("gen.head"))
        return out


class ProjectionHeads:
    """Per-tap two-layer MLPs mapping gathered patch features to unit vectors."""

    def __init__(self, tap_channels: list[int], embed_dim: int, rng: np.random.Generator):
        if embed_dim < 1:
            raise ConfigError("embed_dim", f"must be >= 1, got {embed_dim}")
        self.embed_dim = embed_dim
        self.mlps = [
            (Linear(rng, c, embed_dim), Linear(rng, embed_dim, embed_dim)) for c in tap_channels
        ]

    def project(self, taps: list[Tensor], locations: list[np.ndarray]) -> list[Tensor]:
        """Gather per-layer patch features at flat spatial indices and embed them.

        Returns one (B, S, E) unit-norm tensor per tap layer.
        """
        if len(taps) != len(self.mlps) or len(locations) != len(self.mlps):
            raise ConfigError(
                "taps", f"expected {len(self.mlps)} tap layers, got {len(taps)}/{len(locations)}"
            )
        out = []
        for tap, locs, (fc1, fc2) in zip(taps, locations, self.mlps):
            b, c, h, w = tap.shape
            locs = np.asarray(locs)
            if locs.size and (locs.min() < 0 or locs.max() >= h * w):
                raise IndexError(f"patch location out of range for {h}x{w} feature map")
            s = locs.shape[0]
            flat = ops.reshape(tap, (b, c, h * w))
            picked = ops.take(flat, locs, axis=2)            # (B, C, S)
            rows = ops.reshape(ops.transpose(picked, (0, 2, 1)), (b * s, c))
            emb = fc2(ops.relu(fc1(rows)))
            emb = ops.l2_normalize(emb, axis=1)
            out.append(ops.reshape(emb, (b, s, self.embed_dim)))
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (fc1, fc2) in enumerate(self.mlps):
            out.update(fc1.params(f"heads.{i}.fc1"))
            out.update(fc2.params(f"heads.{i}.fc2"))
        return out


@dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    base_width: int = 16
    n_stages: int = 3

    def __post_init__(self):
        if self.n_stages < 1:
            raise ConfigError("n_stages", f"must be >= 1, got {self.n_stages}")
        if self.base_width < 1:
            raise ConfigError("base_width", f"must be >= 1, got {self.base_width}")


class Discriminator:
    """Strided patch critic; returns a pre-sigmoid score map (B, 1, h', w')."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.convs = []
        cur = cfg.in_channels
        width = cfg.base_width
        for _ in range(cfg.n_stages):
            self.convs.append(Conv2d(rng, cur, width, 4, 2, 1))
            cur, width = width, width * 2
        self.head = Conv2d(rng, cur, 1, 3, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = _match_dtype(x, self.convs[0].weight)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i > 0:  # raw scores reach the first stage unnormalized
                h = instance_norm(h)
            h = ops.leaky_relu(h, 0.2)
        return self.head(h)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"disc.conv{i}"))
        out.update(self.head.params("disc.head"))
        return out
