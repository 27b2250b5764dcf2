"""Echo Net, Visual Net and Material Net.

Channel widths follow the published layer lists; ``width_div`` scales every
hidden width down (4 at toy scale) while keeping the topology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import Tensor

ECHO_ENCODER_LAYERS = ((32, 8, 4), (64, 4, 2), (8, 3, 1))  # (width, kernel, stride)
ECHO_DECODER_WIDTHS = (512, 256, 128, 64, 32, 16)
VISUAL_ENCODER_WIDTHS = (64, 128, 256, 512, 512)
VISUAL_DECODER_WIDTHS = (512, 256, 128, 64)
MATERIAL_WIDTHS = (64, 64, 128, 256, 512)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    feature_dim: int = 128
    width_div: int = 4
    spectro_shape: tuple[int, int] = (257, 166)
    bias: bool = True
    skip_connections: bool = True

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} must be a multiple of 32")
        if 2 ** self.decoder_depth != self.image_size:
            raise ConfigError(f"image_size {self.image_size} must be a power of two")
        if self.feature_dim < 8:
            raise ConfigError("feature_dim must be >= 8")

    @classmethod
    def toy(cls, image_size: int = 32, **kw) -> "NetConfig":
        return cls(image_size=image_size, feature_dim=128, width_div=4, **kw)

    @classmethod
    def full(cls, image_size: int = 128, **kw) -> "NetConfig":
        return cls(image_size=image_size, feature_dim=512, width_div=1, **kw)

    @property
    def decoder_depth(self) -> int:
        return int(round(math.log2(self.image_size)))

    @property
    def bottleneck(self) -> int:
        return self.image_size // 32

    def width(self, w: int) -> int:
        return max(1, w // self.width_div)

    def to_text(self) -> str:
        return (
            f"image_size={self.image_size}\nfeature_dim={self.feature_dim}\nwidth_div={self.width_div}\n"
            f"spectro_p={self.spectro_shape[0]}\nspectro_q={self.spectro_shape[1]}\n"
            f"bias={int(self.bias)}\nskip_connections={int(self.skip_connections)}\n"
        )


def up_widths(cfg: NetConfig, stages: int, widths=ECHO_DECODER_WIDTHS) -> list[int]:
    """Hidden widths for ``stages`` upsampling layers ending in a single channel."""
    head = [cfg.width(w) for w in widths[: stages - 1]]
    while len(head) < stages - 1:
        head.append(max(1, head[-1] // 2))
    return head + [1]


class ConvBlock(Module):
    """conv -> batchnorm -> activation."""

    def __init__(self, cin, cout, k, stride, padding, act, bias, rng, transpose=False):
        layer = ConvTranspose2d if transpose else Conv2d
        self.conv = layer(cin, cout, k, stride, padding, bias=bias, rng=rng)
        self.bn = BatchNorm2d(cout, affine_bias=bias)
        self.act = act

    def forward(self, x):
        return ops.activation(self.bn(self.conv(x)), self.act)


class UpDecoder(Module):
    """Stack of k4/s2/p1 fractionally strided convs doubling resolution each stage.

    Batchnorm + relu between stages; the last stage is followed by ``final``.
    """

    def __init__(self, cin: int, widths: list[int], final: str, bias: bool, rng):
        self.blocks = []
        for w in widths[:-1]:
            self.blocks.append(ConvBlock(cin, w, 4, 2, 1, "relu", bias, rng, transpose=True))
            cin = w
        self.head = ConvTranspose2d(cin, widths[-1], 4, 2, 1, bias=bias, rng=rng)
        self.final = final

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return ops.activation(self.head(x), self.final)


class EchoEncoder(Module):
    def __init__(self, cfg: NetConfig, rng):
        self.shapes = []
        h, w = cfg.spectro_shape
        if h < 1 or w < 1:
            raise ConfigError(f"spectrogram shape {cfg.spectro_shape} is empty")
        cin = 2
        self.layers = []
        for width, k, s in ECHO_ENCODER_LAYERS:
            p = k // 2
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise ConfigError(f"echo encoder collapses spectrogram {cfg.spectro_shape} below 1x1")
            self.layers.append(ConvBlock(cin, cfg.width(width), k, s, p, "relu", cfg.bias, rng))
            self.shapes.append((cfg.width(width), h, w))
            cin = cfg.width(width)
        self.to_vec = Conv2d(cin, cfg.feature_dim, 1, bias=cfg.bias, rng=rng)

    def forward(self, spec: Tensor) -> Tensor:
        x = spec
        for layer in self.layers:
            x = layer(x)
        return ops.global_avg_pool(self.to_vec(x))


class EchoDecoder(Module):
    def __init__(self, cfg: NetConfig, rng, cin: int | None = None, stages: int | None = None):
        stages = stages or cfg.decoder_depth
        self.dec = UpDecoder(cin or cfg.feature_dim, up_widths(cfg, stages), "relu", cfg.bias, rng)

    def forward(self, fe: Tensor) -> Tensor:
        x = fe if fe.ndim == 4 else fe.reshape(fe.shape[0], fe.shape[1], 1, 1)
        return self.dec(x)


class EchoNet(Module):
    def __init__(self, cfg: NetConfig, rng):
        self.encoder = EchoEncoder(cfg, rng)
        self.decoder = EchoDecoder(cfg, rng)

    def forward(self, spec: Tensor) -> tuple[Tensor, Tensor]:
        fe = self.encoder(spec)
        return self.decoder(fe), fe


class VisualEncoder(Module):
    """Five k4/s2/p1 conv stages with leaky relu; the last width is ``N``."""

    def __init__(self, cfg: NetConfig, rng):
        widths = [cfg.width(w) for w in VISUAL_ENCODER_WIDTHS]
        widths[-1] = cfg.feature_dim
        self.widths = widths
        self.down = []
        cin = 3
        for w in widths:
            self.down.append(ConvBlock(cin, w, 4, 2, 1, "leaky_relu", cfg.bias, rng))
            cin = w

    def forward(self, img: Tensor) -> list[Tensor]:
        feats, x = [], img
        for layer in self.down:
            x = layer(x)
            feats.append(x)
        return feats


class VisualNet(Module):
    """U-Net: encoder activations are concatenated onto the mirrored decoder
    stage. ``f_i`` is the bottleneck activation."""

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        self.encoder = VisualEncoder(cfg, rng)
        enc_w = self.encoder.widths
        self.up = []
        cin = enc_w[-1]
        for i, w in enumerate(cfg.width(w) for w in VISUAL_DECODER_WIDTHS):
            self.up.append(ConvBlock(cin, w, 4, 2, 1, "relu", cfg.bias, rng, transpose=True))
            cin = w + enc_w[-2 - i]
        self.head = ConvTranspose2d(cin, 1, 4, 2, 1, bias=cfg.bias, rng=rng)

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor]:
        if img.shape[2] != self.cfg.image_size or img.shape[3] != self.cfg.image_size:
            raise ConfigError(f"image {img.shape[2:]} does not match image_size {self.cfg.image_size}")
        feats = self.encoder(img)
        x = feats[-1]
        for i, layer in enumerate(self.up):
            x = layer(x)
            skip = feats[-2 - i]
            if not self.cfg.skip_connections:
                skip = Tensor(np.zeros(skip.shape))
            x = ops.concat([x, skip], axis=1)
        return ops.relu(self.head(x)), feats[-1]


class ResidualBlock(Module):
    def __init__(self, cin, cout, stride, bias, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=bias, rng=rng)
        self.bn1 = BatchNorm2d(cout, affine_bias=bias)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=bias, rng=rng)
        self.bn2 = BatchNorm2d(cout, affine_bias=bias)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, 0, bias=bias, rng=rng)
            self.proj_bn = BatchNorm2d(cout, affine_bias=bias)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        short = x if self.proj is None else self.proj_bn(self.proj(x))
        return ops.relu(y + short)


class MaterialNet(Module):
    """ResNet-18 style trunk: 7x7 stem and four residual blocks."""

    def __init__(self, cfg: NetConfig, rng):
        w = [cfg.width(c) for c in MATERIAL_WIDTHS]
        self.stem = ConvBlock(3, w[0], 7, 2, 3, "relu", cfg.bias, rng)
        self.blocks = [
            ResidualBlock(w[0], w[1], 1, cfg.bias, rng),
            ResidualBlock(w[1], w[2], 2, cfg.bias, rng),
            ResidualBlock(w[2], w[3], 2, cfg.bias, rng),
            ResidualBlock(w[3], w[4], 2, cfg.bias, rng),
        ]
        self.to_n = Conv2d(w[4], cfg.feature_dim, 1, bias=cfg.bias, rng=rng) if w[4] != cfg.feature_dim else None

    def forward(self, img: Tensor, target_hw: tuple[int, int]) -> Tensor:
        x = self.stem(img)
        for b in self.blocks:
            x = b(x)
        x = ops.adaptive_avg_pool2d(x, target_hw)
        return x if self.to_n is None else self.to_n(x)
