"""Multimodal fusion, per-pixel attention and the masked log-L1 loss."""

from __future__ import annotations

import numpy as np

from . import ops
from .nets import ConfigError, NetConfig, UpDecoder, up_widths
from .nn import Conv2d, Module, uniform_init
from .tensor import DimensionError, Tensor

ATTENTION_WIDTHS = (512, 256, 128, 64)


class LossError(ValueError):
    pass


class BilinearFusion(Module):
    """Two banks of ``K`` bilinear forms: echo x visual and echo x material.

    ``f_img[j](p, q) = fe^T A_img[j] fi(:, p, q) + b_img[j]`` and likewise
    for the material map; the two results are stacked along channels.
    """

    def __init__(self, n: int, k: int, rng):
        self.K = k
        self.A_img = uniform_init(rng, (k, n, n), n)
        self.b_img = uniform_init(rng, (k,), n)
        self.A_mat = uniform_init(rng, (k, n, n), n)
        self.b_mat = uniform_init(rng, (k,), n)

    @property
    def out_channels(self) -> int:
        return 2 * self.K

    def maps(self, fe, fi, fm) -> tuple[Tensor, Tensor]:
        return (
            ops.bilinear_map(fe, self.A_img, fi, self.b_img),
            ops.bilinear_map(fe, self.A_mat, fm, self.b_mat),
        )

    def forward(self, fe, fi, fm) -> Tensor:
        f_img, f_mat = self.maps(fe, fi, fm)
        return ops.concat([f_img, f_mat], axis=1)


def dot_fusion(fe: Tensor, fi: Tensor, fm: Tensor) -> Tensor:
    """Two per-pixel dot products, ``[B, 2, h, w]``."""
    _check_features(fe, fi, fm)
    return ops.concat([ops.channel_dot(fe, fi), ops.channel_dot(fe, fm)], axis=1)


def concat_fusion(fe: Tensor, fi: Tensor, fm: Tensor) -> Tensor:
    """``fe`` tiled over the grid and stacked with both maps, ``[B, 3N, h, w]``."""
    _check_features(fe, fi, fm)
    _, _, h, w = fi.shape
    return ops.concat([ops.expand_spatial(fe, h, w), fi, fm], axis=1)


def _check_features(fe, fi, fm):
    if fe.ndim != 2 or fi.ndim != 4 or fi.shape != fm.shape or fe.shape[1] != fi.shape[1]:
        raise DimensionError(f"fusion features disagree: fe {fe.shape}, fi {fi.shape}, fm {fm.shape}")


class AdaptedFusion(Module):
    """``dot`` / ``concat`` fusion followed by a 1x1 conv to the attention width."""

    def __init__(self, kind: str, n: int, out_channels: int, rng):
        if kind not in ("dot", "concat"):
            raise ValueError(f"unknown fusion {kind!r}")
        self.kind = kind
        cin = 2 if kind == "dot" else 3 * n
        self.adapter = Conv2d(cin, out_channels, 1, rng=rng)
        self.out_channels = out_channels

    def raw(self, fe, fi, fm) -> Tensor:
        return dot_fusion(fe, fi, fm) if self.kind == "dot" else concat_fusion(fe, fi, fm)

    def forward(self, fe, fi, fm) -> Tensor:
        return self.adapter(self.raw(fe, fi, fm))


def make_fusion(kind: str, cfg: NetConfig, k: int, rng) -> Module:
    if kind == "bilinear":
        return BilinearFusion(cfg.feature_dim, k, rng)
    return AdaptedFusion(kind, cfg.feature_dim, 2 * k, rng)


class AttentionNet(Module):
    """Fractionally strided convs from the fusion grid up to a sigmoid map."""

    def __init__(self, cin: int, cfg: NetConfig, rng, in_hw: int | None = None):
        in_hw = in_hw if in_hw is not None else cfg.bottleneck
        stages = int(round(np.log2(cfg.image_size / in_hw)))
        if in_hw * 2**stages != cfg.image_size:
            raise ConfigError(f"fusion grid {in_hw} cannot be doubled up to {cfg.image_size}")
        self.in_hw = in_hw
        self.dec = UpDecoder(cin, up_widths(cfg, stages, ATTENTION_WIDTHS), "sigmoid", cfg.bias, rng)

    def forward(self, fstar: Tensor) -> Tensor:
        if fstar.shape[2] != self.in_hw or fstar.shape[3] != self.in_hw:
            raise ConfigError(f"fusion map {fstar.shape[2:]} != expected {self.in_hw}x{self.in_hw}")
        return self.dec(fstar)


def combine_depth(alpha: Tensor, de: Tensor, di: Tensor) -> Tensor:
    """``alpha * de + (1 - alpha) * di``."""
    if not (alpha.shape == de.shape == di.shape):
        raise DimensionError(f"combine_depth shapes: alpha {alpha.shape}, de {de.shape}, di {di.shape}")
    return ops.mul(alpha, de) + ops.mul(1.0 - alpha, di)


def log_l1_loss(pred: Tensor, target: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean of ``ln(1 + |target - pred|)`` over valid pixels only.

    ``valid`` defaults to ``target > 0``. Invalid pixels contribute neither
    value nor gradient.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {target.shape}")
    valid = target > 0 if valid is None else np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise LossError("no valid pixels in target")
    err = ops.log1p(ops.abs(ops.sub(Tensor(target), pred)))
    masked = ops.mul(err, Tensor(valid.astype(np.float64)))
    return ops.mul_scalar(ops.sum(masked), 1.0 / n)
