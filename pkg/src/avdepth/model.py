"""End-to-end models built from the subnetworks.

``AVDepthModel`` is the attention-fused network. ``ConcatDecoderModel`` and
``ImageOnlyModel`` are the baselines used by the ablation protocols.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .fusion import AttentionNet, combine_depth, make_fusion
from .nets import EchoDecoder, EchoEncoder, EchoNet, MaterialNet, NetConfig, VisualEncoder, VisualNet
from .nn import Module
from .tensor import Tensor

FUSIONS = ("bilinear", "dot", "concat")
MODALITY_SETS = {
    "echo": ("echo",),
    "echo+img": ("echo", "img"),
    "echo+mat": ("echo", "mat"),
    "all": ("echo", "img", "mat"),
    "img": ("img",),
}


class AVDepthModel(Module):
    """Echo, visual and material features fused into a per-pixel attention map
    that blends the echo and image depth predictions."""

    kind = "fused"

    def __init__(self, cfg: NetConfig, fusion: str = "bilinear", k: int = 16, seed: int = 0):
        if fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {fusion!r}; choose from {FUSIONS}")
        rng = np.random.default_rng(seed)
        self.cfg, self.fusion_kind, self.K = cfg, fusion, k
        self.echo = EchoNet(cfg, rng)
        self.visual = VisualNet(cfg, rng)
        self.material = MaterialNet(cfg, rng)
        self.fusion = make_fusion(fusion, cfg, k, rng)
        self.attention = AttentionNet(2 * k, cfg, rng)

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups = {"echo": [], "visual": [], "attention": [], "fusion": [], "material": []}
        for name, p in self.named_parameters():
            groups[name.split(".", 1)[0]].append((name, p))
        return groups

    def forward(self, spec: Tensor, img: Tensor) -> dict[str, Tensor]:
        de, fe = self.echo(spec)
        di, fi = self.visual(img)
        fm = self.material(img, fi.shape[2:])
        fstar = self.fusion(fe, fi, fm)
        alpha = self.attention(fstar)
        return {"depth": combine_depth(alpha, de, di), "echo_depth": de, "image_depth": di, "alpha": alpha}


class ConcatDecoderModel(Module):
    """Selected features stacked along channels and decoded by one shared
    upsampling decoder. With ``("echo",)`` this is exactly Echo Net."""

    kind = "concat_decoder"

    def __init__(self, cfg: NetConfig, modalities=("echo", "img", "mat"), seed: int = 0):
        if "echo" not in modalities:
            raise ValueError("concat-decoder ablations always include the echo branch")
        rng = np.random.default_rng(seed)
        self.cfg, self.modalities = cfg, tuple(modalities)
        self.echo_encoder = EchoEncoder(cfg, rng)
        self.visual_encoder = VisualEncoder(cfg, rng) if "img" in modalities else None
        self.material = MaterialNet(cfg, rng) if "mat" in modalities else None
        n_in = cfg.feature_dim * len(self.modalities)
        hw = cfg.bottleneck if len(self.modalities) > 1 else 1
        stages = int(round(np.log2(cfg.image_size // hw)))
        self.decoder = EchoDecoder(cfg, rng, cin=n_in, stages=stages)

    def forward(self, spec: Tensor, img: Tensor) -> dict[str, Tensor]:
        fe = self.echo_encoder(spec)
        if len(self.modalities) == 1:
            return {"depth": self.decoder(fe)}
        hw = self.cfg.bottleneck
        parts = [ops.expand_spatial(fe, hw, hw)]
        if self.visual_encoder is not None:
            parts.append(self.visual_encoder(img)[-1])
        if self.material is not None:
            parts.append(self.material(img, (hw, hw)))
        return {"depth": self.decoder(ops.concat(parts, axis=1))}


class ImageOnlyModel(Module):
    """Visual Net on its own."""

    kind = "image_only"

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.visual = VisualNet(cfg, np.random.default_rng(seed))

    def forward(self, spec: Tensor, img: Tensor) -> dict[str, Tensor]:
        di, _ = self.visual(img)
        return {"depth": di}


def build_model(cfg: NetConfig, modalities: str = "all", fusion: str = "bilinear", k: int = 16, seed: int = 0) -> Module:
    """``modalities="all"`` gives the attention-fused model; other subsets
    give the matching baseline."""
    if modalities not in MODALITY_SETS:
        raise ValueError(f"unknown modalities {modalities!r}; choose from {sorted(MODALITY_SETS)}")
    if modalities == "all":
        return AVDepthModel(cfg, fusion, k, seed)
    if modalities == "img":
        return ImageOnlyModel(cfg, seed)
    return ConcatDecoderModel(cfg, MODALITY_SETS[modalities], seed)
