"""Adam, the training loop, depth metrics and the ablation protocols."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .formats import FormatError, atomic_write, decode_checkpoint, encode_checkpoint
from .fusion import log_l1_loss
from .model import MODALITY_SETS, AVDepthModel, ConcatDecoderModel, ImageOnlyModel, build_model
from .nets import EchoEncoder, NetConfig
from .nn import Module
from .scene import SplitArrays
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "split", "loss", "rmse", "rel", "log10", "d1", "d2", "d3", "n_valid")
RESOLUTION_SCALES = (1, 2, 4, 8, 16, 32)  # denominators: 1, 1/2, ..., 1/32
CLAMP_MIN_DEPTH = 1e-3


class NumericError(RuntimeError):
    """Non-finite gradient, parameter or loss."""


class CheckpointError(FormatError):
    pass


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decoupled: bool = True

    def to_text(self) -> str:
        return (
            f"lr={self.lr!r}\nbeta1={self.beta1!r}\nbeta2={self.beta2!r}\neps={self.eps!r}\n"
            f"weight_decay={self.weight_decay!r}\ndecoupled_wd={int(self.decoupled)}\n"
        )


class Adam:
    """Adam with bias correction.

    With ``decoupled`` the decay is applied as ``p <- p - lr * wd * p`` before
    the moment update; otherwise ``wd * p`` is added to the gradient.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], cfg: Optional[AdamConfig] = None):
        self.cfg = cfg or AdamConfig()
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self) -> None:
        c = self.cfg
        grads = {}
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params:
            g = grads[name]
            if c.weight_decay:
                if c.decoupled:
                    p.data -= c.lr * c.weight_decay * p.data
                else:
                    g = g + c.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# ----------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    rmse: float
    rel: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    n_clamped: int = 0

    def row(self) -> list[str]:
        return [_fmt(self.rmse), _fmt(self.rel), _fmt(self.log10), _fmt(self.delta1),
                _fmt(self.delta2), _fmt(self.delta3), str(self.n_valid)]


def _fmt(x: float) -> str:
    return repr(float(x))


def compute_metrics(pred: np.ndarray, gt: np.ndarray, literal_rel: bool = False) -> MetricsReport:
    """Depth metrics over pixels with ``gt > 0``.

    Predictions at or below zero are clamped to 1 mm for the ratio and log
    metrics (RMSE uses the raw value); the clamp count is reported.
    ``literal_rel`` switches REL to the signed ``(pred - gt) / pred`` form.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid pixels to evaluate")
    d, p = gt[valid], pred[valid]
    clamped = p <= 0
    pc = np.where(clamped, CLAMP_MIN_DEPTH, p)
    diff = p - d
    rmse = math.sqrt(float(np.mean(diff * diff)))
    rel = float(np.mean((pc - d) / pc)) if literal_rel else float(np.mean(np.abs(diff) / d))
    log10 = float(np.mean(np.abs(np.log10(pc) - np.log10(d))))
    ratio = np.maximum(pc / d, d / pc)
    deltas = [float(np.mean(ratio < 1.25**k)) for k in (1, 2, 3)]
    return MetricsReport(rmse, rel, log10, *deltas, n_valid=n, n_clamped=int(clamped.sum()))


# ----------------------------------------------------------------------------
# data plumbing


def batch_tensors(arrays: SplitArrays, idx) -> tuple[Tensor, Tensor, np.ndarray]:
    return (
        Tensor(arrays.spectrograms[idx].astype(np.float64)),
        Tensor(arrays.images[idx].astype(np.float64)),
        arrays.depths[idx].astype(np.float64),
    )


def predict(
    model: Module,
    arrays: SplitArrays,
    batch_size: int = 16,
    image_transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Eval-mode depth predictions for a whole split, in index order."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(arrays), batch_size):
            idx = np.arange(start, min(start + batch_size, len(arrays)))
            spec, img, _ = batch_tensors(arrays, idx)
            if image_transform is not None:
                img = Tensor(image_transform(img.data))
            out.append(model(spec, img)["depth"].data)
    return np.concatenate(out)


def evaluate(model: Module, arrays: SplitArrays, batch_size: int = 16, image_transform=None,
             literal_rel: bool = False) -> MetricsReport:
    pred = predict(model, arrays, batch_size, image_transform)
    return compute_metrics(pred, arrays.depths, literal_rel)


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    max_steps: Optional[int] = None
    eval_batch_size: int = 16
    adam: AdamConfig = field(default_factory=AdamConfig)

    def to_text(self) -> str:
        return (
            f"epochs={self.epochs}\nbatch_size={self.batch_size}\ntrain_seed={self.seed}\n"
            f"max_steps={self.max_steps if self.max_steps is not None else ''}\n" + self.adam.to_text()
        )


@dataclass
class TrainResult:
    step_losses: list[float]
    log_rows: list[list[str]]

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        writer.writerows(self.log_rows)
        return buf.getvalue()


def train(
    model: Module,
    train_set: SplitArrays,
    val_set: Optional[SplitArrays] = None,
    cfg: Optional[TrainConfig] = None,
    log_path: Optional[str | Path] = None,
) -> TrainResult:
    """Seeded mini-batch training on the masked log-L1 loss.

    Every epoch appends a ``train`` row (mean batch loss) and, when a
    validation split is given, a ``val`` row with its metrics. ``max_steps``
    stops early once that many optimizer steps have run.
    """
    cfg = cfg or TrainConfig()
    opt = Adam(model.named_parameters(), cfg.adam)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    steps, rows = [], []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n - bs + 1, bs):
            if cfg.max_steps is not None and len(steps) >= cfg.max_steps:
                break
            spec, img, gt = batch_tensors(train_set, order[start : start + bs])
            model.zero_grad()
            loss = log_l1_loss(model(spec, img)["depth"], gt)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"loss diverged at epoch {epoch}, step {len(steps) + 1}")
            loss.backward()
            opt.step()
            steps.append(value)
            epoch_losses.append(value)
        if not epoch_losses:
            break
        rows.append([str(epoch), "train", _fmt(np.mean(epoch_losses))] + [""] * 7)
        if val_set is not None:
            rep = evaluate(model, val_set, cfg.eval_batch_size)
            rows.append([str(epoch), "val", ""] + rep.row())
        logger.info("epoch %d loss %.5f", epoch, np.mean(epoch_losses))
    check_finite(model)
    result = TrainResult(steps, rows)
    if log_path is not None:
        atomic_write(log_path, result.csv_text().encode())
    return result


def check_finite(model: Module) -> None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {name} is not finite")


# ----------------------------------------------------------------------------
# checkpoints


def model_config_text(model: Module) -> str:
    cfg: NetConfig = model.cfg
    lines = [f"model={model.kind}"]
    if isinstance(model, AVDepthModel):
        lines += [f"fusion={model.fusion_kind}", f"K={model.K}"]
    elif isinstance(model, ConcatDecoderModel):
        lines.append(f"modalities={'+'.join(model.modalities)}")
    text = "\n".join(lines) + "\n" + cfg.to_text()
    encoder = _find(model, EchoEncoder)
    if encoder is not None:
        text += "".join(f"echo_shape.{i}={c}x{h}x{w}\n" for i, (c, h, w) in enumerate(encoder.shapes))
    return text


def _find(model: Module, kind):
    return next((m for m in model.modules() if isinstance(m, kind)), None)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def model_from_config(text: str) -> Module:
    kv = parse_kv(text)
    try:
        cfg = NetConfig(
            image_size=int(kv["image_size"]),
            feature_dim=int(kv["feature_dim"]),
            width_div=int(kv["width_div"]),
            spectro_shape=(int(kv["spectro_p"]), int(kv["spectro_q"])),
            bias=bool(int(kv["bias"])),
            skip_connections=bool(int(kv["skip_connections"])),
        )
        kind = kv["model"]
        if kind == AVDepthModel.kind:
            return AVDepthModel(cfg, kv["fusion"], int(kv["K"]))
        if kind == ImageOnlyModel.kind:
            return ImageOnlyModel(cfg)
        if kind == ConcatDecoderModel.kind:
            return ConcatDecoderModel(cfg, tuple(kv["modalities"].split("+")))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from exc
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(model: Module, path: str | Path, extra_text: str = "") -> None:
    """Atomic write; an interrupted save leaves the previous file intact."""
    atomic_write(path, encode_checkpoint(model.state_dict(), model_config_text(model) + extra_text))


def load_checkpoint(path: str | Path) -> tuple[Module, str]:
    state, text = decode_checkpoint(Path(path).read_bytes())
    model = model_from_config(text)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"strict load failed: {exc}") from exc
    return model, text


# ----------------------------------------------------------------------------
# experiment protocols


def ablate_modalities(
    train_set: SplitArrays,
    test_set: SplitArrays,
    mode: str,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    model_seed: int = 0,
) -> MetricsReport:
    """Concat-decoder ablation over one feature subset (echo is always kept)."""
    if mode not in ("echo", "echo+img", "echo+mat", "all"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    model = ConcatDecoderModel(net_cfg, MODALITY_SETS[mode], seed=model_seed)
    train(model, train_set, None, train_cfg)
    return evaluate(model, test_set, train_cfg.eval_batch_size)


def ablate_fusion(
    train_set: SplitArrays,
    test_set: SplitArrays,
    variant: str,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    k: int = 16,
    model_seed: int = 0,
) -> MetricsReport:
    model = build_model(net_cfg, "all", variant, k, model_seed)
    train(model, train_set, None, train_cfg)
    return evaluate(model, test_set, train_cfg.eval_batch_size)


def down_up_nearest(images: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsample by ``factor`` then upsample back."""
    if factor == 1:
        return images
    h, w = images.shape[-2:]
    if h // factor < 1 or w // factor < 1:
        raise ValueError(f"scale 1/{factor} leaves less than one pixel of {h}x{w}")
    small = images[..., ::factor, ::factor][..., : h // factor, : w // factor]
    return np.repeat(np.repeat(small, factor, axis=-2), factor, axis=-1)


@dataclass
class SweepRow:
    factor: int
    report: Optional[MetricsReport]
    note: str = ""

    @property
    def label(self) -> str:
        return "1" if self.factor == 1 else f"1/{self.factor}"


def resolution_sweep(model: Module, arrays: SplitArrays, factors=RESOLUTION_SCALES,
                     batch_size: int = 16) -> list[SweepRow]:
    """Evaluate with the RGB input degraded at each scale; echoes untouched."""
    rows = []
    h = arrays.images.shape[-1]
    for f in factors:
        if h // f < 1:
            rows.append(SweepRow(f, None, f"skipped: {h}px image has no pixels at 1/{f}"))
            continue
        rep = evaluate(model, arrays, batch_size, image_transform=lambda x, f=f: down_up_nearest(x, f))
        rows.append(SweepRow(f, rep))
    return rows


def report_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Fixed-width text table of reports."""
    head = f"{'':>8} {'rmse':>9} {'rel':>9} {'log10':>9} {'d1':>7} {'d2':>7} {'d3':>7} {'n_valid':>8}"
    lines = [head]
    for label, r in rows:
        lines.append(
            f"{label:>8} {r.rmse:9.4f} {r.rel:9.4f} {r.log10:9.4f} {r.delta1:7.4f} {r.delta2:7.4f} "
            f"{r.delta3:7.4f} {r.n_valid:8d}"
        )
    return "\n".join(lines)
