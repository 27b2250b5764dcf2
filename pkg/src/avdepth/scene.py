"""Procedural rooms: a back wall, a few occluding boxes, a pseudo-RGB render
and the matching binaural echo and spectrogram."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import REPLICA, Spectrogram, SpectrogramConfig, Waveform, default_pulse, stft_magnitude
from .echo import DEFAULT_MATERIALS, Material, Scene, simulate_echo
from .formats import SAMPLE_MAGIC, FormatError, atomic_write, pack_sections, unpack_sections

logger = logging.getLogger(__name__)

INVALID_FRACTION = 0.01
SPLITS = ("train", "val", "test")


@dataclass
class DatasetConfig:
    image_size: int = 32
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    depth_range: tuple[float, float] = (0.5, 10.0)
    material_table: tuple[Material, ...] = DEFAULT_MATERIALS
    spectro: SpectrogramConfig = REPLICA
    mic_baseline_m: float = 0.2
    seed: int = 0
    furniture: tuple[int, int] = (2, 6)
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.depth_range[0] <= 0 or self.depth_range[0] >= self.depth_range[1]:
            raise ValueError(f"bad depth range {self.depth_range}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_text(self) -> str:
        s = self.spectro
        lines = [
            f"image_size={self.image_size}",
            f"n_train={self.n_train}",
            f"n_val={self.n_val}",
            f"n_test={self.n_test}",
            f"depth_min={self.depth_range[0]!r}",
            f"depth_max={self.depth_range[1]!r}",
            f"sample_rate={s.sample_rate}",
            f"window_len={s.window_len}",
            f"hop_len={s.hop_len}",
            f"n_fft={s.n_fft}",
            f"duration_ms={s.duration_ms!r}",
            f"mic_baseline_m={self.mic_baseline_m!r}",
            f"seed={self.seed}",
            f"furniture_min={self.furniture[0]}",
            f"furniture_max={self.furniture[1]}",
            f"noise_sigma={self.noise_sigma!r}",
        ]
        for i, m in enumerate(self.material_table):
            lines.append(f"material.{i}={m.name},{m.reflection!r},{','.join(repr(c) for c in m.albedo)}")
        return "\n".join(lines) + "\n"


@dataclass
class RenderedSample:
    image: np.ndarray  # [3, H, W]
    depth: np.ndarray  # [H, W]
    materials: np.ndarray  # [H, W]
    echo: Waveform
    spectrogram: Spectrogram
    seed: int


def generate_scene(seed: int, cfg: DatasetConfig) -> Scene:
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    d_min, d_max = cfg.depth_range
    wall = rng.uniform(0.6 * d_max, d_max)
    depth = np.full((n, n), wall)
    materials = np.zeros((n, n), dtype=np.int64)
    lo, hi = cfg.furniture
    n_boxes = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    boxes = []
    for _ in range(n_boxes):
        h = int(rng.integers(max(1, n // 8), n // 2 + 1))
        w = int(rng.integers(max(1, n // 8), n // 2 + 1))
        r0 = int(rng.integers(0, n - h + 1))
        c0 = int(rng.integers(0, n - w + 1))
        d = rng.uniform(d_min, wall)
        mat = int(rng.integers(0, len(cfg.material_table)))
        boxes.append((d, r0, c0, h, w, mat))
    # painter's order: far boxes first so nearer ones overwrite them
    for d, r0, c0, h, w, mat in sorted(boxes, key=lambda b: -b[0]):
        depth[r0 : r0 + h, c0 : c0 + w] = d
        materials[r0 : r0 + h, c0 : c0 + w] = mat
    n_invalid = int(round(INVALID_FRACTION * n * n))
    if n_invalid:
        idx = rng.choice(n * n, size=n_invalid, replace=False)
        depth.reshape(-1)[idx] = 0.0
    return Scene(depth, materials, tuple(cfg.material_table), seed=seed)


def shading(depth: np.ndarray) -> np.ndarray:
    return np.clip(1.0 / (1.0 + 0.25 * depth), 0.0, 1.0)


def render_image(scene: Scene, noise_sigma: float = 0.02, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``albedo * shading + noise`` per pixel, black where depth is missing."""
    albedo = np.array([m.albedo for m in scene.material_table])[scene.materials]  # H, W, 3
    img = albedo.transpose(2, 0, 1) * shading(scene.depth)[None]
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(None if scene.seed is None else [scene.seed, 1])
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img[:, ~scene.valid] = 0.0
    return img


def render_sample(seed: int, cfg: DatasetConfig, pulse: Optional[Waveform] = None) -> RenderedSample:
    scene = generate_scene(seed, cfg)
    image = render_image(scene, cfg.noise_sigma)
    pulse = pulse if pulse is not None else default_pulse(cfg.spectro.sample_rate)
    echo = simulate_echo(scene, pulse, cfg.spectro, cfg.mic_baseline_m)
    spec = stft_magnitude(echo, cfg.spectro)
    return RenderedSample(image, scene.depth, scene.materials, echo, spec, seed)


def split_seeds(cfg: DatasetConfig) -> dict[str, list[int]]:
    """Pairwise-distinct per-sample seeds for every split."""
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_train + cfg.n_val + cfg.n_test
    seen: set[int] = set()
    seeds: list[int] = []
    while len(seeds) < total:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    out, pos = {}, 0
    for split, n in cfg.split_sizes().items():
        out[split] = seeds[pos : pos + n]
        pos += n
    return out


# ----------------------------------------------------------------------------
# serialization


def encode_sample(sample: RenderedSample) -> bytes:
    _, h, w = sample.image.shape
    _, p, q = sample.spectrogram.values.shape
    n_wav = sample.echo.samples.shape[1]
    header = struct.pack("<IIIIIIQ", w, h, p, q, sample.echo.sample_rate, n_wav, sample.seed)
    return pack_sections(
        SAMPLE_MAGIC,
        [
            (b"HDR ", header),
            (b"IMG ", sample.image.astype("<f4").tobytes()),
            (b"DEP ", sample.depth.astype("<f4").tobytes()),
            (b"MAT ", sample.materials.astype("<u2").tobytes()),
            (b"WAV ", sample.echo.samples.astype("<f4").tobytes()),
            (b"SPC ", sample.spectrogram.values.astype("<f4").tobytes()),
        ],
    )


def decode_sample(blob: bytes, cfg: Optional[SpectrogramConfig] = None) -> RenderedSample:
    sections = dict(unpack_sections(blob, SAMPLE_MAGIC))
    missing = {b"HDR ", b"IMG ", b"DEP ", b"MAT ", b"WAV ", b"SPC "} - set(sections)
    if missing:
        raise FormatError(f"sample missing sections {sorted(missing)}")
    w, h, p, q, rate, n_wav, seed = struct.unpack("<IIIIIIQ", sections[b"HDR "])

    def arr(tag, dtype, shape):
        data = np.frombuffer(sections[tag], dtype=dtype)
        if data.size != int(np.prod(shape)):
            raise FormatError(f"section {tag!r}: {data.size} values, expected shape {shape}")
        return data.reshape(shape).copy()

    image = arr(b"IMG ", "<f4", (3, h, w))
    depth = arr(b"DEP ", "<f4", (h, w))
    mats = arr(b"MAT ", "<u2", (h, w))
    wav = arr(b"WAV ", "<f4", (2, n_wav))
    spc = arr(b"SPC ", "<f4", (2, p, q))
    return RenderedSample(image, depth, mats, Waveform(wav, rate), Spectrogram(spc, cfg), seed)


def build_dataset(cfg: DatasetConfig, out_dir: str | Path) -> Path:
    """Render every split into ``out_dir`` with an ``index.txt`` and ``manifest.txt``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    pulse = default_pulse(cfg.spectro.sample_rate)
    index_lines = []
    for split, seeds in split_seeds(cfg).items():
        for i, seed in enumerate(seeds):
            name = f"{split}_{i:05d}.avd"
            sample = render_sample(seed, cfg, pulse)
            path = out / name
            try:
                atomic_write(path, encode_sample(sample))
            except OSError as exc:
                raise OSError(f"failed writing sample {path}: {exc}") from exc
            index_lines.append(f"{split} {name} {seed}")
        logger.info("wrote %d %s samples", len(seeds), split)
    atomic_write(out / "index.txt", ("\n".join(index_lines) + "\n").encode())
    atomic_write(out / "manifest.txt", cfg.to_text().encode())
    return out


def read_index(data_dir: str | Path) -> list[tuple[str, str, int]]:
    rows = []
    for line in (Path(data_dir) / "index.txt").read_text().splitlines():
        if line.strip():
            split, name, seed = line.split()
            rows.append((split, name, int(seed)))
    return rows


def read_manifest(data_dir: str | Path) -> dict[str, str]:
    out = {}
    for line in (Path(data_dir) / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def spectro_from_manifest(manifest: dict[str, str]) -> SpectrogramConfig:
    return SpectrogramConfig(
        window_len=int(manifest["window_len"]),
        hop_len=int(manifest["hop_len"]),
        n_fft=int(manifest["n_fft"]),
        sample_rate=int(manifest["sample_rate"]),
        duration_ms=float(manifest["duration_ms"]),
    )


@dataclass
class SplitArrays:
    """A split held in memory, float32 as stored on disk."""

    spectrograms: np.ndarray  # [n, 2, P, Q]
    images: np.ndarray  # [n, 3, H, W]
    depths: np.ndarray  # [n, 1, H, W]
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.depths.shape[0]

    def subset(self, idx) -> "SplitArrays":
        idx = np.asarray(idx)
        return SplitArrays(self.spectrograms[idx], self.images[idx], self.depths[idx], [self.seeds[i] for i in idx])


def load_split(data_dir: str | Path, split: str) -> SplitArrays:
    data_dir = Path(data_dir)
    rows = [r for r in read_index(data_dir) if r[0] == split]
    if not rows:
        raise ValueError(f"split {split!r} is empty in {data_dir}")
    samples = [decode_sample((data_dir / name).read_bytes()) for _, name, _ in rows]
    return SplitArrays(
        np.stack([s.spectrogram.values for s in samples]),
        np.stack([s.image for s in samples]),
        np.stack([s.depth for s in samples])[:, None],
        [s.seed for s in samples],
    )


def samples_to_arrays(samples: list[RenderedSample]) -> SplitArrays:
    """In-memory equivalent of :func:`load_split` (values rounded to float32)."""
    return SplitArrays(
        np.stack([s.spectrogram.values for s in samples]).astype(np.float32),
        np.stack([s.image for s in samples]).astype(np.float32),
        np.stack([s.depth for s in samples])[:, None].astype(np.float32),
        [s.seed for s in samples],
    )
