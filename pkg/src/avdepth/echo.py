"""First-order analytic echoes: each valid pixel reflects the pulse once.

The received signal is the emitted pulse plus one delayed, attenuated copy per
reflecting surface element::

    y(t) = x(t) + sum_i a_i * x(t - t_i),     t_i = 2 d_i / v_s

Binaural channels differ only by an interaural time offset derived from the
pixel's azimuth inside a 90 degree horizontal field of view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import SpectrogramConfig, Waveform, convolve

SPEED_OF_SOUND = 343.0
FIELD_OF_VIEW_DEG = 90.0


class EmptySceneError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    name: str
    reflection: float
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if not 0.0 <= self.reflection <= 1.0:
            raise ValueError(f"{self.name}: reflection coefficient {self.reflection} outside [0, 1]")


DEFAULT_MATERIALS = (
    Material("plaster-wall", 0.85, (0.90, 0.88, 0.82)),
    Material("fabric", 0.15, (0.70, 0.20, 0.25)),
    Material("wood", 0.55, (0.55, 0.36, 0.18)),
    Material("metal", 0.90, (0.45, 0.55, 0.70)),
)


@dataclass
class Scene:
    """Depth in meters (0 marks a missing pixel) and per-pixel material index.

    Arrays are ``[rows, cols]``; column index drives azimuth.
    """

    depth: np.ndarray
    materials: np.ndarray
    material_table: tuple[Material, ...] = DEFAULT_MATERIALS
    speed_of_sound: float = SPEED_OF_SOUND
    seed: int | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.materials = np.asarray(self.materials, dtype=np.int64)
        if self.depth.shape != self.materials.shape:
            raise ValueError(f"depth {self.depth.shape} and materials {self.materials.shape} differ")
        if (self.depth < 0).any():
            raise ValueError("negative depth")
        if self.materials.min() < 0 or self.materials.max() >= len(self.material_table):
            raise ValueError("material index outside the material table")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def reflection_map(self) -> np.ndarray:
        coeffs = np.array([m.reflection for m in self.material_table])
        return coeffs[self.materials]


@dataclass
class Rir:
    taps: tuple[np.ndarray, np.ndarray]
    sample_rate: int
    includes_direct: bool = True
    meta: dict = field(default_factory=dict)

    def as_array(self) -> np.ndarray:
        return np.stack(self.taps)


def pixel_azimuth(n_cols: int, fov_deg: float = FIELD_OF_VIEW_DEG) -> np.ndarray:
    """Azimuth in radians per column, linear from -fov/2 (left) to +fov/2."""
    if n_cols == 1:
        return np.zeros(1)
    return np.deg2rad((np.arange(n_cols) / (n_cols - 1) - 0.5) * fov_deg)


def tap_lags(scene: Scene, sample_rate: int, mic_baseline_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-sample (left, right) lags for every valid pixel, row-major order."""
    rows, cols = np.nonzero(scene.valid)
    d = scene.depth[rows, cols]
    az = pixel_azimuth(scene.depth.shape[1])[cols]
    v = scene.speed_of_sound
    itd = 0.5 * mic_baseline_m * np.sin(az) / v
    base = 2.0 * d / v
    left = np.rint(sample_rate * (base + itd)).astype(np.int64)
    right = np.rint(sample_rate * (base - itd)).astype(np.int64)
    return np.maximum(left, 0), np.maximum(right, 0)


def synthesize_rir(
    scene: Scene,
    sample_rate: int,
    mic_baseline_m: float = 0.2,
    include_direct: bool = True,
    distance_falloff: bool = False,
) -> Rir:
    """Binaural first-order impulse response of ``scene``.

    Every valid pixel adds ``a_i / n_valid`` at its round-trip lag (optionally
    scaled by ``1 / max(d, 0.1)``). A unit tap at lag 0 models the emitted
    pulse reaching the microphones directly.
    """
    if mic_baseline_m < 0:
        raise ValueError("mic baseline must be non-negative")
    valid = scene.valid
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptySceneError("scene has no valid depth pixels")
    left, right = tap_lags(scene, sample_rate, mic_baseline_m)
    amp = scene.reflection_map()[valid] / n_valid
    if distance_falloff:
        amp = amp / np.maximum(scene.depth[valid], 0.1)
    length = int(max(left.max(), right.max())) + 1
    taps = []
    for lags in (left, right):
        h = np.bincount(lags, weights=amp, minlength=length).astype(np.float64)
        if include_direct:
            h[0] += 1.0
        taps.append(h)
    return Rir((taps[0], taps[1]), sample_rate, include_direct, {"n_valid": n_valid})


def simulate_echo(
    scene: Scene,
    pulse: Waveform,
    cfg: SpectrogramConfig,
    mic_baseline_m: float = 0.2,
    include_direct: bool = True,
    distance_falloff: bool = False,
) -> Waveform:
    """Stereo echo of ``pulse`` truncated (or zero-padded) to ``cfg.duration_ms``."""
    if pulse.channels != 1:
        raise ValueError("pulse must be mono")
    if pulse.sample_rate != cfg.sample_rate:
        raise ValueError(f"pulse rate {pulse.sample_rate} != config rate {cfg.sample_rate}")
    rir = synthesize_rir(scene, cfg.sample_rate, mic_baseline_m, include_direct, distance_falloff)
    return convolve(pulse, rir, length=cfg.n_samples)

