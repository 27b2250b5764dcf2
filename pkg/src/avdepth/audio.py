"""Waveforms, sweep synthesis, linear convolution and the STFT front-end."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile


@dataclass
class Waveform:
    """``samples`` is ``[channels, length]``."""

    samples: np.ndarray
    sample_rate: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] not in (1, 2):
            raise ValueError(f"waveform must have 1 or 2 channels, got {self.samples.shape[0]}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class SpectrogramConfig:
    window_len: int
    hop_len: int
    n_fft: int
    sample_rate: int
    duration_ms: float = 60.0

    def __post_init__(self):
        if self.window_len > self.n_fft:
            raise ValueError(f"window_len {self.window_len} exceeds n_fft {self.n_fft}")
        if self.hop_len < 1:
            raise ValueError("hop_len must be >= 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_ms * self.sample_rate / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def n_frames(self) -> int:
        return self.n_samples // self.hop_len + 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.n_bins, self.n_frames)


REPLICA = SpectrogramConfig(window_len=64, hop_len=16, n_fft=512, sample_rate=44100)
MATTERPORT = SpectrogramConfig(window_len=32, hop_len=8, n_fft=512, sample_rate=16000)
PROFILES = {"replica": REPLICA, "matterport": MATTERPORT}


@dataclass
class Spectrogram:
    """Magnitudes laid out as ``[channel, frequency bin, time frame]``."""

    values: np.ndarray
    config: SpectrogramConfig


def hanning(n: int) -> np.ndarray:
    """Symmetric Hann window."""
    if n <= 0:
        raise ValueError(f"window length must be >= 1, got {n}")
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))


def chirp(duration_s: float, f0: float, f1: float, sample_rate: int) -> Waveform:
    """Linear-frequency sweep from ``f0`` to ``f1`` with unit amplitude.

    Frequencies above Nyquist are clamped; the clamp is reported in
    ``meta["warnings"]``.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    nyquist = sample_rate / 2.0
    notes = []
    if f1 > nyquist:
        notes.append(f"f1={f1:g} Hz exceeds Nyquist {nyquist:g} Hz; clamped")
        f1 = nyquist
    if f0 > f1:
        raise ValueError(f"f0={f0} must not exceed f1={f1}")
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration_s * t * t)
    meta = {"f0": f0, "f1": f1, "warnings": notes}
    if notes:
        warnings.warn(notes[0], RuntimeWarning, stacklevel=2)
    return Waveform(np.sin(phase)[None, :], sample_rate, meta)


def default_pulse(sample_rate: int) -> Waveform:
    """The 3 ms, 20 Hz - 20 kHz sweep used for every simulated echo."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return chirp(0.003, 20.0, 20000.0, sample_rate)


def convolve(signal: Waveform, kernel, length: int | None = None) -> Waveform:
    """Full linear convolution per channel.

    ``kernel`` is an ``[channels, taps]`` array or any object exposing
    ``taps`` (a pair of arrays). A mono signal is broadcast over the kernel's
    channels. With ``length`` the result is truncated or zero-padded to it.
    """
    k = np.atleast_2d(np.asarray(kernel.taps if hasattr(kernel, "taps") else kernel, dtype=np.float64))
    if k.size == 0 or k.shape[1] == 0:
        raise ValueError("empty convolution kernel")
    x = signal.samples
    if x.shape[0] == 1 and k.shape[0] > 1:
        x = np.repeat(x, k.shape[0], axis=0)
    elif k.shape[0] == 1 and x.shape[0] > 1:
        k = np.repeat(k, x.shape[0], axis=0)
    elif x.shape[0] != k.shape[0]:
        raise ValueError(f"channel mismatch: signal {x.shape[0]} vs kernel {k.shape[0]}")
    y = np.stack([np.convolve(xc, kc) for xc, kc in zip(x, k)])
    if length is not None:
        y = fit_length(y, length)
    return Waveform(y, signal.sample_rate)


def fit_length(x: np.ndarray, length: int) -> np.ndarray:
    if x.shape[-1] >= length:
        return x[..., :length].copy()
    pad = [(0, 0)] * (x.ndim - 1) + [(0, length - x.shape[-1])]
    return np.pad(x, pad)


def stft_magnitude(wave: Waveform, cfg: SpectrogramConfig, window: str = "hann") -> Spectrogram:
    """Centered magnitude STFT of a stereo waveform.

    Each channel is reflect-padded by ``n_fft // 2`` on both sides, so frame
    ``t`` is centered on sample ``t * hop_len`` and there are
    ``L // hop_len + 1`` frames. The ``window_len`` window sits centered in
    the ``n_fft`` frame and is zero elsewhere. ``window="ones"`` swaps the
    Hann taper for a rectangle.
    """
    if wave.channels != 2:
        raise ValueError(f"stft_magnitude needs 2 channels, got {wave.channels}")
    if len(wave) != cfg.n_samples:
        raise ValueError(f"waveform has {len(wave)} samples, config expects {cfg.n_samples}")
    if window == "hann":
        w = hanning(cfg.window_len)
    elif window == "ones":
        w = np.ones(cfg.window_len)
    else:
        raise ValueError(f"unknown window {window!r}")
    n_fft, hop = cfg.n_fft, cfg.hop_len
    left = (n_fft - cfg.window_len) // 2
    frame_win = np.zeros(n_fft)
    frame_win[left : left + cfg.window_len] = w
    L = len(wave)
    half = n_fft // 2
    padded = np.pad(wave.samples, ((0, 0), (half, half)), mode="reflect")
    n_frames = L // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft, axis=1)[:, : (n_frames - 1) * hop + 1 : hop]
    spec = np.abs(np.fft.rfft(frames * frame_win, n=n_fft, axis=-1))  # C, Q, P
    return Spectrogram(np.ascontiguousarray(spec.transpose(0, 2, 1)), cfg)


def write_wav(path: str | Path, wave: Waveform) -> None:
    """32-bit float little-endian PCM WAV."""
    wavfile.write(str(path), int(wave.sample_rate), wave.samples.T.astype("<f4"))


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    data = np.asarray(data, dtype=np.float64)
    return Waveform(data.T if data.ndim == 2 else data[None, :], int(rate))
