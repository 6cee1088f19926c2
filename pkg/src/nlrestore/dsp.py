"""Waveform container, STFT/ISTFT and the compressed-spectrogram cost.

All numerics run in float64. The cost compares two signals through STFT
spectrograms whose magnitudes are raised to the power 2/3 while the phase is
kept, and :func:`cost_adjoint` returns its exact gradient with respect to the
second argument.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window

COMPRESSION = 2.0 / 3.0


@dataclass(frozen=True)
class Signal:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"Signal must be mono (1-D), got shape {x.shape}")
        if x.size < 1:
            raise ValueError("Signal must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("Signal contains NaN or Inf")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 256
    fft_size: int = 1024
    window_kind: str = "hann"
    center_padding: bool = True

    def __post_init__(self):
        if not 0 < self.hop <= self.window_length <= self.fft_size:
            raise ValueError(
                "StftConfig requires 0 < hop <= window_length <= fft_size, got "
                f"hop={self.hop}, window_length={self.window_length}, fft_size={self.fft_size}"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        """Analysis window zero-padded (centered) to ``fft_size``."""
        return _padded_window(self.window_kind, self.window_length, self.fft_size).copy()


@lru_cache(maxsize=32)
def _padded_window(kind: str, length: int, fft_size: int) -> np.ndarray:
    w = get_window(kind, length, fftbins=True).astype(np.float64)
    out = np.zeros(fft_size)
    start = (fft_size - length) // 2
    out[start : start + length] = w
    return out


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames of shape (M, K) plus the metadata to invert them."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int = 0

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def to_csv(self, path) -> None:
        """Write one ``frame,bin,real,imag`` row per element."""
        m, k = np.meshgrid(np.arange(self.data.shape[0]), np.arange(self.data.shape[1]), indexing="ij")
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "bin", "real", "imag"])
            for row in zip(m.ravel(), k.ravel(), self.data.real.ravel(), self.data.imag.ravel()):
                writer.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3]))])


def _layout(length: int, cfg: StftConfig) -> tuple[int, int, int]:
    """Return (left_pad, right_pad, n_frames) for a signal of ``length`` samples."""
    left = cfg.fft_size // 2 if cfg.center_padding else 0
    if not cfg.center_padding and length < cfg.fft_size:
        raise ValueError(
            f"signal of {length} samples is shorter than one frame ({cfg.fft_size}); "
            "enable center_padding or use a longer signal"
        )
    total = length + 2 * left
    n_frames = 1 + max(0, -(-(total - cfg.fft_size) // cfg.hop))
    right = (n_frames - 1) * cfg.hop + cfg.fft_size - length - left
    return left, right, n_frames


def _as_array(x) -> np.ndarray:
    if isinstance(x, Signal):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    left, right, n_frames = _layout(x.size, cfg)
    xp = np.pad(x, (left, right))
    view = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[:: cfg.hop]
    return view[:n_frames]


def stft(signal, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Short-time Fourier transform with zero padding.

    With ``center_padding`` the signal is padded by ``fft_size // 2`` on the
    left, and on the right up to a whole number of hops, so every sample is
    covered by full frames.
    """
    x = _as_array(signal)
    if not np.all(np.isfinite(x)):
        raise ValueError("stft input contains NaN or Inf")
    frames = _frames(x, cfg) * cfg.window()
    return Spectrogram(np.fft.rfft(frames, axis=-1), cfg, x.size)


def _overlap_add(frames: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    left, right, n_frames = _layout(length, cfg)
    out = np.zeros(length + left + right)
    for m in range(n_frames):
        out[m * cfg.hop : m * cfg.hop + cfg.fft_size] += frames[m]
    return out[left : left + length]


def istft(spec: Spectrogram) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    cfg = spec.config
    w = cfg.window()
    frames = np.fft.irfft(spec.data, n=cfg.fft_size, axis=-1) * w
    num = _overlap_add(frames, cfg, spec.length)
    den = _overlap_add(np.broadcast_to(w * w, frames.shape), cfg, spec.length)
    safe = den > 1e-12
    return np.where(safe, num / np.where(safe, den, 1.0), 0.0)


def stft_adjoint(grad: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Pull a spectrogram-domain gradient back to the time domain.

    ``grad`` holds dC/dRe + 1j*dC/dIm for each (frame, bin) of a real-valued
    cost C; the return value is dC/dx for the real input signal.
    """
    h = np.array(grad, dtype=np.complex128)
    # irfft doubles the non-edge bins; halve them so each bin counts once
    stop = h.shape[-1] - 1 if cfg.fft_size % 2 == 0 else h.shape[-1]
    h[..., 1:stop] *= 0.5
    frames = cfg.fft_size * np.fft.irfft(h, n=cfg.fft_size, axis=-1) * cfg.window()
    return _overlap_add(frames, cfg, length)


def compress_spectrogram(spec):
    """Raise magnitudes to the power 2/3 and keep the phase.

    Accepts a :class:`Spectrogram` or a raw complex array and returns the same
    kind of object.
    """
    if isinstance(spec, Spectrogram):
        return Spectrogram(compress_spectrogram(spec.data), spec.config, spec.length)
    z = np.asarray(spec, dtype=np.complex128)
    mag = np.abs(z)
    # |z|^(2/3) * z/|z| == z * |z|^(-1/3); zero stays zero
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (COMPRESSION - 1.0)
    return z * scale


def _check_pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = _as_array(y)
    y_hat = _as_array(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


class SpectralCost:
    """C(y, .) for a fixed measurement ``y``, caching its compressed spectrogram.

    Calling the object with ``y_hat`` returns ``(cost, dC/dy_hat)``.
    """

    def __init__(self, y, cfg: StftConfig = StftConfig()):
        self.y = _as_array(y)
        self.cfg = cfg
        self.reference = compress_spectrogram(stft(self.y, cfg).data)

    def __call__(self, y_hat) -> tuple[float, np.ndarray]:
        y_hat = _as_array(y_hat)
        if y_hat.shape != self.y.shape:
            raise ValueError(f"length mismatch: {self.y.shape} vs {y_hat.shape}")
        z = stft(y_hat, self.cfg).data
        n_frames = z.shape[0]
        diff = compress_spectrogram(z) - self.reference
        cost = float(np.sum(diff.real**2 + diff.imag**2) / n_frames)

        mag = np.abs(z)
        nz = mag > 0
        zn, dn = z[nz], diff[nz]
        phase2 = (zn / mag[nz]) ** 2
        # Wirtinger form of the gradient, 2 dC/dz* with A(z) = z|z|^(-1/3):
        # (2/M) |z|^(-1/3) [ (5/6) D - (1/6) e^{2i arg z} conj(D) ]
        g = np.zeros_like(z)
        g[nz] = (
            (2.0 / n_frames) * mag[nz] ** (COMPRESSION - 1.0) * ((5.0 / 6.0) * dn - (1.0 / 6.0) * phase2 * np.conj(dn))
        )
        return cost, stft_adjoint(g, self.cfg, y_hat.size)


def cost_and_grad(y, y_hat, cfg: StftConfig = StftConfig()) -> tuple[float, np.ndarray]:
    """Compressed-spectrogram cost and its gradient with respect to ``y_hat``."""
    y, y_hat = _check_pair(y, y_hat)
    return SpectralCost(y, cfg)(y_hat)


def spectral_cost(y, y_hat, cfg: StftConfig = StftConfig()) -> float:
    """C(y, y_hat) = (1/M) sum_{m,k} |S_comp(y) - S_comp(y_hat)|^2.

    Normalised by the number of frames only, not by the number of bins.
    """
    y, y_hat = _check_pair(y, y_hat)
    diff = compress_spectrogram(stft(y, cfg).data) - compress_spectrogram(stft(y_hat, cfg).data)
    return float(np.sum(diff.real**2 + diff.imag**2) / diff.shape[0])


def cost_adjoint(y, y_hat, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Gradient of :func:`spectral_cost` with respect to ``y_hat``.

    Spectrogram elements of ``y_hat`` with exactly zero magnitude contribute a
    zero subgradient.
    """
    return cost_and_grad(y, y_hat, cfg)[1]
