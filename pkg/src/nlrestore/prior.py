"""Denoiser contract, Tweedie score and an exact stationary Gaussian prior."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class Denoiser(Protocol):
    """Anything that maps (noisy signal, noise level) to a clean estimate.

    ``adjoint`` is the vector-Jacobian product of ``denoise`` with respect to
    ``x_noisy``. Implementations must be deterministic and safe for
    concurrent read-only use.
    """

    def denoise(self, x_noisy: np.ndarray, sigma: float) -> np.ndarray: ...

    def adjoint(self, x_noisy: np.ndarray, sigma: float, upstream: np.ndarray) -> np.ndarray: ...


def tweedie_score(denoised, x_noisy, sigma: float) -> np.ndarray:
    """Score of the noisy marginal, (D(x) - x) / sigma^2."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    denoised = np.asarray(denoised, dtype=np.float64)
    x_noisy = np.asarray(x_noisy, dtype=np.float64)
    if denoised.shape != x_noisy.shape:
        raise ValueError(f"shape mismatch: {denoised.shape} vs {x_noisy.shape}")
    return (denoised - x_noisy) / sigma**2


# preconditioning of a network denoiser D = c_skip x + c_out F(c_in x, c_noise)


def c_skip(sigma, sigma_data):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data):
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data):
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(sigma) / 4.0


def loss_weight(sigma, sigma_data):
    """lambda(sigma) = 1 / c_out^2, which makes the initial loss roughly 1."""
    return 1.0 / c_out(sigma, sigma_data) ** 2


@dataclass(frozen=True)
class GaussianPrior:
    """Stationary Gaussian prior N(mean, C) with circulant covariance C.

    ``spectrum`` holds the eigenvalues of C on the ``rfft`` frequency grid
    (length L // 2 + 1) or is a single scalar variance (white prior, any
    length). The optimal denoiser is the Wiener filter
    mean + C (C + sigma^2 I)^-1 (x - mean), applied per frequency.
    """

    spectrum: np.ndarray
    mean: np.ndarray | float = 0.0
    length: int | None = None

    def __post_init__(self):
        s = np.array(self.spectrum, dtype=np.float64)
        if s.ndim > 1 or np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("prior spectrum must be strictly positive and finite")
        if s.ndim == 1:
            if self.length is None:
                raise ValueError("a spectral prior needs its signal length")
            if s.size != self.length // 2 + 1:
                raise ValueError(f"spectrum has {s.size} bins, expected {self.length // 2 + 1}")
        object.__setattr__(self, "spectrum", s)
        mean = np.array(self.mean, dtype=np.float64)
        if mean.ndim == 1 and self.length is not None and mean.size != self.length:
            raise ValueError("mean length does not match prior length")
        object.__setattr__(self, "mean", mean)

    @property
    def is_scalar(self) -> bool:
        return self.spectrum.ndim == 0

    @property
    def variance(self) -> float:
        """Per-sample marginal variance of clean draws."""
        if self.is_scalar:
            return float(self.spectrum)
        n = self.length
        w = np.full(self.spectrum.size, 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        return float(np.sum(w * self.spectrum) / n)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if not self.is_scalar and x.shape[-1] != self.length:
            raise ValueError(f"prior is defined for length {self.length}, got {x.shape[-1]}")
        return x

    def _apply(self, x, gain):
        if self.is_scalar:
            return gain * x
        return np.fft.irfft(gain * np.fft.rfft(x, axis=-1), n=self.length, axis=-1)

    def gain(self, sigma: float):
        return self.spectrum / (self.spectrum + sigma**2)

    def denoise(self, x_noisy, sigma: float) -> np.ndarray:
        x = self._check(x_noisy)
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        if sigma == 0:
            return x.copy()
        return self.mean + self._apply(x - self.mean, self.gain(sigma))

    def adjoint(self, x_noisy, sigma: float, upstream) -> np.ndarray:
        """The Wiener filter is symmetric, so its adjoint is itself (minus the mean)."""
        self._check(x_noisy)
        u = self._check(upstream)
        if sigma == 0:
            return u.copy()
        return self._apply(u, self.gain(sigma))

    def score(self, x, sigma: float) -> np.ndarray:
        """Closed-form score of the noisy marginal N(mean, C + sigma^2 I)."""
        x = self._check(x)
        return -self._apply(x - self.mean, 1.0 / (self.spectrum + sigma**2))

    def sample(self, rng=None, n: int | None = None, sigma: float = 0.0) -> np.ndarray:
        """Draw from N(mean, C + sigma^2 I); shape (n, L) if ``n`` is given."""
        if self.is_scalar:
            raise ValueError("sampling a scalar prior needs an explicit length; build it with a spectrum")
        rng = np.random.default_rng(rng)
        shape = (self.length,) if n is None else (n, self.length)
        white = rng.standard_normal(shape)
        return self.mean + self._apply(white, np.sqrt(self.spectrum + sigma**2))


def sinusoid_mixture_prior(
    length: int,
    sample_rate: float = 16000.0,
    freqs=(220.0, 350.0, 560.0),
    bandwidth: float = 15.0,
    sigma_data: float = 0.05,
    floor: float = 1e-4,
) -> GaussianPrior:
    """Stationary Gaussian prior whose power sits in narrow bumps around ``freqs``.

    Draws look like a mixture of slowly modulated sinusoids. The spectrum is a
    sum of Gaussian bumps of standard deviation ``bandwidth`` Hz plus a
    relative ``floor``, scaled so the per-sample standard deviation equals
    ``sigma_data``.
    """
    f = np.fft.rfftfreq(length, d=1.0 / sample_rate)
    shape = np.zeros_like(f)
    for f0 in freqs:
        shape += np.exp(-0.5 * ((f - f0) / bandwidth) ** 2)
    shape = shape / shape.max() + floor
    raw = GaussianPrior(shape, 0.0, length)
    return GaussianPrior(shape * sigma_data**2 / raw.variance, 0.0, length)
