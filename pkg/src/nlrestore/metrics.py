"""Evaluation metrics: log-spectral distance, ramp-response MSE and SDR."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .distortions import input_sdr
from .dsp import StftConfig, stft

DB_FLOOR = -120.0


@dataclass(frozen=True)
class RampSpec:
    """Linear ramp of ``points`` samples over [-3 sigma_data, 3 sigma_data]."""

    sigma_data: float
    points: int = 1000

    def __post_init__(self):
        if self.points < 2:
            raise ValueError(f"ramp needs at least 2 points, got {self.points}")
        if not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")

    def ramp(self) -> np.ndarray:
        return np.linspace(-3 * self.sigma_data, 3 * self.sigma_data, self.points)


def _power_pair(reference, estimate, cfg):
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    return np.abs(stft(ref, cfg).data) ** 2, np.abs(stft(est, cfg).data) ** 2


def lsd(reference, estimate, cfg: StftConfig = StftConfig(), epsilon: float = 1e-10) -> float:
    """Mean over all (frame, bin) of the squared log10 power difference."""
    p, p_hat = _power_pair(reference, estimate, cfg)
    d = np.log10(p + epsilon) - np.log10(p_hat + epsilon)
    return float(np.mean(d * d))


def lsd_db(reference, estimate, cfg: StftConfig = StftConfig(), epsilon: float = 1e-10) -> float:
    """Conventional LSD in dB: per-frame RMS of 10*log10 power differences, averaged over frames."""
    p, p_hat = _power_pair(reference, estimate, cfg)
    d = 10.0 * (np.log10(p + epsilon) - np.log10(p_hat + epsilon))
    return float(np.mean(np.sqrt(np.mean(d * d, axis=-1))))


def to_db(value: float) -> float:
    if value <= 0:
        return DB_FLOOR
    return float(max(DB_FLOOR, 10.0 * np.log10(value)))


@dataclass(frozen=True)
class RampResult:
    mse: float
    db: float
    flipped: bool

    def __iter__(self):
        # unpacks as (linear, dB) like a plain pair
        return iter((self.mse, self.db))


def rr_mse(true_op, est_op, spec: RampSpec) -> RampResult:
    """Ramp-response MSE between two operators, forgiving a global sign flip.

    A blind run may return the negated signal -x, in which case the estimated
    map satisfies est(u) = true(-u). The flipped estimate is therefore
    r -> est_op(-r); the smaller of the two errors is reported together with
    which branch won.
    """
    r = spec.ramp()
    target = np.asarray(true_op(r), dtype=np.float64)
    direct = float(np.mean((target - est_op(r)) ** 2))
    flipped = float(np.mean((target - est_op(-r)) ** 2))
    if flipped < direct:
        return RampResult(flipped, to_db(flipped), True)
    return RampResult(direct, to_db(direct), False)


def waveform_sdr(reference, estimate) -> float:
    """SDR of ``estimate`` against ``reference`` in dB (``inf`` if identical)."""
    return input_sdr(reference, estimate)


def write_metrics_csv(path, rows) -> None:
    """Rows of (file, metric, variant, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "metric", "variant", "value"])
        for row in rows:
            writer.writerow(row)
