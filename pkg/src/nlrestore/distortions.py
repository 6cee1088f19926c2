"""Ground-truth memoryless nonlinearities and SDR-targeted calibration."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KINDS = ("hard_clip", "soft_clip", "wavefold", "quantize", "half_wave_rectify")
THRESHOLD_KINDS = ("hard_clip", "soft_clip", "wavefold")


@dataclass(frozen=True)
class DistortionSpec:
    """Parameters of one ground-truth nonlinearity.

    ``threshold`` is used by the clip and fold kinds, ``hardness`` only by
    ``soft_clip`` and ``levels`` only by ``quantize``.
    """

    kind: str
    threshold: float = 1.0
    hardness: float = 0.0
    levels: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in THRESHOLD_KINDS and not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if not 0.0 <= self.hardness <= 1.0:
            raise ValueError(f"hardness must lie in [0, 1], got {self.hardness}")
        if int(self.levels) != self.levels or self.levels < 2:
            raise ValueError(f"levels must be an integer >= 2, got {self.levels}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DistortionSpec:
        return cls(**{k: d[k] for k in ("kind", "threshold", "hardness", "levels") if k in d})

    def __call__(self, x) -> np.ndarray:
        return apply_distortion(x, self)

    def vjp_input(self, x, upstream) -> np.ndarray:
        return np.asarray(upstream, dtype=np.float64) * distortion_derivative(x, self)


def _quantize(x: np.ndarray, levels: int) -> np.ndarray:
    step = 2.0 / (levels - 1)
    # index of the nearest level measured from -1; ties go toward zero
    pos = (np.clip(x, -1.0, 1.0) + 1.0) / step
    lower = np.floor(pos)
    frac = pos - lower
    lower_val = -1.0 + lower * step
    upper_val = lower_val + step
    tie = np.isclose(frac, 0.5, rtol=0.0, atol=1e-12)
    toward_zero = np.where(np.abs(lower_val) <= np.abs(upper_val), lower_val, upper_val)
    nearest = np.where(frac < 0.5, lower_val, upper_val)
    out = np.where(tie, toward_zero, nearest)
    return np.clip(out, -1.0, 1.0)


def _wavefold(x: np.ndarray, c: float) -> np.ndarray:
    # closed form of repeated reflection about +-c (a triangle wave of period 4c)
    t = np.mod(x + c, 4.0 * c)
    return c - np.abs(t - 2.0 * c)


def apply_distortion(x, spec: DistortionSpec) -> np.ndarray:
    """Apply the nonlinearity sample by sample."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    c = spec.threshold
    if spec.kind == "hard_clip":
        return np.clip(x, -c, c)
    if spec.kind == "soft_clip":
        # r=0: c*tanh(x/c); r=1: hard clip
        r = spec.hardness
        return (1.0 - r) * c * np.tanh(x / c) + r * np.clip(x, -c, c)
    if spec.kind == "wavefold":
        return _wavefold(x, c)
    if spec.kind == "quantize":
        return _quantize(x, int(spec.levels))
    return np.maximum(x, 0.0)


def distortion_derivative(x, spec: DistortionSpec) -> np.ndarray:
    """Pointwise derivative of the nonlinearity (0 at kinks and jumps)."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    c = spec.threshold
    inside = (np.abs(x) < c).astype(np.float64)
    if spec.kind == "hard_clip":
        return inside
    if spec.kind == "soft_clip":
        r = spec.hardness
        return (1.0 - r) / np.cosh(x / c) ** 2 + r * inside
    if spec.kind == "wavefold":
        t = np.mod(x + c, 4.0 * c)
        return np.where(t < 2.0 * c, 1.0, -1.0)
    if spec.kind == "quantize":
        return np.zeros_like(x)
    return (x > 0).astype(np.float64)


def input_sdr(x, y) -> float:
    """Signal-to-distortion ratio 10*log10(|x|^2 / |x - y|^2) in dB.

    Returns ``inf`` when ``y`` equals ``x``.
    """
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    num = float(np.sum(x * x))
    if num == 0.0:
        raise ValueError("reference signal has zero energy")
    den = float(np.sum((x - y) ** 2))
    if den == 0.0:
        return float("inf")
    return float(10.0 * np.log10(num / den))


def solve_threshold_for_sdr(
    x,
    kind: str,
    target_sdr: float,
    hardness: float = 0.0,
    tol: float = 0.01,
    max_iter: int = 100,
) -> DistortionSpec:
    """Bisect the threshold so that the distortion reaches ``target_sdr`` dB.

    Only the threshold kinds are supported. For wavefolding the SDR is not
    monotone in the threshold everywhere, so the bracket search may settle on
    one of several solutions.
    """
    if kind not in THRESHOLD_KINDS:
        raise ValueError(f"{kind!r} has no threshold to calibrate; supported: {THRESHOLD_KINDS}")
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        raise ValueError("cannot calibrate on an all-zero signal")

    def sdr_at(c):
        return input_sdr(x, apply_distortion(x, DistortionSpec(kind, c, hardness)))

    lo = peak * 1e-9
    if kind == "soft_clip" and hardness < 1.0:
        # tanh never stops distorting; grow the bracket until the target is passed
        hi = peak
        while sdr_at(hi) < target_sdr:
            hi *= 2.0
            if hi > peak * 1e6:
                raise ValueError(f"target SDR {target_sdr} dB not reachable")
    else:
        hi = peak
        # at c >= max|x| clipping is a no-op, so any finite target is only
        # reachable strictly below the peak
        if not np.isfinite(target_sdr) or sdr_at(hi * (1 - 1e-12)) < target_sdr:
            raise ValueError(f"target SDR {target_sdr} dB is above the achievable range for {kind} on this signal")
    if sdr_at(lo) > target_sdr:
        raise ValueError(f"target SDR {target_sdr} dB is below the achievable range for {kind}")

    c = 0.5 * (lo + hi)
    for _ in range(max_iter):
        c = 0.5 * (lo + hi)
        s = sdr_at(c)
        if abs(s - target_sdr) < tol:
            break
        if s < target_sdr:
            lo = c
        else:
            hi = c
    return DistortionSpec(kind, c, hardness)
