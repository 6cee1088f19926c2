"""Noise schedule, Euler probability-flow sampler and joint operator estimation.

:func:`blind_restore` alternates, at every noise level, between a few Adam
steps on the operator parameters and one guided Euler step on the signal:

1. denoise the current state,
2. warm-start the operator from the previous level and fit it so that
   ``shaper(denoised)`` matches the measurement under the compressed
   spectrogram cost,
3. push the state along the prior score (Tweedie) plus a normalised
   likelihood gradient of that cost.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dsp import SpectralCost, StftConfig
from .optim import AdamState, adam_step
from .prior import Denoiser, tweedie_score
from .waveshapers import init_shaper

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised when the sampler state stops being finite."""

    def __init__(self, step: int, trace: list):
        super().__init__(f"non-finite sampler state at step {step}")
        self.step = step
        self.trace = trace


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing noise levels sigma_T..sigma_1 followed by a terminal 0."""

    sigmas: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def steps(self) -> int:
        return self.sigmas.size - 1


def karras_schedule(
    steps: int = 50, sigma_min: float = 1e-4, sigma_max: float = 0.5, rho: float = 7.0
) -> NoiseSchedule:
    """sigma_i = (smax^(1/rho) + i/(T-1) (smin^(1/rho) - smax^(1/rho)))^rho, i = 0..T-1, then 0."""
    if steps < 2:
        raise ValueError(f"need at least 2 steps, got {steps}")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    i = np.arange(steps)
    hi, lo = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    sig = (hi + i / (steps - 1) * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    return NoiseSchedule(np.append(sig, 0.0), sigma_min, sigma_max, rho)


@dataclass(frozen=True)
class GuidanceConfig:
    """Hyperparameters of the guided sampler.

    ``churn`` is the total stochasticity S_churn of the EDM stochastic
    sampler; noise is injected only while ``churn_min <= sigma <= churn_max``.
    ``denoiser_vjp`` selects the exact denoiser Jacobian ("exact") or the
    identity approximation ("identity") in the likelihood gradient.
    """

    zeta: float = 0.3
    n_op_iters: int = 20
    op_lr: float = 0.02
    churn: float = 0.0
    churn_min: float = 0.0
    churn_max: float = float("inf")
    churn_noise: float = 1.0
    denoiser_vjp: str = "exact"

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")
        if self.n_op_iters < 0:
            raise ValueError(f"n_op_iters must be >= 0, got {self.n_op_iters}")
        if self.churn < 0:
            raise ValueError(f"churn must be >= 0, got {self.churn}")
        if self.denoiser_vjp not in ("exact", "identity"):
            raise ValueError(f"denoiser_vjp must be 'exact' or 'identity', got {self.denoiser_vjp!r}")


@dataclass
class StepRecord:
    step: int
    sigma: float
    cost: float
    score_norm: float
    residual_norm: float


@dataclass
class RestorationReport:
    restored: np.ndarray
    operator: object
    trace: list = field(default_factory=list)
    operator_history: list = field(default_factory=list)

    def write_trace_csv(self, path) -> None:
        write_trace_csv(path, self.trace)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "sigma", "cost", "score_norm", "residual_norm"])
        for r in trace:
            writer.writerow([r.step, repr(r.sigma), repr(r.cost), repr(r.score_norm), repr(r.residual_norm)])


def warm_init(y, sigma_t: float, seed=None) -> np.ndarray:
    """x_T = y + sigma_T * eps with seeded standard-normal eps."""
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    rng = np.random.default_rng(seed)
    return y + sigma_t * rng.standard_normal(y.shape)


def likelihood_score(
    y,
    x_hat0,
    operator,
    x_tau,
    sigma: float,
    denoiser: Denoiser | None = None,
    zeta: float = 0.3,
    stft_cfg: StftConfig = StftConfig(),
    denoiser_vjp: str = "exact",
) -> tuple[np.ndarray, float]:
    """Normalised likelihood gradient and the cost it was computed from.

    Returns -zeta(sigma) * grad_x C(y, operator(x_hat0)) with
    zeta(sigma) = sqrt(L) * zeta / (sigma * |grad|), i.e. a vector of norm
    sqrt(L) * zeta / sigma pointing downhill. A zero gradient gives a zero
    vector. The gradient chains through ``denoiser.adjoint`` unless
    ``denoiser_vjp`` is "identity" or no denoiser is given. ``y`` may be a
    prepared :class:`~nlrestore.dsp.SpectralCost`.
    """
    x_hat0 = np.asarray(x_hat0, dtype=np.float64)
    cost_fn = y if isinstance(y, SpectralCost) else SpectralCost(y, stft_cfg)
    cost, g_y = cost_fn(operator(x_hat0))
    g = operator.vjp_input(x_hat0, g_y)
    if denoiser is not None and denoiser_vjp == "exact":
        g = denoiser.adjoint(x_tau, sigma, g)
    norm = float(np.linalg.norm(g))
    if norm == 0.0 or zeta == 0.0:
        return np.zeros_like(x_hat0), cost
    return -(np.sqrt(x_hat0.size) * zeta / (sigma * norm)) * g, cost


def _churn_gamma(cfg: GuidanceConfig, sigma: float, steps: int) -> float:
    if cfg.churn <= 0 or not cfg.churn_min <= sigma <= cfg.churn_max:
        return 0.0
    return min(cfg.churn / steps, np.sqrt(2.0) - 1.0)


def _run(
    y,
    x,
    denoiser: Denoiser,
    operator,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    rng: np.random.Generator,
    stft_cfg: StftConfig,
    optimise: bool,
) -> RestorationReport:
    trace, history = [], []
    adam = AdamState.zeros_like(operator.vector, lr=cfg.op_lr) if optimise else None
    sigmas = schedule.sigmas
    steps = schedule.steps
    guided = y is not None and cfg.zeta > 0
    cost_fn = SpectralCost(y, stft_cfg) if y is not None else None

    for i in range(steps):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        gamma = _churn_gamma(cfg, sigma, steps)
        sigma_hat = sigma * (1.0 + gamma)
        if gamma > 0:
            x = x + np.sqrt(sigma_hat**2 - sigma**2) * cfg.churn_noise * rng.standard_normal(x.shape)

        x0 = denoiser.denoise(x, sigma_hat)
        if not np.all(np.isfinite(x0)):
            log.error("denoiser returned non-finite values at step %d (sigma=%g)", i, sigma_hat)
            raise DivergenceError(i, trace)

        if optimise:
            history.append(operator)
            psi = operator.vector
            for _ in range(cfg.n_op_iters):
                _, g_y = cost_fn(operator(x0))
                adam, psi = adam_step(adam, psi, operator.vjp_params(x0, g_y))
                operator = operator.with_vector(psi)

        if guided:
            lik, cost = likelihood_score(
                cost_fn, x0, operator, x, sigma_hat, denoiser, cfg.zeta, stft_cfg, cfg.denoiser_vjp
            )
        else:
            lik = np.zeros_like(x)
            cost = cost_fn(operator(x0))[0] if cost_fn is not None else float("nan")

        score = tweedie_score(x0, x, sigma_hat)
        trace.append(StepRecord(i, sigma_hat, float(cost), float(np.linalg.norm(lik)), float(np.linalg.norm(x - x0))))
        x = x - sigma_hat * (sigma_next - sigma_hat) * (score + lik)
        if not np.all(np.isfinite(x)):
            log.error("sampler diverged at step %d (sigma=%g)", i, sigma_hat)
            raise DivergenceError(i, trace)

    return RestorationReport(x, operator, trace, history)


def blind_restore(
    y,
    denoiser: Denoiser,
    model="ccr",
    schedule: NoiseSchedule | None = None,
    cfg: GuidanceConfig = GuidanceConfig(),
    seed=0,
    stft_cfg: StftConfig = StftConfig(),
) -> RestorationReport:
    """Jointly restore the clean signal and estimate the distortion operator.

    ``model`` is a kind name ("sumtanh", "mlp", "ccr") or an already built
    waveshaper to start from. Returns the final state and operator.
    """
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("measurement contains NaN or Inf")
    schedule = schedule or karras_schedule()
    rng = np.random.default_rng(seed)
    operator = init_shaper(model, y, rng) if isinstance(model, str) else model
    x = warm_init(y, schedule.sigmas[0], rng)
    return _run(y, x, denoiser, operator, schedule, cfg, rng, stft_cfg, optimise=True)


def informed_restore(
    y,
    denoiser: Denoiser,
    true_operator,
    schedule: NoiseSchedule | None = None,
    cfg: GuidanceConfig = GuidanceConfig(),
    seed=0,
    stft_cfg: StftConfig = StftConfig(),
) -> RestorationReport:
    """Restoration with a known operator (anything with ``__call__`` and ``vjp_input``)."""
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("measurement contains NaN or Inf")
    schedule = schedule or karras_schedule()
    rng = np.random.default_rng(seed)
    x = warm_init(y, schedule.sigmas[0], rng)
    return _run(y, x, denoiser, true_operator, schedule, cfg, rng, stft_cfg, optimise=False)


def sample_prior(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    length: int,
    seed=0,
    cfg: GuidanceConfig = GuidanceConfig(zeta=0.0, n_op_iters=0),
    n: int | None = None,
) -> np.ndarray:
    """Unconditional sample starting from N(0, sigma_max^2 I).

    With ``n`` the result has shape (n, length) and all rows are integrated
    together, which needs a denoiser that works along the last axis.
    """
    rng = np.random.default_rng(seed)
    x = schedule.sigmas[0] * rng.standard_normal(length if n is None else (n, length))
    return _run(None, x, denoiser, _Identity(), schedule, cfg, rng, StftConfig(), optimise=False).restored


class _Identity:
    def __call__(self, x):
        return x

    def vjp_input(self, x, upstream):
        return upstream


def restore_segments(
    y,
    denoiser: Denoiser,
    segment_length: int,
    model="ccr",
    schedule: NoiseSchedule | None = None,
    cfg: GuidanceConfig = GuidanceConfig(),
    seed=0,
    stft_cfg: StftConfig = StftConfig(),
    informed_operator=None,
) -> RestorationReport:
    """Restore a long recording in fixed-length segments.

    The operator estimated on one segment starts the next one. The last
    segment is zero-padded and the padding is dropped from the output.
    """
    y = np.asarray(getattr(y, "samples", y), dtype=np.float64)
    n_seg = -(-y.size // segment_length)
    padded = np.pad(y, (0, n_seg * segment_length - y.size))
    ss = np.random.SeedSequence(seed)
    out, trace, history = [], [], []
    operator = model
    for k, child in enumerate(ss.spawn(n_seg)):
        seg = padded[k * segment_length : (k + 1) * segment_length]
        if informed_operator is not None:
            rep = informed_restore(seg, denoiser, informed_operator, schedule, cfg, child, stft_cfg)
        else:
            rep = blind_restore(seg, denoiser, operator, schedule, cfg, child, stft_cfg)
            operator = rep.operator
        out.append(rep.restored)
        trace.extend(rep.trace)
        history.extend(rep.operator_history)
    final_op = informed_operator if informed_operator is not None else operator
    return RestorationReport(np.concatenate(out)[: y.size], final_op, trace, history)
