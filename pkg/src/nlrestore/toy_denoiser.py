"""A small trainable frame denoiser with EDM preconditioning.

The network sees one frame of ``frame_size`` samples at a time:

    D(x, sigma) = c_skip x + c_out F(c_in x, c_noise)

where F is a ReLU perceptron whose input is the scaled frame with c_noise
appended, plus a linear frame-to-frame path scaled by exp(a + b c_noise).
Since c_noise = ln(sigma) / 4 that gate is a learned power of sigma, which
lets the full-rank, roughly 1/sigma noise-cancelling part of F be learned
directly instead of through the ReLU layers. Whole signals are processed as
50 %-overlapping frames that stay inside the signal, recombined by
Hann-weighted overlap-add.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .optim import AdamState, adam_step
from .prior import c_in, c_noise, c_out, c_skip, loss_weight

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nlrestore-frame-denoiser/2"


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``sigma_data`` of None means: measure it from the (normalised) dataset.
    Training noise levels are drawn log-uniformly from [sigma_min, sigma_max].
    """

    sigma_data: float | None = None
    sigma_min: float = 0.05
    sigma_max: float = 1.0
    batch_size: int = 64
    iterations: int = 4000
    ema_rate: float = 0.999
    learning_rate: float = 3e-3
    lr_schedule: str = "cosine"
    frame_size: int = 512
    hidden: tuple = (64, 64)
    seed: int = 0
    log_interval: int = 100

    def __post_init__(self):
        if self.sigma_data is not None and not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")
        if not 0.0 < self.ema_rate < 1.0:
            raise ValueError(f"ema_rate must lie in (0, 1), got {self.ema_rate}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.frame_size < 2 or self.frame_size % 2:
            raise ValueError("frame_size must be even and >= 2")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.iterations < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("iterations, batch_size and log_interval must be >= 1")


def ema_update(ema: np.ndarray, params: np.ndarray, rate: float) -> np.ndarray:
    return rate * ema + (1.0 - rate) * params


def _layer_dims(frame_size: int, hidden) -> list[tuple[int, int]]:
    dims = [frame_size + 1, *hidden, frame_size]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def n_params(frame_size: int, hidden) -> int:
    """Perceptron weights and biases, the linear path and its two gate scalars."""
    return sum(o * i + o for o, i in _layer_dims(frame_size, hidden)) + frame_size**2 + 2


def _unflatten(vec: np.ndarray, frame_size: int, hidden):
    layers, pos = [], 0
    for fan_out, fan_in in _layer_dims(frame_size, hidden):
        w = vec[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        b = vec[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    skip = vec[pos : pos + frame_size**2].reshape(frame_size, frame_size)
    gate = vec[pos + frame_size**2 : pos + frame_size**2 + 2]
    return layers, skip, gate


def _net_forward(params, frame_size, hidden, v, cnoise):
    """F(v, c_noise) for a batch of scaled frames ``v`` and a column of c_noise."""
    layers, skip, gate = _unflatten(params, frame_size, hidden)
    h = np.concatenate([v, cnoise], axis=1)
    acts = [h]
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    g = np.exp(gate[0] + gate[1] * cnoise)
    lin = v @ skip.T
    return h + g * lin, (layers, skip, acts, g, lin, v, cnoise)


def _net_backward(cache, delta):
    """Return (flat parameter gradient, gradient w.r.t. the scaled frames)."""
    layers, skip, acts, g, lin, v, cnoise = cache
    d_lin = g * delta
    gs = delta * lin
    g_gate = np.array([np.sum(gs * g), np.sum(gs * g * cnoise)])
    g_skip = d_lin.T @ v
    d_v = d_lin @ skip

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            delta = delta * (acts[i + 1] > 0)
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        delta = delta @ w
    flat = np.concatenate([p.ravel() for gw, gb in reversed(grads) for p in (gw, gb)] + [g_skip.ravel(), g_gate])
    return flat, d_v + delta[:, :-1]


@dataclass
class FrameDenoiser:
    """Trained frame denoiser satisfying the :class:`~nlrestore.prior.Denoiser` contract."""

    params: np.ndarray
    sigma_data: float
    frame_size: int = 512
    hidden: tuple = (64, 64)
    ema_rate: float = 0.999
    meta: dict = field(default_factory=dict)

    @property
    def hop(self) -> int:
        return self.frame_size // 2

    @property
    def shapes(self):
        return _layer_dims(self.frame_size, self.hidden)

    def _inputs(self, frames, sigma):
        skip, out, cin, cnoise = self._precondition(sigma)
        return skip, out, cin * frames, np.full((frames.shape[0], 1), cnoise)

    def _precondition(self, sigma):
        sd = self.sigma_data
        return c_skip(sigma, sd), c_out(sigma, sd), c_in(sigma, sd), c_noise(sigma)

    def denoise_frames(self, frames: np.ndarray, sigma: float) -> np.ndarray:
        skip, out, v, cn = self._inputs(frames, sigma)
        f, _ = _net_forward(self.params, self.frame_size, self.hidden, v, cn)
        return skip * frames + out * f

    def _frame_vjp(self, frames, sigma, upstream):
        skip, out, v, cn = self._inputs(frames, sigma)
        _, cache = _net_forward(self.params, self.frame_size, self.hidden, v, cn)
        _, g_v = _net_backward(cache, out * upstream)
        return skip * upstream + c_in(sigma, self.sigma_data) * g_v

    # framing ---------------------------------------------------------------

    def _layout(self, length):
        """Frame starts and per-frame synthesis weights for a signal of ``length``.

        Frames stay inside the signal (short signals are zero-padded up to one
        frame), the last one is aligned to the end, and the outer halves of the
        first and last frames are weighted flat so the ends are fully covered.
        """
        fs, hop = self.frame_size, self.hop
        total = max(length, fs)
        starts = list(range(0, total - fs + 1, hop))
        if starts[-1] != total - fs:
            starts.append(total - fs)
        weights = np.tile(get_window("hann", fs, fftbins=True), (len(starts), 1))
        weights[0, : fs // 2] = 1.0
        weights[-1, fs // 2 :] = 1.0
        idx = np.asarray(starts)[:, None] + np.arange(fs)
        norm = np.zeros(total)
        np.add.at(norm, idx, weights)
        return idx, weights, norm, total

    def _split(self, x):
        idx, _, _, total = self._layout(x.size)
        return np.pad(x, (0, total - x.size))[idx]

    def _merge(self, frames, length):
        idx, weights, norm, total = self._layout(length)
        out = np.zeros(total)
        np.add.at(out, idx, weights * frames)
        return (out / norm)[:length]

    def _merge_adjoint(self, upstream, length):
        idx, weights, norm, total = self._layout(length)
        g = np.zeros(total)
        g[:length] = upstream
        return (g / norm)[idx] * weights

    def _split_adjoint(self, frames, length):
        idx, _, _, total = self._layout(length)
        out = np.zeros(total)
        np.add.at(out, idx, frames)
        return out[:length]

    # contract ----------------------------------------------------------------

    def denoise(self, x_noisy, sigma: float) -> np.ndarray:
        x = np.asarray(x_noisy, dtype=np.float64)
        if sigma == 0:
            return x.copy()
        return self._merge(self.denoise_frames(self._split(x), sigma), x.size)

    def adjoint(self, x_noisy, sigma: float, upstream) -> np.ndarray:
        x = np.asarray(x_noisy, dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        if sigma == 0:
            return u.copy()
        g_frames = self._merge_adjoint(u, x.size)
        return self._split_adjoint(self._frame_vjp(self._split(x), sigma, g_frames), x.size)

    # checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "frame_size": self.frame_size,
            "layer_dims": [list(s) for s in self.shapes],
            "hidden": list(self.hidden),
            "sigma_data": self.sigma_data,
            "ema_rate": self.ema_rate,
            "meta": self.meta,
            "params": self.params.tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> FrameDenoiser:
        try:
            doc = json.loads(Path(path).read_text())
            if doc.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unexpected checkpoint format {doc.get('format')!r}")
            den = cls(
                np.asarray(doc["params"], dtype=np.float64),
                float(doc["sigma_data"]),
                int(doc["frame_size"]),
                tuple(doc["hidden"]),
                float(doc["ema_rate"]),
                doc.get("meta", {}),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as err:
            raise ValueError(f"{path}: malformed checkpoint ({err})") from err
        expected = n_params(den.frame_size, den.hidden)
        if den.params.size != expected:
            raise ValueError(f"{path}: checkpoint has {den.params.size} parameters, expected {expected}")
        return den


def normalize_power(signals, rms: float | None = None) -> list[np.ndarray]:
    """Scale every signal to the same RMS (the first signal's, unless given)."""
    signals = [np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in signals]
    if not signals:
        raise ValueError("empty dataset")
    powers = [np.sqrt(np.mean(s * s)) for s in signals]
    if any(p == 0 for p in powers):
        raise ValueError("dataset contains an all-zero signal")
    target = powers[0] if rms is None else rms
    return [s * (target / p) for s, p in zip(signals, powers)]


@dataclass
class TrainResult:
    denoiser: FrameDenoiser
    losses: np.ndarray
    log_rows: list


def train_toy_denoiser(dataset, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit a :class:`FrameDenoiser` to clean ``dataset`` signals.

    Minimises lambda(sigma) |D(x0 + sigma eps, sigma) - x0|^2 / frame_size
    over random frames, with lambda = 1 / c_out^2. Returns the denoiser
    carrying EMA weights, the per-iteration losses and one log row
    (iteration, mean loss over the interval) per ``log_interval``.
    """
    signals = [np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in dataset]
    if not signals:
        raise ValueError("empty dataset")
    fs = cfg.frame_size
    signals = [s for s in signals if s.size >= fs]
    if not signals:
        raise ValueError(f"no dataset signal is at least one frame ({fs} samples) long")
    sigma_data = cfg.sigma_data or float(np.std(np.concatenate(signals)))

    rng = np.random.default_rng(cfg.seed)
    init = []
    for fan_out, fan_in in _layer_dims(fs, cfg.hidden):
        init.append(rng.standard_normal(fan_out * fan_in) * np.sqrt(2.0 / fan_in))
        init.append(np.zeros(fan_out))
    # Output layer and linear path start at zero, so D starts as c_skip x.
    # The gate starts near sigma_data / sigma, the gain the noise-cancelling
    # part of F needs, so the linear path only has to learn a projection.
    init[-2] *= 0.0
    init += [np.zeros(fs * fs), np.array([np.log(sigma_data), -4.0])]
    params = np.concatenate(init)
    ema = params.copy()
    adam = AdamState.zeros_like(params, lr=cfg.learning_rate)

    lengths = np.array([s.size - fs + 1 for s in signals])
    probs = lengths / lengths.sum()
    log_lo, log_hi = np.log(cfg.sigma_min), np.log(cfg.sigma_max)

    losses = np.empty(cfg.iterations)
    rows = []
    for it in range(cfg.iterations):
        which = rng.choice(len(signals), size=cfg.batch_size, p=probs)
        starts = (rng.random(cfg.batch_size) * lengths[which]).astype(int)
        x0 = np.stack([signals[k][s : s + fs] for k, s in zip(which, starts)])
        sigma = np.exp(rng.uniform(log_lo, log_hi, size=(cfg.batch_size, 1)))
        noisy = x0 + sigma * rng.standard_normal(x0.shape)

        skip, out, cin = c_skip(sigma, sigma_data), c_out(sigma, sigma_data), c_in(sigma, sigma_data)
        f, cache = _net_forward(params, fs, cfg.hidden, cin * noisy, c_noise(sigma))
        resid = skip * noisy + out * f - x0
        weight = loss_weight(sigma, sigma_data)
        loss = float(np.mean(np.sum(weight * resid * resid, axis=1) / fs))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at iteration {it}")
        losses[it] = loss

        delta = 2.0 * weight * resid * out / (fs * cfg.batch_size)
        grad, _ = _net_backward(cache, delta)
        if cfg.lr_schedule == "cosine":
            adam = replace(adam, lr=cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * it / cfg.iterations)))
        adam, params = adam_step(adam, params, grad)
        ema = ema_update(ema, params, cfg.ema_rate)

        if (it + 1) % cfg.log_interval == 0:
            window = losses[it + 1 - cfg.log_interval : it + 1]
            rows.append((it + 1, float(window.mean())))
            log.debug("iteration %d loss %.5f", it + 1, rows[-1][1])

    meta = {"iterations": cfg.iterations, "seed": cfg.seed, "sigma_min": cfg.sigma_min, "sigma_max": cfg.sigma_max}
    den = FrameDenoiser(ema, sigma_data, fs, tuple(cfg.hidden), cfg.ema_rate, meta)
    return TrainResult(den, losses, rows)
