"""Differentiable memoryless waveshapers used as the estimated operator.

Three models share one informal interface:

* ``shaper(x)`` evaluates the map sample by sample,
* ``shaper.vjp_params(x, g)`` returns d(sum g * shaper(x))/dparams as a flat vector,
* ``shaper.vjp_input(x, g)`` returns g * shaper'(x),
* ``shaper.vector`` / ``shaper.with_vector(v)`` expose the optimisable parameters
  as one flat float64 array for the optimizer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distortions import DistortionSpec

MODEL_KINDS = ("sumtanh", "mlp", "ccr")


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def _check_upstream(x: np.ndarray, upstream) -> np.ndarray:
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError(f"upstream shape {g.shape} does not match input shape {x.shape}")
    return g


# --------------------------------------------------------------------------
# SumTanh
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SumTanh:
    """f(x) = sum_q a[q-1] * tanh(q * x) for q = 1..Q."""

    a: np.ndarray

    kind = "sumtanh"

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).ravel()
        if a.size < 1 or not np.all(np.isfinite(a)):
            raise ValueError("SumTanh needs at least one finite coefficient")
        object.__setattr__(self, "a", a)

    @property
    def order(self) -> int:
        return self.a.size

    def _tanh(self, x):
        return np.tanh(np.multiply.outer(x, np.arange(1, self.order + 1)))

    def __call__(self, x) -> np.ndarray:
        return self._tanh(_arr(x)) @ self.a

    def vjp_params(self, x, upstream) -> np.ndarray:
        x = _arr(x)
        return _check_upstream(x, upstream) @ self._tanh(x)

    def vjp_input(self, x, upstream) -> np.ndarray:
        x = _arr(x)
        g = _check_upstream(x, upstream)
        q = np.arange(1, self.order + 1)
        return g * ((1.0 - self._tanh(x) ** 2) @ (self.a * q))

    @property
    def vector(self) -> np.ndarray:
        return self.a.copy()

    def with_vector(self, v) -> SumTanh:
        return SumTanh(v)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a.tolist()}

    @classmethod
    def init(cls, order: int = 8) -> SumTanh:
        a = np.zeros(order)
        a[0] = 1.0
        return cls(a)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MLP:
    """Scalar-to-scalar perceptron with ReLU on every layer but the last.

    ``weights[l]`` has shape (fan_out, fan_in) and ``biases[l]`` shape (fan_out,).
    """

    weights: tuple
    biases: tuple

    kind = "mlp"

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64, ndmin=2) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).ravel() for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValueError("MLP needs matching, non-empty weight and bias lists")
        fan_in = 1
        for w, b in zip(ws, bs):
            if w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ValueError(f"inconsistent MLP layer shapes: {w.shape}, {b.shape}")
            fan_in = w.shape[0]
        if fan_in != 1:
            raise ValueError("MLP output layer must have a single unit")
        if not all(np.all(np.isfinite(p)) for p in ws + bs):
            raise ValueError("MLP parameters must be finite")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def _forward(self, x):
        h = x[:, None]
        pre = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = z if i == len(self.weights) - 1 else np.maximum(z, 0.0)
        return h[:, 0], pre

    def __call__(self, x) -> np.ndarray:
        x = _arr(x)
        return self._forward(x.ravel())[0].reshape(x.shape)

    def _backward(self, x, upstream):
        _, pre = self._forward(x)
        n = len(self.weights)
        delta = upstream[:, None]
        gw, gb = [None] * n, [None] * n
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                # ReLU subgradient at 0 is 0
                delta = delta * (pre[i] > 0)
            inp = x[:, None] if i == 0 else np.maximum(pre[i - 1], 0.0)
            gw[i] = delta.T @ inp
            gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i]
        return gw, gb, delta[:, 0]

    def vjp_params(self, x, upstream) -> np.ndarray:
        x = _arr(x)
        g = _check_upstream(x, upstream)
        gw, gb, _ = self._backward(x.ravel(), g.ravel())
        return np.concatenate([p.ravel() for pair in zip(gw, gb) for p in pair])

    def vjp_input(self, x, upstream) -> np.ndarray:
        x = _arr(x)
        g = _check_upstream(x, upstream)
        return self._backward(x.ravel(), g.ravel())[2].reshape(x.shape)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def with_vector(self, v) -> MLP:
        v = np.asarray(v, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(v[pos : pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(v[pos : pos + b.size].copy())
            pos += b.size
        if pos != v.size:
            raise ValueError(f"expected {pos} parameters, got {v.size}")
        return MLP(tuple(ws), tuple(bs))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def init(cls, hidden=(20, 20, 20), rng=None) -> MLP:
        """Kaiming-normal weights (std sqrt(2 / fan_in)) and zero biases."""
        rng = np.random.default_rng(rng)
        dims = (1, *hidden, 1)
        ws = tuple(rng.standard_normal((dims[i + 1], dims[i])) * np.sqrt(2.0 / dims[i]) for i in range(len(dims) - 1))
        bs = tuple(np.zeros(d) for d in dims[1:])
        return cls(ws, bs)


# --------------------------------------------------------------------------
# Cubic Catmull-Rom spline
# --------------------------------------------------------------------------


def mu_law_grid(n: int = 41, mu: float = 20.0, extremal: float = 1.2) -> np.ndarray:
    """Knot abscissae: ``n`` mu-law warped points on [-1, 1] plus two extremal knots.

    The warp sgn(p) * ((1 + mu)**|p| - 1) / mu maps 0 to 0 and +-1 to +-1 and
    packs knots densely around zero.
    """
    if n < 3 or n % 2 == 0:
        raise ValueError(f"n must be an odd integer >= 3, got {n}")
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if not extremal > 1:
        raise ValueError(f"extremal knot must lie beyond 1, got {extremal}")
    p = np.linspace(-1.0, 1.0, n)
    warped = np.sign(p) * ((1.0 + mu) ** np.abs(p) - 1.0) / mu
    warped[n // 2] = 0.0
    return np.concatenate([[-extremal], warped, [extremal]])


def _basis(s: np.ndarray) -> np.ndarray:
    s2, s3 = s * s, s * s * s
    return 0.5 * np.stack([-s + 2 * s2 - s3, 2 - 5 * s2 + 3 * s3, s + 4 * s2 - 3 * s3, -s2 + s3], axis=-1)


def _basis_deriv(s: np.ndarray) -> np.ndarray:
    s2 = s * s
    return 0.5 * np.stack([-1 + 4 * s - 3 * s2, -10 * s + 9 * s2, 1 + 8 * s - 9 * s2, -2 * s + 3 * s2], axis=-1)


def ccr_basis(s) -> np.ndarray:
    """Catmull-Rom basis weights (b0, b1, b2, b3) for curve parameter s in [0, 1)."""
    s = np.asarray(s, dtype=np.float64)
    if np.any((s < 0) | (s >= 1)) or not np.all(np.isfinite(s)):
        raise ValueError("curve parameter must lie in [0, 1)")
    return _basis(s)


@dataclass(frozen=True)
class CCRSpline:
    """Catmull-Rom transfer curve through control points (p_in[i], p_out[i]).

    Every span between neighbouring knots is one cubic segment evaluated with
    the uniform basis at s = (x - p_in[i]) / (p_in[i+1] - p_in[i]). The two
    outermost spans borrow a linearly extrapolated phantom point, and inputs
    beyond the extremal knots take the extremal output value.
    """

    p_in: np.ndarray
    p_out: np.ndarray
    mu: float = 20.0

    kind = "ccr"

    def __post_init__(self):
        p_in = np.array(self.p_in, dtype=np.float64).ravel()
        p_out = np.array(self.p_out, dtype=np.float64).ravel()
        if p_in.size < 4 or p_in.shape != p_out.shape:
            raise ValueError("CCRSpline needs matching knot arrays with at least 4 points")
        if np.any(np.diff(p_in) <= 0):
            raise ValueError("knot abscissae must be strictly increasing")
        if not (np.all(np.isfinite(p_in)) and np.all(np.isfinite(p_out))):
            raise ValueError("knots must be finite")
        object.__setattr__(self, "p_in", p_in)
        object.__setattr__(self, "p_out", p_out)

    def _locate(self, x):
        p = self.p_in
        xc = np.clip(x, p[0], p[-1])
        i = np.clip(np.searchsorted(p, xc, side="right") - 1, 0, p.size - 2)
        width = p[i + 1] - p[i]
        s = (xc - p[i]) / width
        inside = (x > p[0]) & (x < p[-1])
        return i, s, width, inside

    def _extended(self, values):
        return np.concatenate([[2 * values[0] - values[1]], values, [2 * values[-1] - values[-2]]])

    def __call__(self, x) -> np.ndarray:
        x = _arr(x)
        i, s, _, _ = self._locate(x)
        ext = self._extended(self.p_out)
        # segment i spans p[i]..p[i+1] and uses ext[i..i+3] = p[i-1]..p[i+2]
        idx = i[..., None] + np.arange(4)
        return np.sum(_basis(s) * ext[idx], axis=-1)

    def vjp_params(self, x, upstream) -> np.ndarray:
        x = _arr(x)
        g = _check_upstream(x, upstream)
        i, s, _, _ = self._locate(x)
        idx = i[..., None] + np.arange(4)
        g_ext = np.bincount(idx.ravel(), (_basis(s) * g[..., None]).ravel(), minlength=self.p_out.size + 2)
        grad = g_ext[1:-1].copy()
        grad[0] += 2 * g_ext[0]
        grad[1] -= g_ext[0]
        grad[-1] += 2 * g_ext[-1]
        grad[-2] -= g_ext[-1]
        return grad

    def vjp_input(self, x, upstream) -> np.ndarray:
        x = _arr(x)
        g = _check_upstream(x, upstream)
        i, s, width, inside = self._locate(x)
        ext = self._extended(self.p_out)
        idx = i[..., None] + np.arange(4)
        slope = np.sum(_basis_deriv(s) * ext[idx], axis=-1) / width
        return g * np.where(inside, slope, 0.0)

    @property
    def vector(self) -> np.ndarray:
        return self.p_out.copy()

    def with_vector(self, v) -> CCRSpline:
        return CCRSpline(self.p_in, v, self.mu)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mu": self.mu, "p_in": self.p_in.tolist(), "p_out": self.p_out.tolist()}

    @classmethod
    def init(cls, n: int = 41, mu: float = 20.0, extremal: float = 1.2) -> CCRSpline:
        """Identity start: p_out = p_in on a mu-law grid."""
        grid = mu_law_grid(n, mu, extremal)
        return cls(grid, grid.copy(), mu)


# --------------------------------------------------------------------------
# construction and serialisation
# --------------------------------------------------------------------------


@dataclass
class ShaperConfig:
    """Hyperparameters for the three model families."""

    sumtanh_order: int = 8
    mlp_hidden: tuple = (20, 20, 20)
    ccr_points: int = 41
    ccr_mu: float = 20.0
    ccr_extremal: float = 1.2


def init_shaper(kind: str, y=None, rng=None, config: ShaperConfig | None = None):
    """Initial operator for ``kind`` in {"sumtanh", "mlp", "ccr"}.

    ``y`` (the measurement) is accepted for interface symmetry; none of the
    current initialisations depend on it.
    """
    cfg = config or ShaperConfig()
    if kind == "sumtanh":
        return SumTanh.init(cfg.sumtanh_order)
    if kind == "mlp":
        return MLP.init(tuple(cfg.mlp_hidden), rng)
    if kind == "ccr":
        return CCRSpline.init(cfg.ccr_points, cfg.ccr_mu, cfg.ccr_extremal)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def shaper_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "sumtanh":
        return SumTanh(d["a"])
    if kind == "mlp":
        return MLP(tuple(d["weights"]), tuple(d["biases"]))
    if kind == "ccr":
        return CCRSpline(d["p_in"], d["p_out"], d.get("mu", 20.0))
    if kind == "distortion":
        return DistortionSpec.from_dict(d["spec"])
    raise ValueError(f"unknown model kind {kind!r} in operator document")


def save_shaper(path, shaper) -> None:
    """Write a waveshaper, or a known :class:`DistortionSpec`, as JSON."""
    doc = {"kind": "distortion", "spec": shaper.to_dict()} if isinstance(shaper, DistortionSpec) else shaper.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_shaper(path):
    try:
        return shaper_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as err:
        raise ValueError(f"{path}: malformed operator document ({err})") from err


def ramp_response(shaper, lo: float = -1.0, hi: float = 1.0, points: int = 1000):
    r = np.linspace(lo, hi, points)
    return r, shaper(r)


def write_ramp_csv(path, shaper, lo: float = -1.0, hi: float = 1.0, points: int = 1000) -> None:
    """Two-column (input, output) ramp response for plotting transfer curves."""
    r, out = ramp_response(shaper, lo, hi, points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["input", "output"])
        for a, b in zip(r, out):
            writer.writerow([repr(float(a)), repr(float(b))])
