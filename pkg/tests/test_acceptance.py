"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary)."""

import json
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from fdcheck import coordinate_errors

from nlrestore.distortions import DistortionSpec, apply_distortion, input_sdr, solve_threshold_for_sdr
from nlrestore.dsp import Signal, SpectralCost, StftConfig
from nlrestore.metrics import RampSpec, rr_mse
from nlrestore.prior import GaussianPrior, c_out, loss_weight, sinusoid_mixture_prior, tweedie_score
from nlrestore.sampler import blind_restore, karras_schedule, sample_prior
from nlrestore.toy_denoiser import FrameDenoiser, TrainConfig, _net_forward, n_params, train_toy_denoiser
from nlrestore.wav import write_wav
from nlrestore.waveshapers import MLP, CCRSpline, SumTanh, _basis_deriv, ccr_basis, mu_law_grid

FIXTURES = Path(__file__).parent / "fixtures"
N_COORDS = 200
GRAD_TOL = 1e-5


def test_paper_numbers_not_reproduced(verdict):
    # large-model listening-test figures are out of reach at this scale; the
    # property suites below stand in for them
    verdict("paper-number reproduction", True, "not attempted by contract; substitute suites below")


# -- gradient correctness -----------------------------------------------------------


def _relu_pattern_fn(pattern, x, idx, h):
    """True when +-h on coordinate idx leaves the ReLU pattern unchanged."""
    base = pattern(x)
    for step in (-h, h):
        z = x.copy()
        z.flat[idx] += step
        if not np.array_equal(pattern(z), base):
            return False
    return True


def _pooled(draws):
    """Concatenate per-draw error arrays and return (count, max error)."""
    errs = np.concatenate(draws)
    return errs.size, float(errs.max())


def _sumtanh_errors(rng):
    params, inputs = [], []
    for _ in range(25):
        shaper = SumTanh(rng.standard_normal(8) * 0.5)
        x, g = rng.uniform(-1.2, 1.2, 16), rng.standard_normal(16)
        params.append(
            coordinate_errors(
                lambda v: float(g @ shaper.with_vector(v)(x)), shaper.vector, shaper.vjp_params(x, g), range(8)
            )
        )
        inputs.append(coordinate_errors(lambda v: float(g @ shaper(v)), x, shaper.vjp_input(x, g), range(16), h=1e-5))
    return _pooled(params), _pooled(inputs)


def _mlp_errors(rng):
    # piecewise linear in any single weight or input: a kink-free stencil is
    # exact, so a wide step only reduces rounding
    h = 1e-4
    shaper = MLP.init(rng=7)
    x, g = rng.uniform(-1, 1, 300), rng.standard_normal(300)

    def pattern_params(v):
        return np.concatenate([p.ravel() > 0 for p in shaper.with_vector(v)._forward(x)[1][:-1]])

    grad = shaper.vjp_params(x, g)
    ok = []
    for i in rng.permutation(shaper.vector.size):
        if grad[i] != 0 and _relu_pattern_fn(pattern_params, shaper.vector, i, h):
            ok.append(i)
        if len(ok) == N_COORDS:
            break
    p_err = coordinate_errors(lambda v: float(g @ shaper.with_vector(v)(x)), shaper.vector, grad, ok, h=h)

    def pattern_input(z):
        return np.concatenate([p.ravel() > 0 for p in shaper._forward(z)[1][:-1]])

    gx = shaper.vjp_input(x, g)
    keep = [i for i in range(x.size) if _relu_pattern_fn(pattern_input, x, i, h)]
    i_err = coordinate_errors(lambda z: float(g @ shaper(z)), x, gx, keep, h=h)
    return (len(ok), float(p_err.max())), (len(keep), float(i_err.max()))


def _ccr_errors(rng):
    grid = mu_law_grid()
    params, inputs = [], []
    h = 1e-7
    for _ in range(5):
        spline = CCRSpline(grid, grid + 0.1 * rng.standard_normal(grid.size))
        x, g = rng.uniform(-1.3, 1.3, 64), rng.standard_normal(64)
        # the output is exactly linear in the knot values, so a central
        # difference is exact for any step; a unit step minimises rounding
        params.append(
            coordinate_errors(
                lambda v: float(g @ spline.with_vector(v)(x)),
                spline.vector,
                spline.vjp_params(x, g),
                range(grid.size),
                h=1.0,
            )
        )
        # the curve is only C0 across mu-law knots: keep same-segment stencils
        seg = np.searchsorted(grid, x - h, side="right") == np.searchsorted(grid, x + h, side="right")
        keep = np.flatnonzero(seg)
        inputs.append(coordinate_errors(lambda v: float(g @ spline(v)), x, spline.vjp_input(x, g), keep, h=h))
    return _pooled(params), _pooled(inputs)


def _cost_errors(rng):
    cfg = StftConfig(256, 64, 256)
    y, x = rng.standard_normal((2, 1024)) * 0.1
    cost = SpectralCost(y, cfg)
    grad = cost(x)[1]
    idx = rng.choice(x.size, N_COORDS, replace=False)
    errs = coordinate_errors(lambda z: cost(z)[0], x, grad, idx)
    return errs.size, float(errs.max())


def _gaussian_adjoint_errors(rng):
    prior = sinusoid_mixture_prior(512, 16000)
    x, u = rng.standard_normal((2, 512)) * 0.05
    g = prior.adjoint(x, 0.1, u)
    errs = coordinate_errors(lambda z: float(u @ prior.denoise(z, 0.1)), x, g, rng.choice(512, N_COORDS, replace=False))
    return errs.size, float(errs.max())


def _toy_adjoint_errors(rng):
    fs, hidden, sigma = 512, (64, 64), 0.2
    params = rng.standard_normal(n_params(fs, hidden)) * 0.05
    den = FrameDenoiser(params, 0.05, fs, hidden)
    x, u = rng.standard_normal((2, 1024)) * 0.1
    h = 1e-4

    def pattern(z):
        _, _, v, cn = den._inputs(den._split(z), sigma)
        acts = _net_forward(den.params, fs, hidden, v, cn)[1][2]
        return np.concatenate([a.ravel() > 0 for a in acts[1:-1]])

    g = den.adjoint(x, sigma, u)
    keep = []
    for i in rng.permutation(x.size):
        if _relu_pattern_fn(pattern, x, i, h):
            keep.append(i)
        if len(keep) == N_COORDS:
            break
    errs = coordinate_errors(lambda z: float(u @ den.denoise(z, sigma)), x, g, keep, h=h)
    return errs.size, float(errs.max())


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    checks = {}
    checks["sumtanh params"], checks["sumtanh input"] = _sumtanh_errors(rng)
    checks["mlp params"], checks["mlp input"] = _mlp_errors(rng)
    checks["ccr params"], checks["ccr input"] = _ccr_errors(rng)
    checks["spectral cost"] = _cost_errors(rng)
    checks["gaussian denoiser adjoint"] = _gaussian_adjoint_errors(rng)
    checks["toy denoiser adjoint"] = _toy_adjoint_errors(rng)
    elapsed = time.perf_counter() - start
    ok = all(n >= N_COORDS and err < GRAD_TOL for n, err in checks.values()) and elapsed < 60
    detail = "; ".join(f"{k} n={n} max_rel={err:.1e}" for k, (n, err) in checks.items())
    verdict("gradient correctness", ok, f"{detail}; {elapsed:.1f}s")


# -- spline algebra -----------------------------------------------------------------


def test_spline_algebra(verdict):
    rng = np.random.default_rng(5)
    s = np.linspace(0, 1, 100001)[:-1]
    unity = float(np.max(np.abs(ccr_basis(s).sum(axis=-1) - 1.0)))

    grid = mu_law_grid()
    spline = CCRSpline(grid, rng.standard_normal(grid.size))
    interp = float(np.max(np.abs(spline(grid[1:-1]) - spline.p_out[1:-1])))

    knots = np.linspace(-1.2, 1.2, 25)
    line = CCRSpline(knots, 0.7 * knots - 0.1)
    x = np.linspace(-1.0, 1.0, 100001)
    linear = float(np.max(np.abs(line(x) - (0.7 * x - 0.1))))

    # derivative jumps at every interior knot of a random uniform-knot spline,
    # from exact one-sided slopes, plus a dense-grid derivative scan
    curve = CCRSpline(knots, rng.standard_normal(knots.size))
    ext = np.concatenate([[2 * curve.p_out[0] - curve.p_out[1]], curve.p_out, [2 * curve.p_out[-1] - curve.p_out[-2]]])
    width = knots[1] - knots[0]
    jumps = [
        abs(_basis_deriv(np.array(1.0)) @ ext[i - 1 : i + 3] - _basis_deriv(np.array(0.0)) @ ext[i : i + 4]) / width
        for i in range(1, knots.size - 1)
    ]
    dense = np.linspace(-1.1, 1.1, 200001)
    slope = curve.vjp_input(dense, np.ones_like(dense))
    step = dense[1] - dense[0]
    # a bounded second derivative keeps neighbouring slopes within M * step
    curvature = float(np.max(np.abs(np.diff(slope))) / step)
    c1 = float(max(jumps))
    ok = unity < 1e-14 and interp < 1e-12 and linear < 1e-12 and c1 < 1e-6
    verdict(
        "spline algebra",
        ok,
        f"unity {unity:.1e}; interpolation {interp:.1e}; linear precision {linear:.1e}; "
        f"C1 jump {c1:.1e} (uniform knots, max |f''| ~ {curvature:.1f})",
    )


# -- Gaussian exactness ---------------------------------------------------------------


def test_gaussian_denoiser_exactness(verdict):
    rng = np.random.default_rng(8)
    n, sigma = 64, 0.4
    prior = GaussianPrior(rng.uniform(0.05, 2.0, n // 2 + 1), rng.standard_normal(n) * 0.1, n)
    C = np.stack([np.fft.irfft(prior.spectrum * np.fft.rfft(e), n=n) for e in np.eye(n)], axis=1)
    x = rng.standard_normal(n)
    A = C + sigma**2 * np.eye(n)
    mean = prior.mean + C @ np.linalg.solve(A, x - prior.mean)
    score = -np.linalg.solve(A, x - prior.mean)
    e_mean = float(np.max(np.abs(prior.denoise(x, sigma) - mean)))
    e_score = float(np.max(np.abs(tweedie_score(prior.denoise(x, sigma), x, sigma) - score)))
    verdict(
        "gaussian denoiser exactness",
        e_mean < 1e-10 and e_score < 1e-10,
        f"posterior mean err {e_mean:.1e}; score err {e_score:.1e}",
    )


# -- unconditional sampler --------------------------------------------------------------


def test_unconditional_sampler_spectrum(verdict):
    length, n_bands, n_samples = 1024, 16, 500
    prior = sinusoid_mixture_prior(length, 16000)
    lam = prior.spectrum
    # start noise 10x the largest per-bin std, so N(0, sigma_max^2) is within 1 % of the true marginal
    sched = karras_schedule(200, 1e-4, 10 * float(np.sqrt(lam.max())), 7)
    start = time.perf_counter()
    x = sample_prior(prior, sched, length, seed=0, n=n_samples)
    elapsed = time.perf_counter() - start
    power = np.mean(np.abs(np.fft.rfft(x, axis=1)) ** 2, axis=0) / length
    bands = np.array_split(np.arange(lam.size), n_bands)
    rel = np.array([abs(power[b].sum() / lam[b].sum() - 1.0) for b in bands])
    per_bin = float(np.max(np.abs(power / lam - 1.0)))
    verdict(
        "unconditional sampler spectrum",
        float(rel.max()) < 0.10 and elapsed < 300,
        f"max band error {rel.max():.3f} over {n_bands} bands (per-bin max {per_bin:.3f}, "
        f"sampling noise alone ~{1 / np.sqrt(n_samples):.3f} per bin); {elapsed:.1f}s",
    )


# -- end-to-end blind identification ------------------------------------------------------

KINDS = ("hard_clip", "soft_clip", "half_wave_rectify")
SEEDS = range(20)


def _distort(x, kind):
    if kind == "half_wave_rectify":
        spec = DistortionSpec(kind)
    else:
        spec = solve_threshold_for_sdr(x, kind, 3.0)
    return spec, apply_distortion(x, spec)


def run_benchmark(kinds=KINDS, models=("ccr",), seeds=SEEDS, length=8192):
    """Per-(kind, model) lists of RR-MSE (dB), SDR gain (dB) and input SDR."""
    prior = sinusoid_mixture_prior(length, 16000)
    ramp = RampSpec(0.05)
    out = {}
    for kind in kinds:
        for model in models:
            rows = []
            for seed in seeds:
                x = prior.sample(10_000 + seed)
                spec, y = _distort(x, kind)
                rep = blind_restore(y, prior, model, seed=seed)
                rows.append(
                    (rr_mse(spec, rep.operator, ramp).db, input_sdr(x, rep.restored) - input_sdr(x, y), input_sdr(x, y))
                )
            out[kind, model] = np.array(rows)
    return out


@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    res = run_benchmark(models=("ccr",))
    res.update(run_benchmark(kinds=("hard_clip",), models=("mlp", "sumtanh")))
    return res, time.perf_counter() - start


@pytest.mark.slow
def test_end_to_end_blind_identification(verdict, benchmark):
    res, elapsed = benchmark
    pinned = json.loads((FIXTURES / "blind_benchmark.json").read_text())
    parts, ok = [], elapsed < 1800
    for kind in KINDS:
        rr, gain, sdr_in = np.median(res[kind, "ccr"], axis=0)
        ref = pinned[kind]
        # regression: stay within 3 dB of the pinned first run
        drift = max(abs(rr - ref["rr_mse_db"]), abs(gain - ref["sdr_gain_db"]))
        ok &= rr <= -25.0 and gain >= 5.0 and drift <= 3.0
        parts.append(f"{kind} RR-MSE {rr:.1f} dB, SDR gain {gain:+.1f} dB (input {sdr_in:.2f} dB, drift {drift:.2f})")
    verdict("end-to-end blind identification", ok, "; ".join(parts) + f"; {elapsed:.0f}s incl. ordering runs")


@pytest.mark.slow
def test_relative_ordering(verdict, benchmark):
    res, _ = benchmark
    med = {m: float(np.median(res["hard_clip", m][:, 0])) for m in ("ccr", "mlp", "sumtanh")}
    ok = med["ccr"] <= med["mlp"] and med["ccr"] <= med["sumtanh"]
    detail = ", ".join(f"{m} {v:.1f} dB" for m, v in med.items())
    if not ok:
        warnings.warn(f"model ordering differs from the reference finding: {detail}", stacklevel=1)
    verdict("relative ordering (hard clip median RR-MSE)", ok, detail, hard=False)


# -- determinism ----------------------------------------------------------------------------


def test_determinism_across_processes(verdict, tmp_path):
    x = sinusoid_mixture_prior(4096, 16000).sample(3)
    write_wav(tmp_path / "in.wav", Signal(np.clip(x, -0.04, 0.04), 16000))
    digests = []
    for run in ("a", "b"):
        subprocess.run(
            [
                sys.executable,
                "-m",
                "nlrestore.cli",
                "restore",
                str(tmp_path / "in.wav"),
                str(tmp_path / run),
                "--seed",
                "17",
                "--steps",
                "20",
            ],
            check=True,
            capture_output=True,
        )
        digests.append([(tmp_path / run / f).read_bytes() for f in ("operator.json", "trace.csv")])
    verdict("determinism", digests[0] == digests[1], "operator.json and trace.csv byte-identical across two processes")


# -- toy denoiser training -------------------------------------------------------------------


def sinusoid_dataset(n, seed, sr=8000, f0=440.0, length=4096):
    r = np.random.default_rng(seed)
    t = np.arange(length) / sr
    return [0.5 * np.sqrt(2) * np.sin(2 * np.pi * f0 * t + r.uniform(0, 2 * np.pi)) for _ in range(n)]


@pytest.mark.slow
def test_toy_denoiser_training(verdict):
    sigmas = np.logspace(-4, 3, 1001)
    ulps = float(np.max(np.abs(loss_weight(sigmas, 0.5) * c_out(sigmas, 0.5) ** 2 - 1.0)) / np.finfo(float).eps)

    start = time.perf_counter()
    res = train_toy_denoiser(sinusoid_dataset(16, 0), TrainConfig())
    elapsed = time.perf_counter() - start
    first, last = res.losses[:100].mean(), res.losses[-100:].mean()

    clean = sinusoid_dataset(1, 123)[0]
    noisy = clean + 0.1 * np.random.default_rng(123).standard_normal(clean.size)
    restored = res.denoiser.denoise(noisy, 0.1)
    snr_in = 10 * np.log10(np.sum(clean**2) / np.sum((noisy - clean) ** 2))
    snr_out = 10 * np.log10(np.sum(clean**2) / np.sum((restored - clean) ** 2))
    ok = ulps <= 2 and last < first and snr_out - snr_in >= 10.0 and elapsed < 600
    verdict(
        "toy denoiser training",
        ok,
        f"lambda*c_out^2 within {ulps:.0f} ulp of 1; loss {first:.3f} -> {last:.3f}; "
        f"SNR {snr_in:.1f} -> {snr_out:.1f} dB ({snr_out - snr_in:+.1f}); {elapsed:.0f}s",
    )
