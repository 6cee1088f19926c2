import json

import numpy as np
import pytest
from fdcheck import coordinate_errors
from hypothesis import given, settings
from hypothesis import strategies as st

from nlrestore.distortions import DistortionSpec
from nlrestore.waveshapers import (
    MLP,
    CCRSpline,
    ShaperConfig,
    SumTanh,
    _basis_deriv,
    ccr_basis,
    init_shaper,
    load_shaper,
    mu_law_grid,
    ramp_response,
    save_shaper,
    shaper_from_dict,
    write_ramp_csv,
)


def uniform_identity(n=11, lo=-1.0, hi=1.0):
    knots = np.linspace(lo, hi, n)
    return CCRSpline(knots, knots.copy())


# -- mu-law grid and basis --------------------------------------------------------


def test_mu_law_grid_points():
    grid = mu_law_grid(41, 20.0)
    inner = grid[1:-1]
    assert grid.size == 43 and grid[0] == -1.2 and grid[-1] == 1.2
    assert inner[20] == 0.0
    assert inner[-1] == pytest.approx(1.0, abs=1e-15) and inner[0] == pytest.approx(-1.0, abs=1e-15)
    # p = 0.5 sits at index 30 of linspace(-1, 1, 41)
    assert inner[30] == pytest.approx((np.sqrt(21) - 1) / 20, abs=1e-12)
    assert inner[30] == pytest.approx(0.17913, abs=1e-5)
    assert np.allclose(inner, -inner[::-1])


def test_mu_law_grid_validation():
    with pytest.raises(ValueError):
        mu_law_grid(40)
    with pytest.raises(ValueError):
        mu_law_grid(41, mu=0)
    with pytest.raises(ValueError):
        mu_law_grid(41, extremal=0.9)


def test_basis_values():
    assert np.allclose(ccr_basis(0.0), [0, 1, 0, 0], atol=0)
    assert np.allclose(ccr_basis(1 - 1e-12), [0, 0, 1, 0], atol=1e-11)
    assert np.allclose(ccr_basis(0.5), [-0.0625, 0.5625, 0.5625, -0.0625], atol=1e-15)
    with pytest.raises(ValueError):
        ccr_basis(1.0)
    with pytest.raises(ValueError):
        ccr_basis(-0.1)


@settings(max_examples=100)
@given(st.floats(0, 1, exclude_max=True))
def test_basis_partition_of_unity(s):
    assert abs(np.sum(ccr_basis(s)) - 1.0) < 1e-14


# -- evaluation ------------------------------------------------------------------


def test_sumtanh_values():
    assert SumTanh.init()(np.array(0.5)) == pytest.approx(0.46212, abs=1e-5)
    assert SumTanh.init()(np.array(0.2)) == pytest.approx(0.19738, abs=1e-5)
    assert np.all(SumTanh(np.zeros(8))(np.linspace(-3, 3, 50)) == 0)
    assert SumTanh([0.0, 1.0])(np.array(0.3)) == pytest.approx(np.tanh(0.6))


def test_ccr_uniform_linear_precision():
    assert abs(uniform_identity()(np.array(0.37)) - 0.37) < 1e-12
    x = np.linspace(-0.99, 0.99, 501)
    assert np.max(np.abs(uniform_identity()(x) - x)) < 1e-12


def test_ccr_interpolates_interior_knots(rng):
    grid = mu_law_grid()
    spline = CCRSpline(grid, rng.standard_normal(grid.size))
    assert np.max(np.abs(spline(grid[1:-1]) - spline.p_out[1:-1])) < 1e-12


def test_ccr_clamps_beyond_extremal_knots(rng):
    grid = mu_law_grid()
    spline = CCRSpline(grid, rng.standard_normal(grid.size))
    assert spline(np.array(5.0)) == pytest.approx(spline.p_out[-1])
    assert spline(np.array(-5.0)) == pytest.approx(spline.p_out[0])
    assert np.all(spline.vjp_input(np.array([-5.0, 5.0]), np.ones(2)) == 0)


def one_sided_slopes(spline):
    """Exact left and right derivatives at every interior knot."""
    ext = np.concatenate(
        [[2 * spline.p_out[0] - spline.p_out[1]], spline.p_out, [2 * spline.p_out[-1] - spline.p_out[-2]]]
    )
    width = np.diff(spline.p_in)
    k = np.arange(1, spline.p_in.size - 1)
    left = np.array([_basis_deriv(np.array(1.0)) @ ext[i - 1 : i + 3] / width[i - 1] for i in k])
    right = np.array([_basis_deriv(np.array(0.0)) @ ext[i : i + 4] / width[i] for i in k])
    return left, right


def test_ccr_c1_on_uniform_knots(rng):
    knots = np.linspace(-1.2, 1.2, 25)
    spline = CCRSpline(knots, rng.standard_normal(knots.size))
    left, right = one_sided_slopes(spline)
    assert np.max(np.abs(left - right)) < 1e-6
    x = np.linspace(-1.19, 1.19, 100001)
    assert np.max(np.abs(np.diff(spline(x)))) < 1e-2


def test_ccr_slope_jumps_on_mu_law_grid():
    # unequal neighbouring spans: continuous in the curve parameter, not in x
    grid = mu_law_grid()
    left, right = one_sided_slopes(CCRSpline(grid, grid**3))
    assert np.max(np.abs(left - right)) > 1e-3


def test_ccr_identity_init_deviation():
    x = np.linspace(-1, 1, 20001)
    assert np.max(np.abs(CCRSpline.init()(x) - x)) < 0.02


def test_ccr_validation():
    with pytest.raises(ValueError):
        CCRSpline([0, 1, 2], [0, 1, 2])
    with pytest.raises(ValueError):
        CCRSpline([0, 2, 1, 3], [0, 1, 2, 3])
    with pytest.raises(ValueError):
        CCRSpline([0, 1, 2, 3], [0, 1, np.nan, 3])


def test_mlp_zero_network():
    shaper = MLP.init(rng=0)
    zero = shaper.with_vector(np.zeros(shaper.vector.size))
    assert np.all(zero(np.linspace(-2, 2, 33)) == 0)


def test_mlp_init_reproducible():
    a, b = MLP.init(rng=5), MLP.init(rng=5)
    assert np.array_equal(a.vector, b.vector)
    assert [w.shape for w in a.weights] == [(20, 1), (20, 20), (20, 20), (1, 20)]
    assert all(np.all(bias == 0) for bias in a.biases)


def test_mlp_validation():
    with pytest.raises(ValueError):
        MLP(([[1.0]],), ([0.0, 1.0],))
    with pytest.raises(ValueError):
        MLP((np.ones((3, 1)),), (np.zeros(3),))
    with pytest.raises(ValueError):
        MLP.init(rng=0).with_vector(np.zeros(5))


@pytest.mark.parametrize("shaper", [SumTanh.init(), MLP.init(rng=1), CCRSpline.init()], ids=["sumtanh", "mlp", "ccr"])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_memoryless_under_permutation(shaper, seed):
    r = np.random.default_rng(seed)
    x = r.uniform(-1.5, 1.5, 40)
    perm = r.permutation(x.size)
    assert np.array_equal(shaper(x[perm]), shaper(x)[perm])


# -- gradients -------------------------------------------------------------------


def test_sumtanh_vjp_at_zero_vanishes():
    assert np.all(SumTanh.init().vjp_params(np.array([0.0]), np.array([1.0])) == 0)


def test_sumtanh_saturation_derivative():
    assert abs(SumTanh.init().vjp_input(np.array([50.0]), np.array([1.0]))[0]) < 1e-8


def test_ccr_param_gradient_sparsity(rng):
    grid = mu_law_grid()
    spline = CCRSpline(grid, rng.standard_normal(grid.size))
    for x in rng.uniform(-1.3, 1.3, 30):
        g = spline.vjp_params(np.array([x]), np.array([1.0]))
        nz = np.flatnonzero(g)
        assert nz.size <= 4
        assert nz.max() - nz.min() <= 3
        i = np.clip(np.searchsorted(grid, np.clip(x, grid[0], grid[-1]), side="right") - 1, 0, grid.size - 2)
        assert set(nz) <= set(range(i - 1, i + 3))


def test_ccr_identity_vjp_input_passthrough(rng):
    x = rng.uniform(-0.98, 0.98, 300)
    g = rng.standard_normal(300)
    assert np.max(np.abs(uniform_identity().vjp_input(x, g) - g)) < 1e-10


def _param_fd(shaper, x, g, idx):
    grad = shaper.vjp_params(x, g)
    v0 = shaper.vector
    return coordinate_errors(lambda v: float(g @ shaper.with_vector(v)(x)), v0, grad, idx, h=1e-6)


def test_mlp_param_gradient_fd(rng):
    shaper = MLP.init(rng=3)
    x, g = rng.uniform(-1, 1, 64), rng.standard_normal(64)
    # count only coordinates whose stencil does not cross a ReLU kink
    grad = shaper.vjp_params(x, g)
    ok = []
    for i in rng.choice(shaper.vector.size, 120, replace=False):
        patterns = []
        for h in (-1e-6, 0.0, 1e-6):
            v = shaper.vector.copy()
            v[i] += h
            _, pre = shaper.with_vector(v)._forward(x)
            patterns.append(np.concatenate([p.ravel() > 0 for p in pre[:-1]]))
        if all(np.array_equal(patterns[1], p) for p in patterns) and grad[i] != 0:
            ok.append(i)
        if len(ok) == 50:
            break
    assert len(ok) == 50
    assert np.max(_param_fd(shaper, x, g, ok)) < 1e-5


@pytest.mark.parametrize("shaper", [SumTanh(np.random.default_rng(2).standard_normal(8) * 0.5)], ids=["sumtanh"])
def test_sumtanh_gradients_fd(shaper, rng):
    x, g = rng.uniform(-1, 1, 50), rng.standard_normal(50)
    assert np.max(_param_fd(shaper, x, g, range(8))) < 1e-5
    gx = shaper.vjp_input(x, g)
    errs = coordinate_errors(lambda v: float(g @ shaper(v)), x, gx, range(50), h=1e-6)
    assert np.max(errs) < 1e-5


def test_ccr_input_gradient_fd(rng):
    grid = mu_law_grid()
    spline = CCRSpline(grid, grid + 0.1 * rng.standard_normal(grid.size))
    x, g = rng.uniform(-1.1, 1.1, 80), rng.standard_normal(80)
    # keep samples whose stencil stays within one segment
    h = 1e-7
    seg = lambda v: np.searchsorted(grid, v, side="right")
    keep = np.flatnonzero(seg(x - h) == seg(x + h))
    gx = spline.vjp_input(x, g)
    errs = coordinate_errors(lambda v: float(g @ spline(v)), x, gx, keep, h=h)
    assert keep.size > 70 and np.max(errs) < 1e-5


def test_upstream_shape_checked():
    with pytest.raises(ValueError):
        SumTanh.init().vjp_input(np.zeros(3), np.zeros(4))


# -- construction / io ----------------------------------------------------------


def test_init_shaper_kinds():
    assert isinstance(init_shaper("sumtanh"), SumTanh)
    assert isinstance(init_shaper("mlp", rng=0), MLP)
    assert isinstance(init_shaper("ccr"), CCRSpline)
    assert init_shaper("ccr", config=ShaperConfig(ccr_points=21)).p_in.size == 23
    with pytest.raises(ValueError):
        init_shaper("spline")


@pytest.mark.parametrize(
    "shaper", [SumTanh.init(), MLP.init(rng=4), CCRSpline.init(), DistortionSpec("hard_clip", 0.3)], ids=str
)
def test_save_load_round_trip(shaper, tmp_path):
    save_shaper(tmp_path / "op.json", shaper)
    back = load_shaper(tmp_path / "op.json")
    x = np.linspace(-1.5, 1.5, 101)
    assert np.array_equal(back(x), shaper(x))


def test_load_malformed(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValueError):
        load_shaper(tmp_path / "bad.json")
    with pytest.raises(ValueError):
        shaper_from_dict({"kind": "unknown"})
    (tmp_path / "missing.json").write_text(json.dumps({"kind": "ccr"}))
    with pytest.raises(ValueError):
        load_shaper(tmp_path / "missing.json")


def test_ramp_csv(tmp_path):
    r, out = ramp_response(SumTanh.init(), -1, 1, 11)
    assert np.allclose(out, np.tanh(r))
    write_ramp_csv(tmp_path / "ramp.csv", SumTanh.init(), -1, 1, 11)
    lines = (tmp_path / "ramp.csv").read_text().splitlines()
    assert lines[0] == "input,output" and len(lines) == 12
