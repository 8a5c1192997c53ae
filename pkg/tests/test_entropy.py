import math

import numpy as np
import pytest

from conftest import central_difference, rel_err
from voxcodec.entropy import (
    B_MAX, B_MIN, MASS_FLOOR, SCALE_TABLE, SYMBOL_MAX, SYMBOL_MIN, DivergenceError,
    ImplicitEntropyModel, LaplaceParams, discretize_params, gather_context, gather_contexts,
    laplace_mass, predict_params, rate_backward, rate_bits, rate_grads,
)


def _causal_offsets():
    """All cube offsets strictly before the centre in (z, y, x) raster order, by brute force."""
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz * 9 + dy * 3 + dx) < 0:
                    out.append((dz, dy, dx))
    return out


def test_origin_without_previous_is_all_zero():
    vol = np.arange(27).reshape(3, 3, 3) + 1
    ctx = gather_context(vol, None, (0, 0, 0))
    assert ctx.values.shape == (40,) and not ctx.values.any()


def test_constant_previous_gives_half():
    prev = np.full((4, 4, 4), 64)
    ctx = gather_context(np.zeros((4, 4, 4)), prev, (1, 2, 1))
    np.testing.assert_array_equal(ctx.temporal, 0.5)


def test_spatial_neighbours_match_offset_oracle():
    vol = np.arange(5 * 5 * 5).reshape(5, 5, 5)
    pos = np.array((2, 2, 2))
    ctx = gather_context(vol, None, pos)
    raster = [vol[tuple(pos + o)] for o in _causal_offsets()]
    assert len(raster) == 13
    np.testing.assert_array_equal(ctx.spatial * 128, raster)
    assert np.all(ctx.spatial * 128 < vol[tuple(pos)])


def test_vectorised_contexts_match_single(rng):
    vols = rng.integers(-20, 20, (2, 3, 4, 5))
    prev = rng.integers(-20, 20, (2, 3, 4, 5))
    allc = gather_contexts(vols, prev)
    for flat in rng.integers(0, vols.size, 30):
        c, rest = divmod(int(flat), 60)
        z, rest = divmod(rest, 20)
        y, x = divmod(rest, 5)
        single = gather_context(vols[c], prev[c], (z, y, x)).values
        np.testing.assert_array_equal(allc[flat], single)


def test_causality(rng):
    vol = rng.integers(-50, 50, (4, 4, 4))
    k = 37
    base = gather_contexts(vol[None])[k]
    for later in range(k, vol.size):
        v2 = vol.copy().ravel()
        v2[later] += 17
        np.testing.assert_array_equal(gather_contexts(v2.reshape(1, 4, 4, 4))[k], base)


def test_zero_final_layer_gives_standard_params(rng):
    model = ImplicitEntropyModel(rng)
    p = predict_params(model, rng.normal(size=(10, 40)))
    np.testing.assert_array_equal(p.mu, 0.0)
    np.testing.assert_array_equal(p.b, 1.0)


def test_prediction_matches_plain_arithmetic(rng):
    model = ImplicitEntropyModel(rng)
    for k in model.params:
        model.params[k] = rng.normal(scale=0.3, size=model.params[k].shape)
    ctx = rng.normal(size=(16, 40))
    p = predict_params(model, ctx)
    W1, b1, W2, b2 = (model.params[k] for k in ("W1", "b1", "W2", "b2"))
    for i in range(16):
        h = [max(0.0, sum(ctx[i, a] * W1[a, j] for a in range(40)) + b1[j]) for j in range(32)]
        mu = sum(h[j] * W2[j, 0] for j in range(32)) + b2[0]
        raw = sum(h[j] * W2[j, 1] for j in range(32)) + b2[1]
        assert p.mu[i] == pytest.approx(mu, abs=1e-12)
        assert p.b[i] == pytest.approx(min(max(math.exp(raw), B_MIN), B_MAX), rel=1e-12)
    again = predict_params(model, ctx)
    np.testing.assert_array_equal(again.mu, p.mu)


def test_non_finite_output_raises(rng):
    model = ImplicitEntropyModel(rng)
    model.params["b2"][0] = np.nan
    with pytest.raises(DivergenceError):
        predict_params(model, np.zeros(40))


def test_rate_bits_examples():
    std = LaplaceParams(np.zeros(1), np.ones(1))
    mass = 1 - math.exp(-0.5)
    assert mass == pytest.approx(0.393469, abs=1e-6)
    assert rate_bits(0.0, std)[0] == pytest.approx(-math.log2(mass), abs=1e-12)
    # the commonly quoted 1.34577 is a rounding of this value; exact is 1.345677
    assert rate_bits(0.0, std)[0] == pytest.approx(1.34577, abs=2e-4)
    sharp = LaplaceParams(np.array([3.0]), np.array([1e-3]))
    assert rate_bits(3.0, sharp)[0] == pytest.approx(0.0, abs=1e-12)
    assert rate_bits(1000.0, std)[0] == pytest.approx(-math.log2(MASS_FLOOR))
    assert -math.log2(MASS_FLOOR) == pytest.approx(29.897, abs=1e-3)


def test_masses_sum_to_one_over_alphabet():
    v = np.arange(SYMBOL_MIN, SYMBOL_MAX + 1)
    for mu, b in [(0.0, 1.0), (12.3, 0.01), (-100.5, 300.0), (0.0, B_MIN), (5.0, 2000.0)]:
        total = laplace_mass(v, mu, b).sum()
        assert 1 - 1e-6 <= total <= 1 + 1e-12


def test_rate_gradient_symmetry_and_floor():
    p = LaplaceParams(np.array([1.5]), np.array([0.7]))
    _, dmu, _ = rate_grads(np.array([1.5]), p)
    assert abs(dmu[0]) < 1e-15
    far = rate_grads(np.array([1e4]), LaplaceParams(np.zeros(1), np.ones(1)))
    assert all(g[0] == 0.0 for g in far)


def test_rate_gradients_match_finite_differences(rng):
    for _ in range(200):
        x = np.array([rng.normal(scale=3), rng.normal(scale=3), math.exp(rng.uniform(-1.5, 2))])
        f = lambda: float(rate_bits(x[0], LaplaceParams(x[1], x[2])))
        dv, dmu, db = (float(g) for g in rate_grads(x[0], LaplaceParams(x[1], x[2])))
        for i, g in enumerate((dv, dmu, db)):
            fd = central_difference(f, x, i, 1e-5)
            assert rel_err(fd, g, floor=1e-3) < 1e-5


def test_rate_backward_parameter_gradients(rng):
    model = ImplicitEntropyModel(rng)
    for k in model.params:
        model.params[k] = rng.normal(scale=0.2, size=model.params[k].shape)
    ctx = rng.normal(size=(6, 40))
    v = rng.normal(size=6)

    def total():
        return float(rate_bits(v, model.forward(ctx)[0]).sum())

    params, cache = model.forward(ctx)
    dv, grads = rate_backward(v, params, model, cache)
    for name in ("W1", "b2", "W2"):
        for _ in range(5):
            idx = tuple(rng.integers(0, n) for n in model.params[name].shape)
            fd = central_difference(total, model.params[name], idx, 1e-6)
            assert rel_err(fd, grads[name][idx], floor=1e-4) < 1e-5
    fd = central_difference(total, v, 2, 1e-6)
    assert rel_err(fd, dv[2], floor=1e-4) < 1e-5


def test_discretize_examples():
    p = discretize_params(LaplaceParams(np.array([0.007, 0.5 / 64, -0.3]), np.array([1.0, 0.37, 5e4])))
    assert p.mu[0] == 0.0
    np.testing.assert_array_equal(p.mu * 64, np.round(p.mu * 64))
    twice = discretize_params(p)
    np.testing.assert_array_equal(twice.mu, p.mu)
    np.testing.assert_array_equal(twice.b, p.b)
    # brute-force nearest table entry in log distance
    for b_in, b_out in zip([1.0, 0.37], p.b[:2]):
        nearest = SCALE_TABLE[np.argmin(np.abs(np.log(SCALE_TABLE) - math.log(b_in)))]
        assert b_out == nearest
    assert p.b[2] == SCALE_TABLE[-1]


def test_scale_table_spans_bounds():
    assert len(SCALE_TABLE) == 256
    assert SCALE_TABLE[0] == pytest.approx(B_MIN, rel=1e-12)
    assert SCALE_TABLE[-1] == pytest.approx(B_MAX, rel=1e-12)
    ratios = SCALE_TABLE[1:] / SCALE_TABLE[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-10)
