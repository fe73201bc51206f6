import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlab.process import (
    Parameterization,
    SingularityError,
    advance_state,
    conditional_path_params,
    interpolate,
    target_y,
    time_grid,
    velocity_from_prediction,
)

P = Parameterization
finite = st.floats(-10, 10, allow_nan=False)


def vec(*v):
    return np.array([v], dtype=np.float64)


def test_interpolate_endpoints_and_hand_value():
    x0, x1 = vec(0.3, -1.2), vec(2.0, 5.0)
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(interpolate(vec(0, 0), vec(2, -4), 0.25), vec(0.5, -1.0), rtol=0, atol=0)


def test_interpolate_rejects_bad_input():
    with pytest.raises(ValueError):
        interpolate(vec(0, 0), vec(1, 1, 1), 0.5)
    for t in (-0.1, 1.5, np.nan):
        with pytest.raises(ValueError):
            interpolate(vec(0, 0), vec(1, 1), t)


def test_target_y_cases():
    assert np.array_equal(target_y(vec(1, 1), vec(1, 1), P.DIFFERENCE), vec(0, 0))
    assert np.array_equal(target_y(vec(1, 1), vec(3, 0), P.DIFFERENCE), vec(2, -1))
    assert np.array_equal(target_y(vec(1, 1), vec(3, 0), P.NOISE), vec(1, 1))
    assert np.array_equal(target_y(vec(1, 1), vec(3, 0), "denoiser"), vec(3, 0))
    with pytest.raises(ValueError):
        target_y(vec(1, 1), vec(1, 1, 1), P.NOISE)


def test_parameterization_parse():
    assert P.parse("Difference") is P.DIFFERENCE
    with pytest.raises(ValueError):
        P.parse("velocity")


def test_advance_examples():
    v = vec(0.7, -2.0)
    np.testing.assert_array_equal(advance_state(vec(0, 0), 0.0, 1.0, v, P.DIFFERENCE), v)
    np.testing.assert_allclose(advance_state(vec(1, 1), 0.0, 0.5, vec(2, 0), P.DENOISER), vec(1.5, 0.5), rtol=1e-15)


def test_advance_singularities_and_domain():
    with pytest.raises(SingularityError):
        advance_state(vec(1, 1), 0.0, 0.5, vec(0, 0), P.NOISE)
    with pytest.raises(SingularityError):
        advance_state(vec(1, 1), 1.0 - 1e-12, 1.0, vec(0, 0), P.DENOISER)
    with pytest.raises(ValueError):
        advance_state(vec(1, 1), 0.5, 0.5, vec(0, 0), P.DIFFERENCE)
    with pytest.raises(ValueError):
        advance_state(vec(1, 1), 0.6, 0.5, vec(0, 0), P.DIFFERENCE)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4), st.floats(0.001, 0.998), st.floats(0.001, 0.998), st.sampled_from(list(P)))
def test_advance_reaches_true_path_point(vals, a, b, p):
    t, t2 = min(a, b), max(a, b)
    if t2 - t < 1e-6:
        t2 = t + 1e-3
    x0, x1 = np.array([vals[:2]]), np.array([vals[2:]])
    got = advance_state(interpolate(x0, x1, t), t, t2, target_y(x0, x1, p), p)
    want = interpolate(x0, x1, t2)
    scale = max(np.max(np.abs(want)), np.max(np.abs(x0)), np.max(np.abs(x1)), 1e-3)
    assert np.max(np.abs(got - want)) <= 1e-12 * scale / min(t, 1 - t) + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60))
def test_telescoping_difference(seed, k):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((2, 3, 2))
    grid = np.unique(np.concatenate([[0.0, 1.0], rng.random(k)]))
    x = x0
    for a, b in zip(grid[:-1], grid[1:]):
        x = advance_state(x, a, b, x1 - x0, P.DIFFERENCE)
    assert np.max(np.abs(x - x1)) <= 1e-10


@given(st.lists(finite, min_size=4, max_size=4), st.floats(0, 1), st.floats(0, 1))
def test_interpolate_is_affine(vals, a, b):
    x0, x1 = np.array([vals[:2]]), np.array([vals[2:]])
    mid = interpolate(x0, x1, (a + b) / 2)
    avg = 0.5 * (interpolate(x0, x1, a) + interpolate(x0, x1, b))
    np.testing.assert_allclose(mid, avg, atol=1e-12 * (1 + np.max(np.abs(vals))))


def test_conditional_path_params():
    x1 = np.array([[2.0, -1.0]])
    m, s = conditional_path_params(x1, 1.0)
    assert np.array_equal(m, x1) and s == 0.0
    m, s = conditional_path_params(x1, 0.0)
    assert np.all(m == 0) and s == 1.0
    m, s = conditional_path_params(np.array([[2.0]]), 0.25)
    assert m.item() == 0.5 and s == 0.75


def test_time_grid():
    np.testing.assert_array_equal(time_grid(4), [0, 0.25, 0.5, 0.75, 1.0])
    g = time_grid(4, P.NOISE)
    assert g[0] == 1e-9 and g[-1] == 1.0
    with pytest.raises(ValueError):
        time_grid(0)


def test_velocity_from_prediction_recovers_difference():
    rng = np.random.default_rng(0)
    y0, y1 = rng.standard_normal((2, 5, 1, 2))
    s = 0.3
    ys = (1 - s) * y0 + s * y1
    for target, pred in ((P.DIFFERENCE, y1 - y0), (P.DENOISER, y1), (P.NOISE, y0)):
        np.testing.assert_allclose(velocity_from_prediction(pred, ys, s, target), y1 - y0, atol=1e-12)
