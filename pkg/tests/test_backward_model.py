import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polybsde.backward_model import (
    ModelConstants,
    TamingThresholds,
    builtin_model,
    compute_constants_c1_c2,
    compute_taming_thresholds,
    fhn_exact_solution,
    fhn_model,
    logistic,
    truncate,
)
from polybsde.errors import NotApplicableError, SingularConstantError, StepTooLargeError

MODELS = ["fhn_a_minus_1", "cubic_pure"]


def _triples(n, seed, scale=3.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 2, (n, 1))
    y = rng.uniform(-scale, scale, (n, 1))
    y2 = rng.uniform(-scale, scale, (n, 1))
    z = rng.normal(0, 1, (n, 1, 1))
    return x, y, y2, z


def test_builtin_values():
    fhn = builtin_model("fhn_a_minus_1")
    one = np.ones((1, 1))
    assert fhn.f(0.0, one, one, np.zeros((1, 1, 1)))[0, 0] == 0.0
    assert fhn.g(np.zeros((1, 1)))[0, 0] == 0.5
    cub = builtin_model("cubic_pure")
    assert cub.f(0.0, one, 2 * one, np.zeros((1, 1, 1)))[0, 0] == -8.0
    assert cub.g(np.array([[3.5]]))[0, 0] == 3.5
    assert fhn.driver_kind == cub.driver_kind == "y_only_cubic"
    assert fhn.constants.m == cub.constants.m == 3


def test_unknown_model():
    with pytest.raises(KeyError):
        builtin_model("nope")


@pytest.mark.parametrize("name", MODELS)
def test_monotonicity(name):
    model = builtin_model(name)
    x, y, y2, z = _triples(10_000, 1)
    lhs = (y2 - y) * (model.f(0.0, x, y2, z) - model.f(0.0, x, y, z))
    assert np.all(lhs <= model.constants.L_y * (y2 - y) ** 2 + 1e-12)


@pytest.mark.parametrize("name", MODELS)
def test_growth(name):
    model = builtin_model(name)
    c = model.constants
    x, y, _, z = _triples(10_000, 2)
    # fine grid through the region where |y - y^3| exceeds |y|^3
    y = np.concatenate([y, np.linspace(-1.5, 1.5, 3001)[:, None]])
    x = np.concatenate([x, np.zeros((3001, 1))])
    z = np.concatenate([z, np.zeros((3001, 1, 1))])
    lhs = np.abs(model.f(0.0, x, y, z))
    rhs = c.L + c.L_x * np.abs(x) + c.L_y * np.abs(y) ** c.m + c.L_z * np.abs(z[:, :, 0])
    assert np.all(lhs <= rhs + 1e-12)


def test_fhn_growth_needs_positive_L():
    # with L = 0 the bound fails near y = 1/sqrt(6)
    y = 1 / math.sqrt(6)
    assert abs(y - y**3) > abs(y) ** 3


@pytest.mark.parametrize("name", MODELS)
def test_local_lipschitz(name):
    model = builtin_model(name)
    c = model.constants
    x, y, y2, z = _triples(10_000, 3)
    lhs = np.abs(model.f(0.0, x, y, z) - model.f(0.0, x, y2, z))
    rhs = c.L_y_loc * (1 + np.abs(y) ** (c.m - 1) + np.abs(y2) ** (c.m - 1)) * np.abs(y - y2)
    assert np.all(lhs <= rhs + 1e-12)


def test_constants_validation():
    with pytest.raises(ValueError):
        ModelConstants(L=-1.0)
    with pytest.raises(ValueError):
        ModelConstants(m=0)
    with pytest.raises(ValueError):
        ModelConstants(m=3, L_y=0.0)
    assert ModelConstants(L_y=2.0, m=2).L_y_loc == 2.0


def test_truncate_examples():
    assert truncate(5, 3) == 3
    assert truncate(5, -7) == -5
    out = truncate(1, np.array([3.0, 4.0]))
    assert np.allclose(out, [0.6, 0.8], rtol=0, atol=1e-15)
    assert math.isclose(np.linalg.norm(out), 1.0, rel_tol=1e-15)
    assert truncate(math.inf, np.array([1e300])) == 1e300
    with pytest.raises(ValueError):
        truncate(-1, 1.0)


vectors = st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=4)


@settings(max_examples=300, deadline=None)
@given(L=st.floats(0, 100), u=vectors)
def test_truncate_idempotent(L, u):
    v = truncate(L, np.array(u))
    assert np.allclose(truncate(L, v), v, rtol=1e-14, atol=0)


@settings(max_examples=300, deadline=None)
@given(L=st.floats(0, 100), u=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       v=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_truncate_non_expansive(L, u, v):
    u, v = np.array(u), np.array(v)
    d_out = np.linalg.norm(truncate(L, u) - truncate(L, v))
    assert d_out <= np.linalg.norm(u - v) * (1 + 1e-12) + 1e-12


@settings(max_examples=200, deadline=None)
@given(L=st.floats(0, 100), a=st.floats(-1e3, 1e3), b=st.floats(-1e3, 1e3))
def test_truncate_scalar_non_expansive(L, a, b):
    assert abs(truncate(L, a) - truncate(L, b)) <= abs(a - b)


def test_c1_c2_examples():
    assert compute_constants_c1_c2(ModelConstants(L_y=1.0, m=3), 1) == (6.0, 0.0)
    assert compute_constants_c1_c2(ModelConstants(), 1) == (0.0, 0.0)
    c1, c2 = compute_constants_c1_c2(ModelConstants(L=2, L_x=1, L_y=1, L_z=1, m=3), 1)
    assert c1 == 30.0 and c2 == 1.0


def test_c2_singular_without_override():
    k = ModelConstants(L=0.5, L_y=1.0, m=3)
    with pytest.raises(SingularConstantError):
        compute_constants_c1_c2(k, 1)
    assert compute_constants_c1_c2(k, 1, c2_override=0.25) == (6.0, 0.25)


def test_example2_thresholds():
    thr = compute_taming_thresholds(builtin_model("cubic_pure").constants, 1, 1.0, 1 / 64)
    expected = math.exp(-3.0) * 64**0.25 / math.sqrt(3.0)
    assert math.isclose(thr.L_h, expected, rel_tol=1e-15)
    # independent high-precision evaluation of e^{-3} 64^{1/4} / sqrt(3)
    assert math.isclose(thr.L_h, 0.0813019421935517, rel_tol=1e-14)
    assert thr.K_h == math.inf and thr.c1 == 6.0 and thr.c2 == 0.0
    thr20 = compute_taming_thresholds(builtin_model("cubic_pure").constants, 1, 1.0, 1 / 64, alpha=20)
    assert thr20.L_h == 20 * thr.L_h


@pytest.mark.parametrize("h", [1 / 10, 1 / 64, 1 / 1000])
def test_budget_inequality_at_alpha_one(h):
    for k in (builtin_model("cubic_pure").constants, ModelConstants(L=2, L_x=1, L_y=1, L_z=1, m=3)):
        try:
            thr = compute_taming_thresholds(k, 1, 1.0, h)
        except StepTooLargeError:
            continue
        lhs, rhs = thr.budget()
        assert lhs <= rhs * (1 + 8 * np.finfo(float).eps)


def test_budget_thirds_with_positive_c2():
    k = ModelConstants(L=2, L_x=1, L_y=1, L_z=1, m=3)
    c1, c2 = compute_constants_c1_c2(k, 1)
    # h* = min((3 e^{c1} c2)^{-2}, 1/32)
    h_star = min((3 * math.exp(c1) * c2) ** -2, 1 / 32)
    h = h_star / 2
    thr = compute_taming_thresholds(k, 1, 1.0, h)
    assert math.isclose(thr.h_star, h_star, rel_tol=1e-15)
    bound = h ** -0.5
    e = math.exp(c1)
    for term in (e * thr.L_h**2, e * c2, e * c2 * thr.K_h**2):
        assert term <= bound / 3 * (1 + 1e-12)
    assert math.isclose(e * thr.L_h**2, bound / 3, rel_tol=1e-12)
    assert math.isclose(e * c2 * thr.K_h**2, bound / 3, rel_tol=1e-12)
    assert e * c2 <= h_star ** -0.5 / 3 * (1 + 1e-12)
    with pytest.raises(StepTooLargeError) as err:
        compute_taming_thresholds(k, 1, 1.0, 2 * h_star)
    assert err.value.bound == thr.h_star


def test_taming_not_applicable_for_linear_growth():
    with pytest.raises(NotApplicableError):
        compute_taming_thresholds(ModelConstants(L_y=1.0, m=1), 1, 1.0, 0.1)


def test_unbounded_thresholds():
    t = TamingThresholds.unbounded()
    assert t.L_h == t.K_h == math.inf


def test_oracle_values():
    assert fhn_exact_solution(0.0, 1.5, 1.0, -1.0) == 0.5
    for a in (-1.0, 0.3):
        assert fhn_exact_solution(1.0, 0.0, 1.0, a) == 0.5
    assert fhn_exact_solution(0.0, 800.0, 1.0) == 0.0
    x = np.linspace(-30, 30, 101)
    assert np.array_equal(fhn_exact_solution(1.0, x, 1.0), logistic(x))
    g = builtin_model("fhn_a_minus_1").g
    assert np.array_equal(fhn_exact_solution(1.0, x, 1.0), g(x[:, None])[:, 0])


@pytest.mark.parametrize("a", [-1.0, -0.5, 0.25])
def test_oracle_pde_residual(a):
    # -u_t - u_xx / 2 - f(u) = 0 with f(y) = -y^3 + (1 + a) y^2 - a y
    model = fhn_model(a)
    rng = np.random.default_rng(7)
    t = rng.uniform(0, 0.9, 200)
    x = rng.uniform(-4, 4, 200)
    e, T = 1e-4, 1.0
    u = fhn_exact_solution(t, x, T, a)
    ut = (fhn_exact_solution(t + e, x, T, a) - fhn_exact_solution(t - e, x, T, a)) / (2 * e)
    uxx = (fhn_exact_solution(t, x + e, T, a) - 2 * u + fhn_exact_solution(t, x - e, T, a)) / e**2
    f = model.f(0.0, x[:, None], u[:, None], None)[:, 0]
    assert np.max(np.abs(-ut - 0.5 * uxx - f)) <= 1e-6


def test_logistic_is_overflow_safe():
    with np.errstate(over="raise"):
        v = logistic(np.array([-1000.0, 0.0, 1000.0]))
    assert v[0] == 1.0 and v[1] == 0.5 and v[2] == 0.0
