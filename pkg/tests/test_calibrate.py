import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from mdcal import calibrate as cal


# ---- oracles ----

def isotonic_by_level_sets(t, w):
    """Exhaustive search over contiguous partitions whose block means are nondecreasing."""
    n = len(t)
    best = np.inf
    for cuts in itertools.product([0, 1], repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        means = [np.average(t[a:b], weights=w[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        if np.any(np.diff(means) < -1e-15):
            continue
        fit = np.concatenate([np.full(b - a, m) for (a, b), m in zip(zip(bounds[:-1], bounds[1:]), means)])
        best = min(best, float(np.sum(w * (t - fit) ** 2)))
    return best


def robust_by_slsqp(per_env, knots):
    """Epigraph program min s subject to F_e(z) <= s, chain and box constraints."""
    m = knots.size

    def env_obj(z, f, y):
        return np.mean((np.interp(f, knots, z) - y) ** 2)

    cons = [{"type": "ineq", "fun": (lambda x, f=f, y=y: x[m] - env_obj(x[:m], f, y))} for f, y in per_env]
    cons += [{"type": "ineq", "fun": lambda x: np.diff(x[:m])}]
    best = np.inf
    rng = np.random.default_rng(0)
    for _ in range(8):
        z0 = np.sort(rng.random(m))
        x0 = np.append(z0, max(env_obj(z0, f, y) for f, y in per_env))
        sol = minimize(lambda x: x[m], x0, method="SLSQP", constraints=cons,
                       bounds=[(0, 1)] * m + [(0, None)], options={"ftol": 1e-12, "maxiter": 500})
        z = np.clip(sol.x[:m], 0, 1)
        z = np.maximum.accumulate(z)
        best = min(best, max(env_obj(z, f, y) for f, y in per_env))
    return best


def random_opposing_instance(rng, k=2, knots=None, n=None):
    """Environments sharing prediction values, miscalibrated in opposite directions."""
    knots = rng.integers(2, 6) if knots is None else knots
    values = np.sort(rng.random(knots))
    out = []
    for e in range(k):
        ne = int(rng.integers(5, 40)) if n is None else n
        f = rng.choice(values, ne)
        shift = (0.25 if e % 2 == 0 else -0.25) * rng.random()
        y = (rng.random(ne) < np.clip(f + shift, 0, 1)).astype(float)
        out.append((f, y))
    return out


def worst_env(cal_map, per_env):
    return max(cal.mse(cal_map, f, y) for f, y in per_env)


# ---- PAVA / isotonic ----

@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-5, 5)), arrays(np.float64, n, elements=st.floats(0.1, 3)))))
def test_pava_matches_level_set_oracle(tw):
    t, w = tw
    z = cal.pava(t, w)
    assert np.all(np.diff(z) >= -1e-12)
    assert abs(float(np.sum(w * (t - z) ** 2)) - isotonic_by_level_sets(t, w)) < 1e-9


def test_pava_exhaustive_binary_instances():
    # every 0/1 target vector of length <= 8
    for n in range(1, 9):
        for bits in itertools.product([0.0, 1.0], repeat=n):
            t = np.array(bits)
            z = cal.pava(t)
            assert abs(float(np.sum((t - z) ** 2)) - isotonic_by_level_sets(t, np.ones(n))) < 1e-9


@given(st.integers(1, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-5, 5)))))
def test_pava_block_orthogonality(tup):
    (t,) = tup
    z = cal.pava(t)
    r = t - z
    assert abs(float(r @ z)) < 1e-8 * max(1.0, float(np.abs(t).sum()))
    # residuals sum to zero on every constant block
    for v in np.unique(z):
        assert abs(float(r[z == v].sum())) < 1e-9 * max(1.0, float(np.abs(t).sum()))


def test_fit_isotonic_examples():
    f = np.array([0.1, 0.4, 0.3, 0.9])
    y = np.array([0, 1, 0, 1])
    m = cal.fit_isotonic(f, y)
    np.testing.assert_array_equal(m.knots, [0.1, 0.3, 0.4, 0.9])
    # sorted by f the labels read 0,0,1,1: already monotone
    np.testing.assert_allclose(m.values, [0.0, 0.0, 1.0, 1.0])
    assert cal.mse(m, f, y) == pytest.approx(isotonic_by_level_sets(np.array([0, 0, 1, 1.0]), np.ones(4)) / 4,
                                              abs=1e-9)
    # in input order the middle pair violates and pools to 0.5
    np.testing.assert_allclose(cal.pava(y.astype(float)), [0.0, 0.5, 0.5, 1.0])
    ident = cal.fit_isotonic([0.0, 1.0], [0, 1])
    assert cal.mse(ident, [0.0, 1.0], [0, 1]) == 0.0
    assert np.all(cal.fit_isotonic([0.2, 0.5, 0.9], [1, 1, 1]).values == 1.0)


def test_fit_isotonic_merges_ties():
    m = cal.fit_isotonic([0.5, 0.5, 0.5, 0.7], [0, 1, 1, 1])
    np.testing.assert_allclose(m.values, [2 / 3, 1.0])


# ---- MonotoneMap ----

@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 1)), arrays(np.float64, n, elements=st.sampled_from([0.0, 1.0])))),
    arrays(np.float64, 20, elements=st.floats(-1, 2)))
def test_maps_are_monotone_everywhere(pair, probes):
    f, y = pair
    for m in (cal.fit_isotonic(f, y), cal.calibrate_robust([(f, y), (f[::-1], y)]).map):
        assert np.all(np.diff(m.knots) > 0) and np.all(np.diff(m.values) >= 0)
        assert np.all((m.values >= 0) & (m.values <= 1))
        out = cal.apply(m, np.sort(probes))
        assert np.all(np.diff(out) >= 0)


def test_monotone_map_apply_rules():
    m = cal.MonotoneMap([0.2, 0.8], [0.1, 0.7])
    assert cal.apply(m, [0.0])[0] == 0.1
    assert cal.apply(m, [1.0])[0] == 0.7
    assert cal.apply(m, [0.5])[0] == pytest.approx(0.4)
    step = cal.MonotoneMap([0.2, 0.8], [0.1, 0.7], "step")
    assert cal.apply(step, [0.5])[0] == 0.1
    ident = cal.MonotoneMap([0.0, 1.0], [0.0, 1.0])
    x = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(cal.apply(ident, x), x)
    with pytest.raises(ValueError):
        cal.MonotoneMap([0.2, 0.1], [0.0, 1.0])
    with pytest.raises(ValueError):
        cal.MonotoneMap([0.1, 0.2], [0.5, 0.4])


def test_map_serialization():
    m = cal.MonotoneMap([0.1, 0.3], [0.2, 0.6])
    d = m.to_dict()
    assert d == {"knots": [0.1, 0.3], "values": [0.2, 0.6], "interp": "linear"}
    back = cal.map_from_dict(d)
    np.testing.assert_array_equal(back.knots, m.knots)
    p = cal.map_from_dict({"a": 2.0, "b": -1.0})
    assert isinstance(p, cal.PlattMap) and p.a == 2.0


# ---- Platt ----

def test_platt_self_consistent():
    rng = np.random.default_rng(1)
    z = rng.normal(0, 2, 50_000)
    f = 1 / (1 + np.exp(-z))
    y = (rng.random(z.size) < f).astype(float)
    p = cal.fit_platt(f, y)
    assert abs(p.a - 1) < 0.05 and abs(p.b) < 0.05


def test_platt_flipped_and_clipped():
    rng = np.random.default_rng(2)
    f = rng.random(500)
    y = (rng.random(500) < 1 - f).astype(float)
    assert cal.fit_platt(f, y).a < 0
    out = cal.apply(cal.PlattMap(1.5, 0.5), [0.0, 1.0, 1e-300])
    assert np.all(np.isfinite(out)) and np.all((out > 0) & (out < 1))
    with pytest.raises(ValueError):
        cal.fit_platt([0.2, 0.8], [1, 1])


# ---- naive and robust ----

def test_naive_reductions():
    rng = np.random.default_rng(3)
    f = rng.random(30)
    y = (rng.random(30) < f).astype(float)
    single = cal.calibrate_naive([(f, y)])
    iso = cal.fit_isotonic(f, y)
    np.testing.assert_array_equal(single.values, iso.values)
    double = cal.calibrate_naive([(f, y), (f, y)])
    np.testing.assert_allclose(double.values, iso.values, atol=1e-15)


def test_naive_differs_from_per_env_maps():
    f = np.array([0.3, 0.3, 0.7, 0.7])
    a = (f, np.array([0, 0, 0, 1.0]))
    b = (f, np.array([1, 1, 0, 1.0]))
    pooled = cal.calibrate_naive([a, b])
    for env in (a, b):
        assert not np.allclose(pooled.values, cal.fit_isotonic(*env).values)


def test_robust_single_knot_example():
    fit = cal.calibrate_robust([(np.array([0.5]), np.array([0.2])), (np.array([0.5]), np.array([0.8]))])
    assert fit.map.values[0] == pytest.approx(0.5, abs=1e-6)
    assert fit.objective == pytest.approx(0.09, abs=1e-6)
    assert fit.converged


def test_robust_single_env_equals_isotonic():
    rng = np.random.default_rng(4)
    for _ in range(20):
        f = rng.random(25)
        y = (rng.random(25) < f).astype(float)
        fit = cal.calibrate_robust([(f, y)])
        assert abs(fit.objective - cal.mse(cal.fit_isotonic(f, y), f, y)) < 1e-6


@pytest.mark.parametrize("seed", range(12))
def test_robust_matches_epigraph_oracle(seed):
    rng = np.random.default_rng(seed)
    k = 2 if seed < 6 else 3
    per_env = random_opposing_instance(rng, k=k, knots=int(rng.integers(2, 7)))
    fit = cal.calibrate_robust(per_env)
    oracle = robust_by_slsqp(per_env, fit.map.knots)
    assert fit.objective <= oracle + 1e-4
    assert fit.objective >= fit.lower_bound - 1e-9


@given(st.integers(0, 2**32 - 1))
def test_robust_bounds(seed):
    rng = np.random.default_rng(seed)
    per_env = random_opposing_instance(rng, k=int(rng.integers(1, 4)))
    fit = cal.calibrate_robust(per_env)
    assert fit.objective <= worst_env(cal.calibrate_naive(per_env), per_env) + 1e-12
    per_env_best = max(cal.mse(cal.fit_isotonic(f, y), f, y) for f, y in per_env)
    assert fit.objective >= per_env_best - 1e-9
    assert fit.objective == pytest.approx(worst_env(fit.map, per_env), abs=1e-12)


def test_robust_rejects_empty():
    with pytest.raises(ValueError):
        cal.calibrate_robust([])
    with pytest.raises(ValueError):
        cal.calibrate_robust([(np.array([]), np.array([]))])


def test_robust_unconverged_is_flagged():
    rng = np.random.default_rng(5)
    per_env = random_opposing_instance(rng, k=4, knots=5, n=60)
    fit = cal.calibrate_robust(per_env, max_iter=0, stability_tol=0.0)
    assert not fit.map.converged or fit.gap == 0.0


# ---- Lemma 1 surrogate ----

@given(st.integers(0, 2**32 - 1))
def test_conditional_mean_map_never_hurts(seed):
    rng = np.random.default_rng(seed)
    f = np.round(rng.random(60), 1)
    y = (rng.random(60) < rng.random()).astype(float)
    knots, means = cal.conditional_mean_map(f, y)
    g = means[np.searchsorted(knots, f)]
    assert np.mean((g - y) ** 2) <= np.mean((f - y) ** 2) + 1e-12
