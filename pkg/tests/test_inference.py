import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import _project_simplex, linked_data, random_stochastic
from simplicial.composition import dirichlet_sample
from simplicial.errors import (
    DegenerateScatter,
    IndexOutOfRange,
    InvalidConfig,
    ShapeMismatch,
    TooFewSamples,
)
from simplicial.inference import (
    ConfidenceEllipse,
    TestResult,
    bootstrap_coefficients,
    confidence_ellipse,
    fast_sl_replicates,
    min_volume_ellipse,
    naive_sl_replicates,
    permutation_p_value,
    project_simplex,
    ternary_coords,
    test_amalgamation as amalgamation_test,
    test_coefficients as coefficient_test,
    test_independence as independence_test,
)
from simplicial.scls import fit_scls
from simplicial.simulation import ground_truth_b

B3 = ground_truth_b(3)


# ------------------------------------------------------------------ p-values


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50), st.floats(-10, 10))
def test_p_value_formula(reps, obs):
    p = permutation_p_value(obs, reps)
    count = sum(r <= obs for r in reps)
    assert p * (len(reps) + 1) - 1 == pytest.approx(count, abs=1e-9)
    assert 0 < p <= 1


@pytest.mark.parametrize("seed", range(6))
def test_single_permutation_p_values(seed):
    Y, X = linked_data(30, B3, seed=seed, concentration=5)
    res = independence_test(Y, X, R=1, seed=seed)
    assert res.p_value in (0.5, 1.0)


def test_deterministic_link_gives_minimum_p():
    X = dirichlet_sample(np.ones(3), 100, 5)
    Y = X @ B3
    R = 199
    res = independence_test(Y, X, R=R, seed=1)
    assert res.p_value == 1 / (R + 1)
    assert res.statistic_kind == "SL" and res.count_le == 0


def test_result_serialisation():
    Y, X = linked_data(40, B3, seed=2)
    res = independence_test(Y, X, R=9, seed=4)
    doc = res.to_dict(include_replicates=True)
    assert doc["R"] == 9 and len(doc["replicates"]) == 9 and doc["seed"] == 4
    assert res.to_json() == independence_test(Y, X, R=9, seed=4).to_json()
    assert isinstance(res, TestResult)


def test_invalid_replicate_count():
    Y, X = linked_data(20, B3)
    with pytest.raises(InvalidConfig):
        independence_test(Y, X, R=0, seed=0)


# ------------------------------------------------------------------ fast path


def test_fast_path_identity_matches_direct_fit():
    Y, X = linked_data(60, B3, seed=3)
    fast = fast_sl_replicates(Y, X, [np.arange(60)])
    direct = fit_scls(Y, X).loss
    assert fast[0] + np.sum(Y * Y) == pytest.approx(direct, abs=1e-12)


@pytest.mark.parametrize("D_r", [3, 5])
def test_fast_path_matches_naive_refits(D_r):
    Y, X = linked_data(120, ground_truth_b(D_r), seed=D_r, concentration=5)
    rng = np.random.default_rng(0)
    perms = [rng.permutation(120) for _ in range(10)]
    fast = fast_sl_replicates(Y, X, perms) + np.sum(Y * Y)
    naive = naive_sl_replicates(Y, X, perms)
    np.testing.assert_allclose(fast, naive, rtol=0, atol=1e-8)


def test_fast_path_rejects_bad_permutation():
    Y, X = linked_data(10, B3)
    with pytest.raises(ShapeMismatch):
        fast_sl_replicates(Y, X, [np.zeros(10, dtype=int)])


@pytest.mark.parametrize("model", ["scls", "tflr"])
def test_thread_count_does_not_change_results(model):
    Y, X = linked_data(50, B3, seed=6, concentration=5)
    a = independence_test(Y, X, R=24, seed=9, model=model, threads=1)
    b = independence_test(Y, X, R=24, seed=9, model=model, threads=3)
    assert a.replicates.tobytes() == b.replicates.tobytes()
    assert a.p_value == b.p_value


def test_tflr_statistic_detects_link():
    Y, X = linked_data(100, B3, seed=7, concentration=5)
    res = independence_test(Y, X, R=49, seed=0, model="tflr")
    assert res.statistic_kind == "KLD"
    assert res.p_value == 1 / 50


# ------------------------------------------------------------ coefficients


def test_coefficients_at_estimate_give_large_p():
    Y, X = linked_data(80, B3, seed=8, concentration=5)
    res = coefficient_test(Y, X, fit_scls(Y, X).B, R=49, seed=1)
    assert res.statistic_observed == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == 1.0


def test_coefficients_identity_rejected_on_ten_part_data():
    rng = np.random.default_rng(11)
    B = random_stochastic((10, 10), rng)
    X = dirichlet_sample(np.ones(10), 100, rng)
    Y = dirichlet_sample(20 * X @ B, 100, rng)
    res = coefficient_test(Y, X, np.eye(10), R=99, seed=2)
    assert res.p_value <= 0.05


def _size(test, sims, **kw):
    rejections = 0
    for s in range(sims):
        Y, X = kw["gen"](s)
        res = test(Y, X, seed=s, **kw["args"])
        rejections += res.p_value <= 0.05
    return rejections / sims


def test_coefficient_test_size():
    B0 = np.array([[0.6, 0.2, 0.2], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
    rate = _size(coefficient_test, 500, gen=lambda s: linked_data(100, B0, seed=s, concentration=5),
                 args=dict(B0=B0, R=39))
    assert 0.03 <= rate <= 0.07


def test_restricted_rows_hypothesis():
    B = np.array([[0.7, 0.2, 0.1], [1 / 3, 1 / 3, 1 / 3], [0.1, 0.2, 0.7]])
    Y, X = linked_data(150, B, seed=3, concentration=10)
    B0 = np.full((1, 3), 1 / 3)
    kept = coefficient_test(Y, X, B0, R=49, seed=0, rows=[1])
    dropped = coefficient_test(Y, X, B0, R=49, seed=0, rows=[0])
    assert kept.p_value > 0.05
    assert dropped.p_value <= 0.05


# ------------------------------------------------------------ amalgamation


def test_amalgamation_argument_order_is_irrelevant():
    Y, X = linked_data(60, B3, seed=4)
    a = amalgamation_test(Y, X, 0, 2, R=29, seed=5)
    b = amalgamation_test(Y, X, 2, 0, R=29, seed=5)
    assert a.p_value == b.p_value


def test_amalgamation_power():
    B = np.array([[1.0, 0.0, 0.0], [0.3, 0.4, 0.3], [0.0, 0.0, 1.0]])
    Y, X = linked_data(200, B, seed=6, concentration=5)
    assert amalgamation_test(Y, X, 0, 2, R=99, seed=0).p_value <= 0.05


def test_amalgamation_size():
    B = np.array([[0.2, 0.5, 0.3], [0.6, 0.2, 0.2], [0.2, 0.5, 0.3]])
    rate = _size(amalgamation_test, 500, gen=lambda s: linked_data(100, B, seed=s, concentration=5),
                 args=dict(l1=0, l2=2, R=39))
    assert 0.03 <= rate <= 0.07


def test_amalgamation_argument_checks():
    Y, X = linked_data(20, B3)
    with pytest.raises(InvalidConfig):
        amalgamation_test(Y, X, 1, 1, R=5, seed=0)
    with pytest.raises(IndexOutOfRange):
        amalgamation_test(Y, X, 0, 3, R=5, seed=0)


# --------------------------------------------------------------- bootstrap


def test_bootstrap_identity_resample_returns_estimate():
    Y, X = linked_data(40, B3, seed=9)
    boot = bootstrap_coefficients(Y, X, 1, seed=0, indices=[np.arange(40)])
    np.testing.assert_array_equal(boot[0].B, fit_scls(Y, X).B)


def test_bootstrap_deterministic_and_thread_invariant():
    Y, X = linked_data(40, B3, seed=10)
    a = bootstrap_coefficients(Y, X, 12, seed=3, threads=1)
    b = bootstrap_coefficients(Y, X, 12, seed=3, threads=4)
    assert all(x.B.tobytes() == y.B.tobytes() for x, y in zip(a, b))
    for c in a:
        np.testing.assert_allclose(c.B.sum(axis=1), 1.0, atol=1e-12)


def test_bootstrap_bias_shrinks_with_n():
    bias = []
    for n in (50, 500):
        Y, X = linked_data(n, B3, seed=n, concentration=5)
        Bhat = fit_scls(Y, X).B
        boot = bootstrap_coefficients(Y, X, 100, seed=1)
        bias.append(np.abs(np.mean([c.B for c in boot], axis=0) - Bhat).mean())
    assert bias[1] < bias[0]


# --------------------------------------------------------------- ellipses


def from_ternary(P):
    P = np.atleast_2d(P)
    y3 = 2 * P[:, 1] / math.sqrt(3)
    y2 = P[:, 0] - y3 / 2
    return np.column_stack([1 - y2 - y3, y2, y3])


def test_ternary_coordinates():
    np.testing.assert_allclose(ternary_coords(np.eye(3)), [[0, 0], [1, 0], [0.5, math.sqrt(3) / 2]], atol=1e-15)
    np.testing.assert_allclose(ternary_coords(np.full(3, 1 / 3)), [0.5, math.sqrt(3) / 6], atol=1e-15)
    np.testing.assert_allclose(from_ternary(ternary_coords(np.array([[0.2, 0.3, 0.5]]))), [[0.2, 0.3, 0.5]])


def boot_from_points(P, row=0):
    rows = from_ternary(P)
    mats = []
    for r in rows:
        B = np.tile([1 / 3, 1 / 3, 1 / 3], (2, 1))
        B[row] = r
        mats.append(B)
    return mats


@pytest.mark.parametrize("r", [0.02, 0.05, 0.1])
def test_circle_gives_circle(r):
    t = np.linspace(0, 2 * np.pi, 60, endpoint=False)
    c = np.array([0.5, math.sqrt(3) / 6])
    P = c + r * np.column_stack([np.cos(t), np.sin(t)])
    e = confidence_ellipse(boot_from_points(P), 0, level=1.0)
    np.testing.assert_allclose(e.center, c, atol=1e-3 * r)
    np.testing.assert_allclose(np.sqrt(np.linalg.eigvalsh(e.shape)), [r, r], rtol=1e-3)


def test_mvee_contains_points_and_is_tight(rng):
    P = rng.normal(size=(50, 2)) @ np.array([[1.0, 0.3], [0.0, 0.4]])
    c, A = min_volume_ellipse(P)
    m = np.einsum("ij,jk,ik->i", P - c, A, P - c)
    assert m.max() <= 1 + 1e-6
    assert np.sort(m)[-3:].min() >= 1 - 1e-3  # at least three support points on the boundary


def test_identical_rows_are_degenerate():
    boot = [np.array([[0.2, 0.3, 0.5]])] * 20
    with pytest.raises(DegenerateScatter):
        confidence_ellipse(boot, 0)


def test_collinear_rows_report_direction():
    P = np.column_stack([np.linspace(0.3, 0.6, 20), np.full(20, 0.3)])
    with pytest.raises(DegenerateScatter) as info:
        confidence_ellipse(boot_from_points(P), 0)
    np.testing.assert_allclose(np.abs(info.value.direction), [0, 1], atol=1e-12)


@pytest.mark.parametrize("level", [0.5, 0.9, 0.95, 1.0])
def test_level_retains_points(level):
    Y, X = linked_data(80, B3, seed=12, concentration=5)
    boot = bootstrap_coefficients(Y, X, 60, seed=2)
    e = confidence_ellipse(boot, 1, level=level)
    P = ternary_coords(np.array([b.B[1] for b in boot]))
    assert e.contains(P).sum() >= math.ceil(level * 60)
    if level == 1.0:
        assert np.all(e.contains(P))
    assert np.all(np.linalg.eigvalsh(e.shape) > 0)
    back = ConfidenceEllipse.from_dict(e.to_dict())
    np.testing.assert_array_equal(back.shape, e.shape)
    assert back.mahalanobis2(e.boundary(8)) == pytest.approx(np.ones(8))


def test_ellipse_argument_checks():
    Y, X = linked_data(30, B3, seed=1)
    boot = bootstrap_coefficients(Y, X, 12, seed=0)
    with pytest.raises(TooFewSamples):
        confidence_ellipse(boot[:9], 0)
    with pytest.raises(InvalidConfig):
        confidence_ellipse(boot, 0, level=0.0)
    with pytest.raises(IndexOutOfRange):
        confidence_ellipse(boot, 3)
    with pytest.raises(ShapeMismatch):
        confidence_ellipse([np.full((2, 4), 0.25)] * 12, 0)


@settings(max_examples=100)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8))
def test_simplex_projection_matches_reference(v):
    v = np.array(v)
    p = project_simplex(v)
    np.testing.assert_allclose(p, _project_simplex(v), atol=1e-12)
    assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)
