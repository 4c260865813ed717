import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import EQ14_B, linked_data, random_stochastic
from simplicial.composition import CompositionMatrix, dirichlet_sample, power_transform
from simplicial.errors import (
    IndexOutOfRange,
    InsufficientTimePoints,
    InvalidComposition,
    ShapeMismatch,
    SingleLevel,
)
from simplicial.qp import QPStatus, factorize, solve_qp
from simplicial.scls import (
    CoefficientMatrix,
    SclsFit,
    assemble_qp,
    constraint_blocks,
    encode_categorical,
    fit_alpha_scls,
    fit_ar1,
    fit_multi,
    fit_scls,
    fit_weighted,
    interpret_delta,
    lag_pairs,
    load_fit_json,
    predict,
    solve_scls,
    squared_loss,
)

B3 = np.array([[0.45, 0.00, 0.55], [0.20, 0.34, 0.46], [0.76, 0.01, 0.23]])

# Constraint rows for D_r = D_p = 3: unity-sum block, identity block, negated identity block.
A1_DISPLAY = np.vstack([np.tile(np.eye(3), (1, 3)), np.eye(9), -np.eye(9)])
B0_DISPLAY = np.r_[np.ones(3), np.zeros(9), -np.ones(9)]


# ------------------------------------------------------------- QP assembly


def test_constraint_structure_for_three_by_three():
    A, b0, meq = constraint_blocks(3, 3, include_upper=True)
    np.testing.assert_array_equal(A, A1_DISPLAY)
    np.testing.assert_array_equal(b0, B0_DISPLAY)
    assert meq == 3
    A, b0, meq = constraint_blocks(3, 3)
    np.testing.assert_array_equal(A, A1_DISPLAY[:12])
    np.testing.assert_array_equal(b0, B0_DISPLAY[:12])


def test_assemble_qp_terms(rng):
    Y, X = linked_data(20, B3, seed=1)
    qp = assemble_qp(Y, X)
    np.testing.assert_allclose(qp.Dmat, np.kron(np.eye(3), X.T @ X))
    np.testing.assert_allclose(qp.dvec, (X.T @ Y).ravel(order="F"))
    # SL(B) = tr(Y'Y) + 2 * objective(vec B) for any B.
    B = random_stochastic((3, 3), rng)
    sl = squared_loss(Y, X, B)
    assert sl == pytest.approx(np.sum(Y * Y) + 2 * qp.objective(B.ravel(order="F")), abs=1e-12)


@pytest.mark.parametrize("D_p, D_r", [(2, 5), (4, 3), (5, 2)])
def test_rectangular_equality_block(D_p, D_r):
    A, _, meq = constraint_blocks(D_r, D_p)
    B = random_stochastic((D_p, D_r), np.random.default_rng(0))
    np.testing.assert_allclose(A[:meq] @ B.ravel(order="F"), np.ones(D_p))
    assert meq == D_p


@pytest.mark.parametrize("seed", range(10))
def test_upper_bound_block_changes_nothing(seed):
    Y, X = linked_data(30, B3, seed=seed)
    Ba, SLa, _, _ = solve_scls(Y, X)
    Bb, SLb, sol, _ = solve_scls(Y, X, include_upper=True)
    assert sol.status is QPStatus.OPTIMAL
    np.testing.assert_allclose(Ba, Bb, atol=1e-12)
    assert SLa == pytest.approx(SLb, abs=1e-12)


# ------------------------------------------------------------------- fits


@pytest.mark.parametrize("D", [2, 3, 5])
def test_identity_when_response_equals_predictor(D):
    X = dirichlet_sample(np.ones(D), 50, 3)
    fit = fit_scls(X, X)
    np.testing.assert_allclose(fit.B, np.eye(D), atol=1e-10)
    assert fit.loss == pytest.approx(0.0, abs=1e-18)


def test_fit_is_coefficient_matrix_and_labels():
    Y = CompositionMatrix(linked_data(40, B3, seed=2)[0], ("a", "b", "c"))
    X = CompositionMatrix(linked_data(40, B3, seed=2)[1], ("p", "q", "r"))
    fit = fit_scls(Y, X)
    assert fit.coefficients.response_names == ("a", "b", "c")
    assert fit.coefficients.predictor_names == ("p", "q", "r")
    np.testing.assert_allclose(fit.fitted.sum(axis=1), 1.0, atol=1e-12)
    assert fit.solver.status == "Optimal"


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 2**32 - 1), st.booleans())
def test_fit_is_row_stochastic_and_optimal(D_p, D_r, seed, zeros):
    rng = np.random.default_rng(seed)
    X = random_stochastic((25, D_p), rng)
    Y = random_stochastic((25, D_r), rng)
    if zeros:
        X[::3, 0] = 0
        Y[::4, -1] = 0
        X /= X.sum(axis=1, keepdims=True)
        Y /= Y.sum(axis=1, keepdims=True)
    fit = fit_scls(Y, X)
    B = fit.B
    assert np.all(B >= 0) and np.all(B <= 1)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
    for _ in range(1000):
        assert fit.loss <= squared_loss(Y, X, random_stochastic((D_p, D_r), rng)) + 1e-12


def test_alpha_one_is_bitwise_scls():
    Y, X = linked_data(60, B3, seed=4)
    a, b = fit_scls(Y, X), fit_alpha_scls(Y, X, 1.0)
    assert a.B.tobytes() == b.B.tobytes()
    assert a.loss == b.loss and a.fitted.tobytes() == b.fitted.tobytes()


def test_alpha_fit_back_transforms():
    Y, X = linked_data(60, B3, seed=5, concentration=20)
    fit = fit_alpha_scls(Y, X, 0.5)
    np.testing.assert_allclose(predict(fit, X).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(fit.fitted, power_transform(X @ fit.B, 2.0), atol=1e-12)


def test_coefficient_matrix_validation():
    with pytest.raises(InvalidComposition):
        CoefficientMatrix(np.array([[0.5, 0.6]]))
    with pytest.raises(InvalidComposition):
        CoefficientMatrix(np.array([[1.5, -0.5]]))
    with pytest.raises(ShapeMismatch):
        CoefficientMatrix(np.eye(2), predictor_names=("a",))
    c = CoefficientMatrix(np.eye(2))
    assert c.predictor_names == ("X1", "X2") and c.response_names == ("Y1", "Y2")
    back = CoefficientMatrix.from_dict(c.to_dict())
    np.testing.assert_array_equal(back.B, c.B)
    assert back.predictor_names == c.predictor_names


def test_fit_json_round_trip(tmp_path):
    Y, X = linked_data(30, B3, seed=6)
    fit = fit_scls(Y, X)
    path = tmp_path / "fit.json"
    fit.to_json(path)
    doc = json.loads(path.read_text())
    assert doc["solver"]["status"] == "Optimal"
    back = load_fit_json(path)
    np.testing.assert_array_equal(back.B, fit.B)
    np.testing.assert_allclose(predict(back, X), fit.fitted)


# ---------------------------------------------------------- interpretation


def test_predict_examples():
    fit = fit_scls(*linked_data(30, B3, seed=0))
    one_hot = np.eye(3)
    np.testing.assert_allclose(predict(fit, one_hot), fit.B)
    ident = fit_scls(np.eye(3)[[0, 1, 2, 0]], np.eye(3)[[0, 1, 2, 0]])
    x = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_allclose(predict(ident, x), x, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        predict(fit, np.ones((1, 4)) / 4)


def test_predict_hand_product():
    coef = CoefficientMatrix(EQ14_B[:3])
    fit = SclsFit(coef, 0.0, np.empty((0, 3)))
    np.testing.assert_allclose(predict(fit, [0.5, 0.5, 0.0]), [0.15, 0.35, 0.50], atol=1e-15)


def test_interpret_delta_example():
    out = interpret_delta(EQ14_B, 0, 1, 0.1)
    np.testing.assert_allclose(out, [0.01, 0.01, -0.02], rtol=0, atol=1e-15)


@given(st.integers(0, 3), st.integers(0, 3), st.floats(-1, 1))
def test_interpret_delta_sums_to_zero(j, l, delta):
    B = random_stochastic((4, 3), np.random.default_rng(j * 4 + l))
    out = interpret_delta(B, j, l, delta)
    assert abs(out.sum()) <= 1e-15
    if j == l:
        assert np.all(out == 0)


def test_interpret_delta_bounds():
    with pytest.raises(IndexOutOfRange):
        interpret_delta(EQ14_B, 0, 4, 0.1)


# ------------------------------------------------------- several predictors


def test_multi_with_duplicate_predictor_matches_single():
    Y, X = linked_data(80, B3, seed=7)
    single = fit_scls(Y, X)
    multi = fit_multi(Y, [X, X])
    assert multi.is_multi and multi.solver.repaired
    assert multi.loss == pytest.approx(single.loss, abs=1e-6)
    np.testing.assert_allclose(multi.fitted, single.fitted, atol=1e-5)
    np.testing.assert_allclose(multi.fitted.sum(axis=1), 1.0, atol=1e-8)


def test_multi_loss_not_worse_than_halved_single_models(rng):
    n = 100
    X1 = dirichlet_sample(np.ones(3), n, rng)
    X2 = dirichlet_sample(np.ones(4), n, rng)
    B1 = random_stochastic((3, 3), rng)
    B2 = random_stochastic((4, 3), rng)
    Y = dirichlet_sample(30 * (0.5 * X1 @ B1 + 0.5 * X2 @ B2), n, rng)
    multi = fit_multi(Y, [X1, X2])
    assert [c.B.shape for c in multi.coefficients] == [(3, 3), (4, 3)]
    # Any single-predictor fit paired with a barycentric row for the other is feasible.
    for Xa, Xb, Bs in ((X1, X2, fit_scls(Y, X1).B), (X2, X1, fit_scls(Y, X2).B)):
        for Bo in (np.full((Xb.shape[1], 3), 1 / 3), random_stochastic((Xb.shape[1], 3), rng)):
            alt = squared_loss(Y, 0.5 * np.hstack([Xa, Xb]), np.vstack([Bs, Bo]))
            assert multi.loss <= alt + 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_weighted_recovers_dominant_predictor(seed):
    rng = np.random.default_rng(seed)
    n = 500
    X1 = dirichlet_sample(np.ones(3), n, rng)
    X2 = dirichlet_sample(np.ones(3), n, rng)
    # A zero in every column of B1 keeps a constant share from being shifted onto X2.
    B1 = np.array([[0.9, 0.1, 0.0], [0.0, 0.9, 0.1], [0.1, 0.0, 0.9]])
    Y = dirichlet_sample(50 * (X1 @ B1), n, rng, allow_zero=True)
    fit = fit_weighted(Y, [X1, X2])
    assert fit.weights[0] >= 0.95
    hist = np.array(fit.loss_history)
    assert np.all(np.diff(hist) <= 1e-12)


def test_weighted_with_fixed_equal_weights_is_multi(rng):
    Y, X1 = linked_data(60, B3, seed=8)
    X2 = dirichlet_sample(np.ones(2), 60, rng)
    w = fit_weighted(Y, [X1, X2], fixed_weights=[0.5, 0.5])
    m = fit_multi(Y, [X1, X2])
    np.testing.assert_array_equal(w.B, m.B)
    assert w.loss == pytest.approx(m.loss, abs=1e-14)
    with pytest.raises(ShapeMismatch):
        fit_weighted(Y, [X1, X2], fixed_weights=[0.7, 0.7])


def test_multi_predict(rng):
    Y, X1 = linked_data(60, B3, seed=9)
    X2 = dirichlet_sample(np.ones(2), 60, rng)
    fit = fit_weighted(Y, [X1, X2])
    np.testing.assert_allclose(predict(fit, [X1, X2]), fit.fitted, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        predict(fit, X1)


def test_multi_needs_two_predictors():
    Y, X = linked_data(20, B3)
    with pytest.raises(ShapeMismatch):
        fit_multi(Y, [X])


# ------------------------------------------------------------ AR(1) / ANOVA


def test_lag_pairs_within_groups():
    cur, prev = lag_pairs(6, ["a", "a", "a", "b", "b", "b"])
    np.testing.assert_array_equal(cur, [1, 2, 4, 5])
    np.testing.assert_array_equal(prev, [0, 1, 3, 4])
    with pytest.raises(InsufficientTimePoints):
        lag_pairs(3, ["a", "a", "b"])


def test_ar1_constant_series_gives_identity(rng):
    base = dirichlet_sample(np.ones(3), 4, rng)
    series = np.vstack([np.vstack([b] * 3) for b in base])
    groups = np.repeat(np.arange(4), 3)
    # Rows within a group are constant, so Y_t = Y_{t-1} exactly.
    fit = fit_ar1(series, groups)
    np.testing.assert_allclose(fit.B, np.eye(3), atol=1e-8)


def test_ar1_recovers_markov_transition():
    rng = np.random.default_rng(12)
    P = np.array([[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.1, 0.3, 0.6]])
    T, groups = 25, 20
    rows, labels = [], []
    for g in range(groups):
        y = dirichlet_sample(np.ones(3), 1, rng)[0]
        for _ in range(T + 1):
            rows.append(y)
            labels.append(g)
            y = dirichlet_sample(60 * (y @ P), 1, rng)[0]
    fit = fit_ar1(np.array(rows), labels)
    assert np.abs(fit.B - P).max() <= 0.05


def test_ar1_catalan_shape(rng):
    series = dirichlet_sample(np.ones(4), 41 * 8, rng)
    groups = np.repeat(np.arange(41), 8)
    fit = fit_ar1(series, groups)
    assert fit.fitted.shape == (287, 4)


def test_categorical_encoding_and_group_means(rng):
    C = encode_categorical(["a", "b", "a"])
    np.testing.assert_array_equal(C.values, [[1, 0], [0, 1], [1, 0]])
    assert C.names == ("a", "b")
    with pytest.raises(SingleLevel):
        encode_categorical(["x", "x"])
    labels = rng.choice(["g1", "g2", "g3"], 90)
    X = encode_categorical(labels)
    Y = dirichlet_sample([3, 4, 5], 90, rng)
    fit = fit_scls(Y, X)
    for j, g in enumerate(X.names):
        np.testing.assert_allclose(fit.B[j], Y[labels == g].mean(axis=0), atol=1e-10)


def test_singular_predictor_is_repaired():
    # Two identical predictor columns make X'X singular.
    rng = np.random.default_rng(3)
    Z = dirichlet_sample(np.ones(2), 40, rng)
    X = np.column_stack([Z[:, 0] / 2, Z[:, 0] / 2, Z[:, 1]])
    Y = dirichlet_sample(np.ones(3), 40, rng)
    assert factorize(np.kron(np.eye(3), X.T @ X)) is None
    fit = fit_scls(Y, X)
    assert fit.solver.repaired
    np.testing.assert_allclose(fit.B.sum(axis=1), 1.0, atol=1e-12)
    sol = solve_qp(assemble_qp(Y, X))
    assert sol.status is QPStatus.NOT_POSITIVE_DEFINITE
