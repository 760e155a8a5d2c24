import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipfield.errors import CapacityError, ConvergenceError, ValidationError
from chipfield.transport import (
    DiscreteMeasure,
    cost_matrix,
    exact_w2,
    sinkhorn_w2,
    write_plan_csv,
)


def random_measure(rng, n, box=1.0):
    pts = rng.uniform(-box, box, size=(n, 2))
    w = rng.uniform(0.1, 1.0, size=n)
    return DiscreteMeasure(pts, w / w.sum())


def dirac(x, y):
    return DiscreteMeasure(np.array([[x, y]]), np.array([1.0]))


# -- cost matrix ----------------------------------------------------------------


def test_cost_matrix_identical_points():
    assert cost_matrix([[0.0, 0.0]], [[0.0, 0.0]]) == pytest.approx(np.array([[0.0]]))


def test_cost_matrix_three_four_five():
    assert cost_matrix([[0.0, 0.0]], [[3.0, 4.0]])[0, 0] == pytest.approx(25.0)


def test_cost_matrix_two_by_two_hand_checked():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [2.0, 2.0]])
    expected = np.array([[1.0, 8.0], [2.0, 5.0]])  # four scalar distances by hand
    assert np.allclose(cost_matrix(a, b), expected)


# -- exact LP solver ------------------------------------------------------------


def test_exact_w2_between_diracs_is_euclidean_distance():
    w, plan = exact_w2(dirac(0.0, 0.0), dirac(3.0, 4.0))
    assert w == pytest.approx(5.0, abs=1e-12)
    assert plan.coupling == pytest.approx(np.array([[1.0]]))


def test_exact_w2_identity():
    rng = np.random.default_rng(0)
    mu = random_measure(rng, 6)
    w, _ = exact_w2(mu, mu)
    assert w == pytest.approx(0.0, abs=1e-8)


def test_exact_w2_two_point_equal_weights_vertex_enumeration():
    # with weights (1/2, 1/2) each, the transport polytope has exactly two
    # vertices (the two permutation couplings); the LP must pick the cheaper one
    rng = np.random.default_rng(42)
    for _ in range(10):
        a_pts = rng.uniform(-1, 1, (2, 2))
        b_pts = rng.uniform(-1, 1, (2, 2))
        a = DiscreteMeasure(a_pts, [0.5, 0.5])
        b = DiscreteMeasure(b_pts, [0.5, 0.5])
        C = cost_matrix(a_pts, b_pts)
        vertex_costs = [
            0.5 * (C[0, 0] + C[1, 1]),
            0.5 * (C[0, 1] + C[1, 0]),
        ]
        w, _ = exact_w2(a, b)
        assert w**2 == pytest.approx(min(vertex_costs), abs=1e-10)


def test_exact_w2_general_two_by_two_endpoint_oracle():
    # for marginals (a, 1-a), (b, 1-b) the polytope is the segment
    # M11 in [max(0, a+b-1), min(a, b)]; the linear cost is minimized at an end
    rng = np.random.default_rng(3)
    for _ in range(10):
        pa, pb = rng.uniform(0.2, 0.8, 2)
        a = DiscreteMeasure(rng.uniform(-1, 1, (2, 2)), [pa, 1 - pa])
        b = DiscreteMeasure(rng.uniform(-1, 1, (2, 2)), [pb, 1 - pb])
        C = cost_matrix(a.support, b.support)

        def segment_cost(m11):
            m = np.array([[m11, pa - m11], [pb - m11, 1 - pa - pb + m11]])
            return float(np.sum(m * C))

        lo, hi = max(0.0, pa + pb - 1.0), min(pa, pb)
        w, _ = exact_w2(a, b)
        assert w**2 == pytest.approx(min(segment_cost(lo), segment_cost(hi)), abs=1e-10)


def test_exact_w2_capacity_limit():
    rng = np.random.default_rng(1)
    big = random_measure(rng, 9)
    other = random_measure(rng, 8)
    with pytest.raises(CapacityError):
        exact_w2(big, other)


def test_plan_marginals_match_inputs():
    rng = np.random.default_rng(5)
    a = random_measure(rng, 7)
    b = random_measure(rng, 5)
    _, plan = exact_w2(a, b)
    assert np.abs(plan.coupling.sum(axis=1) - a.weights).max() < 1e-8
    assert np.abs(plan.coupling.sum(axis=0) - b.weights).max() < 1e-8


# -- entropic solver --------------------------------------------------------------


def test_sinkhorn_forced_plan_between_diracs():
    for eps in (1e-1, 1e-3):
        cost, plan = sinkhorn_w2(dirac(0.0, 0.0), dirac(3.0, 4.0), eps=eps)
        assert cost == pytest.approx(25.0, abs=1e-6)
        assert plan.coupling[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_sinkhorn_identity_cost_small():
    rng = np.random.default_rng(2)
    mu = random_measure(rng, 5)
    cost, _ = sinkhorn_w2(mu, mu, eps=1e-3)
    # entropic bias: identical measures keep a near-diagonal plan
    assert 0 <= cost < 5e-3


def test_sinkhorn_matches_exact_lp_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = random_measure(rng, 5)
        b = random_measure(rng, 5)
        exact, _ = exact_w2(a, b)
        eps = 1e-3 * cost_matrix(a.support, b.support).max()
        cost, plan = sinkhorn_w2(a, b, eps=eps)
        assert abs(cost - exact**2) <= 1e-3 * (1 + exact**2)
        assert np.abs(plan.coupling.sum(axis=1) - a.weights).max() < 1e-8
        assert np.abs(plan.coupling.sum(axis=0) - b.weights).max() < 1e-8


def test_sinkhorn_cost_decreases_with_eps_toward_lp():
    rng = np.random.default_rng(11)
    a = random_measure(rng, 6)
    b = random_measure(rng, 6)
    exact, _ = exact_w2(a, b)
    maxc = cost_matrix(a.support, b.support).max()
    costs = [sinkhorn_w2(a, b, eps=maxc * s)[0] for s in (0.1, 0.05, 0.025, 0.0125, 1e-3)]
    for hi, lo in zip(costs, costs[1:]):
        assert lo <= hi + 1e-9
    assert costs[-1] >= exact**2 - 1e-9
    assert abs(costs[-1] - exact**2) < abs(costs[0] - exact**2) + 1e-12


def test_sinkhorn_symmetry():
    rng = np.random.default_rng(13)
    a = random_measure(rng, 5)
    b = random_measure(rng, 5)
    eps = 1e-3
    cab, _ = sinkhorn_w2(a, b, eps=eps)
    cba, _ = sinkhorn_w2(b, a, eps=eps)
    assert cab == pytest.approx(cba, rel=1e-6, abs=1e-9)


def test_sinkhorn_handles_zero_weight_atoms():
    a = DiscreteMeasure(np.array([[0.0, 0.0], [5.0, 5.0]]), np.array([1.0, 0.0]))
    b = DiscreteMeasure(np.array([[1.0, 0.0], [9.0, 9.0]]), np.array([1.0, 0.0]))
    cost, plan = sinkhorn_w2(a, b, eps=1e-2)
    assert cost == pytest.approx(1.0, abs=1e-8)
    assert plan.coupling[1].sum() == 0.0
    assert plan.coupling[:, 1].sum() == 0.0


def test_sinkhorn_nonconvergence_raises():
    rng = np.random.default_rng(17)
    a = random_measure(rng, 6)
    b = random_measure(rng, 6)
    with pytest.raises(ConvergenceError) as exc:
        sinkhorn_w2(a, b, eps=1e-6, tol=1e-14, max_iter=3)
    assert exc.value.residual is not None


def test_sinkhorn_rejects_bad_eps():
    with pytest.raises(ValidationError):
        sinkhorn_w2(dirac(0, 0), dirac(1, 1), eps=0.0)


# -- metric axioms (exact solver) -------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_exact_metric_axioms_on_random_triples(seed):
    rng = np.random.default_rng(seed)
    a = random_measure(rng, 4)
    b = random_measure(rng, 4)
    c = random_measure(rng, 4)
    wab, _ = exact_w2(a, b)
    wba, _ = exact_w2(b, a)
    wac, _ = exact_w2(a, c)
    wcb, _ = exact_w2(c, b)
    assert abs(wab - wba) <= 1e-8
    assert wab <= wac + wcb + 1e-8


# -- validation / misc -------------------------------------------------------------


def test_measure_validation():
    with pytest.raises(ValidationError):
        DiscreteMeasure(np.array([[0.0, 0.0]]), np.array([0.5]))
    with pytest.raises(ValidationError):
        DiscreteMeasure(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([1.5, -0.5]))


def test_plan_csv_export(tmp_path):
    _, plan = exact_w2(dirac(0, 0), dirac(1, 1))
    path = tmp_path / "plan.csv"
    write_plan_csv(plan, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "i,j,mass"
    assert lines[1] == "0,0,1.0"
