import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from rsqs.ot import (
    DegenerateRowError, SizeError, TransportPlan, barycentric_map, beta_to_lambda, cost_matrix,
    enumerate_vertices, exact_ot_bruteforce, plan_entropy, plan_to_csv, sinkhorn, transport_cost, uniform,
)


def lp_cost(c, a, b):
    """Exact OT cost from a generic LP solver, independent of the enumeration oracle."""
    n, m = c.shape
    rows = np.kron(np.eye(n), np.ones(m))
    cols = np.kron(np.ones(n), np.eye(m))
    res = linprog(c.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]), bounds=(0, None),
                  method="highs")
    assert res.status == 0
    return res.fun


# ---------------------------------------------------------------- cost matrix

def test_cost_of_identical_points_is_zero():
    np.testing.assert_array_equal(cost_matrix([[1.0, 2.0]], [[1.0, 2.0]]), [[0.0]])


def test_cost_one_dimensional():
    np.testing.assert_array_equal(cost_matrix([[0.0]], [[1.0]]), [[1.0]])


def test_cost_matches_elementwise_recomputation():
    rng = np.random.default_rng(0)
    s, q = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    ref = np.array([[sum((s[i, k] - q[j, k]) ** 2 for k in range(5)) for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(cost_matrix(s, q), ref, atol=1e-12)


def test_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        cost_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


# ---------------------------------------------------------------- sinkhorn

@pytest.mark.parametrize("beta", [0.1, 0.5, 1.0])
def test_single_cell_plan(beta):
    plan = sinkhorn([[7.3]], beta=beta)
    np.testing.assert_allclose(plan.pi, [[1.0]], atol=1e-12)


def test_constant_cost_gives_independent_coupling():
    plan = sinkhorn(np.full((4, 6), 2.5), beta=0.5)
    np.testing.assert_allclose(plan.pi, np.full((4, 6), 1 / 24), atol=1e-12)


def test_three_by_three_near_exact():
    rng = np.random.default_rng(1)
    for _ in range(10):
        c = rng.uniform(0, 1, (3, 3))
        exact, _ = exact_ot_bruteforce(c)
        assert abs(sinkhorn(c, beta=0.999).cost - exact) <= 1e-3


def test_lambda_reduction():
    assert beta_to_lambda(0.5) == 1.0
    assert beta_to_lambda(0.25) == pytest.approx(3.0)
    assert beta_to_lambda(1.0) == 1e-4
    with pytest.raises(ValueError):
        beta_to_lambda(0.0)


def test_plan_minimises_entropic_objective():
    """Random feasible perturbations of the plan never lower beta<C,pi> + (1-beta) sum pi log pi."""
    rng = np.random.default_rng(2)
    c = rng.uniform(0, 2, (4, 5))
    beta = 0.4
    plan = sinkhorn(c, beta=beta, tol=1e-12, max_iter=5000)

    def obj(p):
        return beta * (c * p).sum() + (1 - beta) * (p * np.log(p)).sum()

    base = obj(plan.pi)
    for _ in range(200):
        d = rng.standard_normal((4, 5))
        d -= d.mean(1, keepdims=True)
        d -= d.mean(0, keepdims=True)  # keeps row and column sums
        p = plan.pi + 1e-3 * d / np.abs(d).max() * plan.pi.min()
        assert obj(p) >= base - 1e-12


@pytest.mark.parametrize("bad", [[0.0, 1.0], [-0.5, 1.5], [0.3, 0.3]])
def test_bad_marginals_rejected(bad):
    with pytest.raises(ValueError):
        sinkhorn(np.ones((2, 2)), a=bad)


def test_iteration_cap_reports_non_convergence():
    rng = np.random.default_rng(3)
    plan = sinkhorn(rng.uniform(0, 10, (8, 8)), beta=0.99, max_iter=2)
    assert not plan.converged and plan.n_iter == 2


def test_non_uniform_marginals_respected():
    rng = np.random.default_rng(4)
    a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(7))
    plan = sinkhorn(rng.uniform(0, 3, (5, 7)), a, b, beta=0.5)
    assert plan.converged and plan.marginal_violation() <= 1e-6


def test_scaled_costs_option_keeps_feasibility():
    c = np.random.default_rng(5).uniform(0, 50, (6, 6))
    plan = sinkhorn(c, beta=0.5, scale_costs=True)
    assert plan.converged and plan.marginal_violation() <= 1e-6
    assert plan.cost == pytest.approx(transport_cost(c, plan))


@given(st.integers(2, 12), st.integers(2, 12), st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_feasibility_property(n, m, beta, seed):
    c = np.random.default_rng(seed).uniform(0, 5, (n, m))
    plan = sinkhorn(c, beta=beta)
    assert (plan.pi >= 0).all()
    if plan.converged:
        assert plan.marginal_violation() <= 1e-6
        assert plan.pi.sum() == pytest.approx(1.0, abs=1e-6)


def test_entropy_and_cost_monotone_in_beta():
    rng = np.random.default_rng(6)
    betas = [0.1, 0.3, 0.5, 0.7, 0.9]
    for _ in range(10):
        c = cost_matrix(rng.standard_normal((6, 3)), rng.standard_normal((7, 3)))
        plans = [sinkhorn(c, beta=b, tol=1e-10, max_iter=5000) for b in betas]
        ent = [plan_entropy(p) for p in plans]
        cost = [p.cost for p in plans]
        assert all(e2 <= e1 + 1e-9 for e1, e2 in zip(ent, ent[1:]))
        assert all(c2 <= c1 + 1e-9 for c1, c2 in zip(cost, cost[1:]))


# ---------------------------------------------------------------- barycentric map

def test_permutation_plan_maps_to_matched_queries():
    q = np.arange(12.0).reshape(3, 4)
    pi = np.zeros((3, 3))
    pi[[0, 1, 2], [2, 0, 1]] = 1 / 3
    np.testing.assert_allclose(barycentric_map(pi, q), q[[2, 0, 1]], atol=1e-12)


def test_uniform_plan_maps_to_query_mean():
    q = np.random.default_rng(7).standard_normal((5, 3))
    out = barycentric_map(np.full((4, 5), 1 / 20), q)
    np.testing.assert_allclose(out, np.tile(q.mean(0), (4, 1)), atol=1e-12)


def test_mapped_points_in_convex_hull():
    rng = np.random.default_rng(8)
    q = rng.standard_normal((5, 3))
    pi = rng.uniform(0, 1, (4, 5))
    pi /= pi.sum()
    out = barycentric_map(pi, q)
    for s in out:
        # nonnegative weights summing to one that reproduce s
        a_eq = np.vstack([q.T, np.ones(5)])
        res = linprog(np.zeros(5), A_eq=a_eq, b_eq=np.append(s, 1.0), bounds=(0, None), method="highs")
        assert res.status == 0
        assert np.abs(a_eq @ res.x - np.append(s, 1.0)).max() <= 1e-9


def test_zero_row_raises():
    pi = np.array([[0.5, 0.5], [0.0, 0.0]])
    with pytest.raises(DegenerateRowError):
        barycentric_map(pi, np.eye(2))


def test_accepts_plan_object():
    c = np.random.default_rng(9).uniform(0, 1, (3, 4))
    plan = sinkhorn(c)
    np.testing.assert_array_equal(barycentric_map(plan, np.eye(4)), barycentric_map(plan.pi, np.eye(4)))


# ---------------------------------------------------------------- entropy

def test_uniform_entropy():
    assert plan_entropy(np.full((3, 4), 1 / 12)) == pytest.approx(np.log(12))


def test_permutation_entropy():
    assert plan_entropy(np.eye(5) / 5) == pytest.approx(np.log(5))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_entropy_bounds(n, m, seed):
    pi = np.random.default_rng(seed).dirichlet(np.ones(n * m)).reshape(n, m)
    assert -1e-12 <= plan_entropy(pi) <= np.log(n * m) + 1e-12


# ---------------------------------------------------------------- exact oracle

def test_identity_matching_zero_cost():
    cost, pi = exact_ot_bruteforce(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert cost == 0.0
    np.testing.assert_array_equal(pi, np.eye(2) / 2)


def test_anti_diagonal_matching_zero_cost():
    cost, pi = exact_ot_bruteforce(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert cost == 0.0
    np.testing.assert_array_equal(pi, np.fliplr(np.eye(2)) / 2)


def test_oracle_beats_every_vertex():
    rng = np.random.default_rng(10)
    c = rng.uniform(0, 1, (3, 3))
    cost, _ = exact_ot_bruteforce(c)
    for perm in itertools.permutations(range(3)):
        assert cost <= c[np.arange(3), perm].sum() / 3 + 1e-15
    for pi in enumerate_vertices(uniform(3), uniform(3)):
        assert cost <= transport_cost(c, pi) + 1e-12


@pytest.mark.parametrize("shape", [(2, 2), (3, 3), (4, 4), (5, 5), (2, 5), (3, 4), (4, 3), (2, 6)])
def test_oracle_agrees_with_linear_program(shape):
    rng = np.random.default_rng(shape[0] * 10 + shape[1])
    for _ in range(5):
        c = rng.uniform(0, 1, shape)
        a, b = uniform(shape[0]), uniform(shape[1])
        if shape[0] != shape[1]:
            a, b = rng.dirichlet(np.ones(shape[0])), rng.dirichlet(np.ones(shape[1]))
        cost, pi = exact_ot_bruteforce(c, a, b)
        assert cost == pytest.approx(lp_cost(c, a, b), abs=1e-9)
        np.testing.assert_allclose(pi.sum(1), a, atol=1e-9)
        np.testing.assert_allclose(pi.sum(0), b, atol=1e-9)


def test_oracle_size_limit():
    with pytest.raises(SizeError):
        exact_ot_bruteforce(np.ones((3, 5)))
    with pytest.raises(SizeError):
        exact_ot_bruteforce(np.ones((7, 7)))


# ---------------------------------------------------------------- export

def test_plan_csv(tmp_path):
    plan = TransportPlan(pi=np.array([[0.25, 0.25], [0.5, 0.0]]), a=np.array([0.5, 0.5]), b=np.array([0.75, 0.25]))
    path = tmp_path / "plan.csv"
    plan_to_csv(plan, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "row,col,mass"
    assert lines[1:] == ["0,0,0.25", "0,1,0.25", "1,0,0.5", "1,1,0.0"]
