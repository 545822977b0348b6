import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flue.coding import EncodingMatrix, build_encoding_matrix
from flue.problem import (LeastSquaresProblem, coded_gradient, generate_problem, gradient_bounds,
                          local_gradient, optimum, partition_rows)
from flue.numerics import norm_2inf


@pytest.fixture(scope="module")
def small():
    return generate_problem(70, 40, 7, 1)


def test_reference_partition_sizes():
    p = generate_problem(150, 100, 5, 0)
    assert [b - a for a, b in p.partition] == [30] * 5


def test_seven_node_partition_sizes(small):
    assert [b - a for a, b in small.partition] == [10] * 7


def test_remainder_goes_to_first_nodes():
    assert partition_rows(4, 3) == [(0, 2), (2, 3), (3, 4)]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(1, 30))
def test_partition_sizes_differ_by_at_most_one(m, nodes):
    if nodes > m:
        with pytest.raises(ValueError):
            partition_rows(m, nodes)
        return
    sizes = [b - a for a, b in partition_rows(m, nodes)]
    assert sum(sizes) == m and max(sizes) - min(sizes) <= 1


def test_generation_is_deterministic():
    a, b = generate_problem(20, 5, 3, 8), generate_problem(20, 5, 3, 8)
    assert np.array_equal(a.f_mat, b.f_mat) and np.array_equal(a.x_o, b.x_o)
    assert np.all(np.abs(a.x_o) <= 1)


def test_generation_rejects_bad_shape():
    with pytest.raises(ValueError):
        generate_problem(5, 5, 2, 0)


def test_local_gradient_vanishes_at_generator(small):
    for i in range(small.nodes):
        assert np.allclose(local_gradient(small, i, small.x_o), 0.0, atol=1e-12)


def test_local_gradient_hand_case():
    p = LeastSquaresProblem(f_mat=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), x_o=np.array([1.0, -1.0]),
                            y=np.zeros(3), partition=((0, 1), (1, 3)))
    assert np.array_equal(local_gradient(p, 0, np.array([3.0, 5.0])), [6.0, 0.0])


def test_partition_additivity(small):
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.standard_normal(small.n_dim)
        total = sum(local_gradient(small, i, x) for i in range(small.nodes))
        full = small.gradient(x)
        assert np.linalg.norm(total - full) <= 1e-10 * np.linalg.norm(full)
        f_sum = sum(small.local_objective(i, x) for i in range(small.nodes))
        assert f_sum == pytest.approx(small.objective(x), rel=1e-10)


def test_batched_gradients_match_per_node(small):
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((small.nodes, 3, small.n_dim))
    batched = small.batched_local_gradients(pts)
    for i in range(small.nodes):
        for k in range(3):
            assert np.allclose(batched[i, k], local_gradient(small, i, pts[i, k]), rtol=1e-12, atol=1e-10)


def test_gradient_matches_central_differences(small):
    rng = np.random.default_rng(2)
    for _ in range(10):
        x = rng.standard_normal(small.n_dim)
        h = 1e-6 * (1 + np.linalg.norm(x))
        eye = np.eye(small.n_dim)
        fd = np.array([(small.objective(x + h * e) - small.objective(x - h * e)) / (2 * h) for e in eye])
        g = small.gradient(x)
        assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_objective_is_convex(seed, lam):
    p = generate_problem(12, 4, 3, 5)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 4)) * 3
    mid = p.objective(lam * a + (1 - lam) * b)
    assert mid <= lam * p.objective(a) + (1 - lam) * p.objective(b) + 1e-9 * (1 + mid)


def test_scale_multiplies_objective_and_gradient():
    p1 = generate_problem(20, 5, 2, 3)
    p2 = generate_problem(20, 5, 2, 3, scale=0.1)
    x = np.ones(5)
    assert p2.objective(x) == pytest.approx(0.1 * p1.objective(x), rel=1e-14)
    assert np.allclose(p2.gradient(x), 0.1 * p1.gradient(x), rtol=1e-14)
    assert np.allclose(local_gradient(p2, 1, x), 0.1 * local_gradient(p1, 1, x), rtol=1e-14)
    with pytest.raises(ValueError):
        generate_problem(20, 5, 2, 3, scale=0.0)


def test_coded_gradient_scales_local_gradient(small):
    b = np.full((7, 7), 0.5)
    enc = EncodingMatrix(b)
    x = np.ones(small.n_dim)
    assert np.array_equal(coded_gradient(small, enc, 0, 3, x), 0.5 * local_gradient(small, 3, x))
    assert np.allclose(coded_gradient(small, enc, 2, 1, small.x_o), 0.0, atol=1e-12)


def test_optimum_recovers_generator(small):
    x_star, f_star = optimum(small)
    assert np.linalg.norm(x_star - small.x_o) / np.linalg.norm(small.x_o) <= 1e-8
    assert f_star <= 1e-18 * float(small.y @ small.y)


def test_optimum_hand_case():
    f = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    x_o = np.array([1.0, -1.0])
    p = LeastSquaresProblem(f_mat=f, x_o=x_o, y=f @ x_o, partition=((0, 3),))
    x_star, f_star = optimum(p)
    assert np.allclose(x_star, x_o, atol=1e-14)
    assert f_star == pytest.approx(0.0, abs=1e-28)


def test_json_round_trip_is_exact():
    p = generate_problem(20, 5, 3, 4, scale=0.1)
    q = LeastSquaresProblem.from_json(p.to_json())
    assert np.array_equal(p.f_mat, q.f_mat) and np.array_equal(p.y, q.y)
    assert p.partition == q.partition and p.scale == q.scale
    assert q.to_json() == p.to_json()


def test_gradient_bound_formula():
    enc = build_encoding_matrix(4, 4, 0)
    gb = gradient_bounds(2.5, enc)
    assert gb.g_bound == np.sqrt(4) * norm_2inf(enc.b) * 2.5


def test_invalid_partition_is_rejected():
    with pytest.raises(ValueError):
        LeastSquaresProblem(f_mat=np.ones((3, 1)), x_o=np.ones(1), y=np.ones(3), partition=((0, 1), (2, 3)))
