import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flue.coding import build_cluster_pool
from flue.engine import (RunConfig, StepSchedule, dgd_step, flue_cycle, initialize_states, pack_states,
                         run_dgd, run_flue, step_size)
from flue.errors import DimensionMismatch, NonFinite, ValidationError
from flue.problem import generate_problem, local_gradient

from conftest import cached_cluster

N_NODES = 3


@pytest.fixture(scope="module")
def prob():
    return generate_problem(30, 8, N_NODES, 4, scale=0.1)


@pytest.fixture(scope="module")
def cluster():
    return cached_cluster(N_NODES, 1)


def test_step_size_examples():
    s = StepSchedule(100, 0.75)
    assert step_size(s, 0) == pytest.approx(0.0316228, rel=1e-6)
    assert step_size(s, 900) == pytest.approx(0.0056234, rel=1e-5)
    with pytest.raises(ValueError):
        step_size(StepSchedule(0, 0.75), 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 1000), st.floats(0.01, 1.0), st.integers(0, 10**6))
def test_step_size_is_positive_and_non_increasing(offset, exponent, k):
    s = StepSchedule(offset, exponent)
    assert 0 < step_size(s, k + 1) <= step_size(s, k)


def test_schedule_domain():
    with pytest.raises(ValidationError):
        StepSchedule(-1, 0.75)
    with pytest.raises(ValidationError):
        StepSchedule(1, 1.5)
    assert StepSchedule(100, 0.75).square_summable
    assert not StepSchedule(1, 0.5).square_summable


@pytest.mark.parametrize("kwargs", [dict(form="x"), dict(mixing="x"), dict(epsilon=-0.1),
                                    dict(matrix_mode="random_pool", pool_size=1), dict(record_every=0),
                                    dict(init="ones"), dict(epsilon="big")])
def test_run_config_validation(kwargs):
    with pytest.raises(ValidationError):
        RunConfig(**kwargs)


def test_zero_initialization_counts():
    states = initialize_states(2, 3, "zeros", 0)
    vectors = [v for s in states for block in (s.x_plus, s.x_minus, s.y_plus, s.y_minus) for v in block]
    assert len(vectors) == 16
    assert all(not np.any(v) for v in vectors)


def test_seeded_uniform_initialization():
    a = initialize_states(3, 4, "seeded_uniform", 9)
    b = initialize_states(3, 4, "seeded_uniform", 9)
    for s, t in zip(a, b):
        assert np.array_equal(s.x_plus, t.x_plus) and np.array_equal(s.y_minus, t.y_minus)
        assert np.all(np.abs(s.x_minus) <= 1)


def test_dgd_identity_single_node_is_gradient_descent():
    p = generate_problem(10, 3, 1, 2)
    x = np.ones(3)
    out = dgd_step([x], np.eye(1), p, 0.01)
    assert np.allclose(out[0], x - 0.01 * p.gradient(x))


def test_dgd_fixed_point_at_generator(prob):
    xs = [prob.x_o.copy() for _ in range(N_NODES)]
    out = dgd_step(xs, np.full((N_NODES, N_NODES), 1 / N_NODES), prob, 0.1)
    assert all(np.allclose(o, prob.x_o, atol=1e-12) for o in out)


def test_dgd_uniform_mixing_averages(prob):
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((N_NODES, prob.n_dim))
    out = dgd_step(xs, np.full((N_NODES, N_NODES), 1 / N_NODES), prob, 0.0)
    assert all(np.allclose(o, xs.mean(axis=0)) for o in out)


def test_dgd_rejects_wrong_mixing(prob):
    with pytest.raises(DimensionMismatch):
        dgd_step(np.zeros((N_NODES, prob.n_dim)), np.eye(2), prob, 0.1)


def test_run_dgd_matches_dgd_step(prob):
    sched = StepSchedule()
    res = run_dgd(prob, sched, 5, 1, x0=np.ones((N_NODES, prob.n_dim)))
    xs = list(np.ones((N_NODES, prob.n_dim)))
    w = np.full((N_NODES, N_NODES), 1 / N_NODES)
    for k in range(5):
        xs = dgd_step(xs, w, prob, step_size(sched, k))
    assert np.allclose(res.final_x[:, 0], np.array(xs), rtol=1e-12, atol=1e-14)


def _run(cluster, prob, form, eps, iterations=100, seed=0, init="seeded_uniform", **kw):
    cfg = RunConfig(form=form, epsilon=eps, iterations=iterations, seed=seed, record_every=10, init=init, **kw)
    return run_flue(cluster, prob, StepSchedule(), cfg, eps)


@pytest.mark.parametrize("seed", range(3))
def test_general_form_at_zero_eps_equals_special_form(cluster, prob, seed):
    a = _run(cluster, prob, "general", 0.0, seed=seed)
    b = _run(cluster, prob, "special", 0.0, seed=seed)
    assert np.array_equal(a.final_x, b.final_x)
    assert [r.ae for r in a.records] == [r.ae for r in b.records]


def test_flue_cycle_matches_packed_run(cluster, prob):
    cfg = RunConfig(form="general", epsilon=1e-3, iterations=3, init="seeded_uniform", seed=2)
    sched = StepSchedule()
    states = initialize_states(N_NODES, prob.n_dim, "seeded_uniform", 2)
    for k in range(3):
        states = flue_cycle(states, cluster.decoders, cluster.mixers, cluster.encoding, prob, sched, cfg, k)
    res = run_flue(cluster, prob, sched, cfg, 1e-3)
    x, y, _ = pack_states(states)
    assert np.array_equal(x, res.final_x) and np.array_equal(y, res.final_y)


def test_flue_cycle_follows_update_equations(cluster, prob):
    """One cycle written out slot by slot for one node, compared with the packed update."""
    eps, k = 1e-3, 4
    cfg = RunConfig(form="general", epsilon=eps)
    sched = StepSchedule()
    alpha = step_size(sched, k)
    states = initialize_states(N_NODES, prob.n_dim, "seeded_uniform", 5)
    # the server proxy is common to every node
    shared = np.random.default_rng(1).standard_normal(states[0].last_proxy.shape)
    for s in states:
        s.last_proxy = shared.copy()
    new = flue_cycle(states, cluster.decoders, cluster.mixers, cluster.encoding, prob, sched, cfg, k)
    n, b = N_NODES, cluster.encoding.b
    xhat = [np.vstack([s.x_plus, s.x_minus]) for s in states]
    yhat = [np.vstack([s.y_plus, s.y_minus]) for s in states]
    for j in range(2 * n):
        slot = j % n
        sign = -1.0 if j < n else 1.0
        proxies = []
        for i, s in enumerate(states):
            dec = cluster.decoders[i].stacked
            mix = cluster.mixers[i].d_plus if j < n else cluster.mixers[i].d_minus
            ys = yhat[i][:n] if j < n else yhat[i][n:]
            proxies.append(dec[j, slot] * xhat[i][slot] - eps * (mix[slot] @ ys)
                           + sign * alpha * b[slot, i] * local_gradient(prob, i, xhat[i][j]))
        server = np.mean(proxies, axis=0)
        for i, s in enumerate(states):
            dec = cluster.decoders[i].stacked
            mix = cluster.mixers[i].d_plus if j < n else cluster.mixers[i].d_minus
            ys = yhat[i][:n] if j < n else yhat[i][n:]
            off = sum(dec[j, c] * xhat[i][c] for c in range(2 * n) if c != slot)
            x_exp = server + off + eps * yhat[i][j]
            y_exp = xhat[i][j] - s.last_proxy[j] - eps * yhat[i][j] + mix[slot] @ ys
            got = np.vstack([new[i].x_plus, new[i].x_minus])
            got_y = np.vstack([new[i].y_plus, new[i].y_minus])
            assert np.allclose(got[j], x_exp, rtol=1e-12, atol=1e-12)
            assert np.allclose(got_y[j], y_exp, rtol=1e-12, atol=1e-12)
        assert np.allclose(new[0].last_proxy[j], server, rtol=1e-12, atol=1e-12)


def test_flue_cycle_needs_resolved_epsilon(cluster, prob):
    states = initialize_states(N_NODES, prob.n_dim)
    with pytest.raises(ValueError):
        flue_cycle(states, cluster.decoders, cluster.mixers, cluster.encoding, prob, StepSchedule(), RunConfig(), 0)


def test_flue_cycle_dimension_mismatch(cluster, prob):
    states = initialize_states(N_NODES, prob.n_dim + 1)
    with pytest.raises(DimensionMismatch):
        flue_cycle(states, cluster.decoders, cluster.mixers, cluster.encoding, prob, StepSchedule(),
                   RunConfig(epsilon=0.0), 0)


def test_special_form_stays_at_generator(cluster, prob):
    states = initialize_states(N_NODES, prob.n_dim)
    for s in states:
        s.x_plus[:] = prob.x_o
        s.x_minus[:] = prob.x_o
    res = run_flue(cluster, prob, StepSchedule(), RunConfig(form="special", iterations=200), 0.0, states=states)
    # floating-point residual of F x_o - y is the only source of motion
    assert np.max(np.abs(res.final_x - prob.x_o)) <= 1e-13 * np.abs(prob.x_o).max()


def test_general_form_drift_at_generator_is_small(cluster, prob):
    states = initialize_states(N_NODES, prob.n_dim)
    for s in states:
        s.x_plus[:] = prob.x_o
        s.x_minus[:] = prob.x_o
    res = run_flue(cluster, prob, StepSchedule(), RunConfig(iterations=200), 1e-6, states=states)
    assert np.max(np.abs(res.final_x - prob.x_o)) <= 1e-3


def test_divergence_guard_reports_location(cluster, prob):
    steep = generate_problem(30, 8, N_NODES, 4, scale=1e3)
    with pytest.raises(NonFinite) as exc:
        run_flue(cluster, steep, StepSchedule(1, 0.5), RunConfig(form="special", iterations=2000), 0.0)
    assert exc.value.cycle is not None and exc.value.node is not None and exc.value.slot is not None


def test_runs_are_deterministic(cluster, prob):
    a = _run(cluster, prob, "general", 1e-4, seed=3)
    b = _run(cluster, prob, "general", 1e-4, seed=3)
    assert np.array_equal(a.final_x, b.final_x) and a.records == b.records


def test_random_pool_runs_and_differs_from_fixed(prob):
    pool = build_cluster_pool(N_NODES, 2, 3)
    cfg = RunConfig(matrix_mode="random_pool", pool_size=3, iterations=50, epsilon=0.0, form="special")
    pooled = run_flue(pool, prob, StepSchedule(), cfg, 0.0)
    fixed = run_flue(pool[0], prob, StepSchedule(), RunConfig(iterations=50, form="special"), 0.0)
    assert not np.array_equal(pooled.final_x, fixed.final_x)
    assert pooled.final.ae < 1.0


def test_identity_mixing_runs(cluster, prob):
    res = _run(cluster, prob, "general", 1e-4, mixing="identity", iterations=200)
    assert np.all(np.isfinite(res.final_x))


def test_records_are_thinned(cluster, prob):
    res = _run(cluster, prob, "general", 0.0, iterations=95)
    assert [r.cycle for r in res.records] == [0] + list(range(10, 100, 10)) + [95]
