import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blnn import convexnet as cn
from blnn import model as bm
from blnn.lft import SolverConfig, quadratic_objective
from conftest import central_diff, rel_err

TIGHT = SolverConfig(kind="newton", tol=1e-11, max_iters=200)


def zero_model(d, alpha, beta):
    return bm.Blnn(bm.zero_core(d), bm.BlnnConfig(alpha, beta))


def quadratic_objective_for(model, M):
    """Objective of a model whose potential is exactly ``y^T M y / 2``."""
    return quadratic_objective(M, model.config.beta)


def loss_of_output(out, c):
    return float(np.sum(c * out))


# -- config and objective ---------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        bm.BlnnConfig(-1.0, 1.0)
    with pytest.raises(ValueError):
        bm.BlnnConfig(1.0, 0.0)
    with pytest.raises(ValueError):
        bm.BlnnConfig(1.0, 1.0, a=[1.0, -1.0], b=[1.0, 1.0])
    with pytest.raises(ValueError):
        bm.BlnnConfig(1.0, 1.0, a=[1.0], b=[0.0])


def test_objective_zero_core():
    obj = bm.strongly_convex_objective(zero_model(2, 0.0, 2.0))
    y = np.array([[1.0, -2.0]])
    assert obj.value(y)[0] == pytest.approx(5.0 / 4)
    np.testing.assert_allclose(obj.grad(y), y / 2)
    np.testing.assert_allclose(obj.hessian(y)[0], np.eye(2) / 2)
    assert obj.mu == 0.5


def test_objective_weighted_quadratic():
    m = bm.Blnn(bm.zero_core(2), bm.BlnnConfig(0.0, 1.0, a=[0.0, 0.0], b=[1.0, 2.0]))
    obj = bm.strongly_convex_objective(m)
    np.testing.assert_allclose(obj.hessian(np.zeros((1, 2)))[0], np.diag([1.0, 0.25]))
    assert obj.mu == 0.25


def test_hessian_min_eig_at_least_inverse_beta(rng):
    worst = np.inf
    for seed in range(50):
        beta = rng.uniform(0.5, 20)
        m = bm.make_blnn([3, 8, 8], 0.5, beta, seed=seed)
        H = bm.strongly_convex_objective(m).hessian(rng.normal(size=(4, 3)) * 2)
        worst = min(worst, np.linalg.eigvalsh(H).min() - 1 / beta)
    assert worst >= -1e-12


# -- forward ----------------------------------------------------------------

def test_forward_zero_core():
    out, res = bm.blnn_forward(zero_model(1, 1.0, 3.0), np.array([2.0]))
    np.testing.assert_allclose(res.y_star, [6.0])
    np.testing.assert_allclose(out, [8.0])


def test_forward_quadratic_core_linear_solve(rng):
    M = rng.normal(size=(3, 3))
    M = M @ M.T
    m = zero_model(3, 0.7, 2.0)
    x = rng.normal(size=3)
    out, _ = bm.blnn_forward(m, x, TIGHT, objective=quadratic_objective_for(m, M))
    np.testing.assert_allclose(out, np.linalg.solve(M + np.eye(3) / 2.0, x) + 0.7 * x, rtol=1e-9)


def test_alpha_zero_is_gradient_of_conjugate(rng):
    """With alpha = 0 the output inverts grad F."""
    m = bm.make_blnn([2, 10, 10], 0.0, 4.0, seed=1)
    X = rng.normal(size=(20, 2)) * 2
    out, res = bm.blnn_forward(m, X, TIGHT)
    np.testing.assert_allclose(out, res.y_star)
    assert np.max(np.linalg.norm(bm.strongly_convex_objective(m).grad(out) - X, axis=1)) <= 10 * TIGHT.tol


def test_forward_weighted():
    m = bm.Blnn(bm.zero_core(2), bm.BlnnConfig(0.0, 1.0, a=[1.0, 2.0], b=[1.0, 3.0]))
    out, _ = bm.blnn_forward(m, np.array([1.0, 1.0]), TIGHT)
    np.testing.assert_allclose(out, [1.0 + 1.0, 9.0 + 4.0])
    assert m.config.lower == 1.0 and m.config.upper == 13.0


def test_forward_shape_errors():
    m = bm.make_blnn([2, 4], 1.0, 1.0)
    with pytest.raises(ValueError):
        bm.blnn_forward(m, np.zeros(3))


def test_conjugate_involution_on_quadratics(rng):
    """Building the map from a quadratic potential twice recovers the original linear map."""
    A = rng.normal(size=(2, 2))
    M = A @ A.T + 0.1 * np.eye(2)
    beta = 1e12  # quadratic term negligible: y* = M^-1 x
    m = zero_model(2, 0.0, beta)
    first = lambda X: bm.blnn_forward(m, X, TIGHT, objective=quadratic_objective_for(m, M))[0]
    Minv = np.column_stack([first(e) for e in np.eye(2)])
    Minv = (Minv + Minv.T) / 2
    second = np.column_stack([bm.blnn_forward(m, e, TIGHT, objective=quadratic_objective_for(m, Minv))[0]
                              for e in np.eye(2)])
    np.testing.assert_allclose(second, M, rtol=1e-6, atol=1e-8)


# -- sandwich and monotonicity ----------------------------------------------

def sample_pairs(rng, n, d, scale=2.0, min_sep=1e-3):
    A, B = rng.normal(size=(2, n, d)) * scale
    keep = np.linalg.norm(A - B, axis=1) >= min_sep
    return A[keep], B[keep]


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 3.0), beta=st.floats(0.5, 20.0))
def test_bilipschitz_sandwich(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    m = bm.make_blnn([2, 12, 12], alpha, beta, seed=seed)
    A, B = sample_pairs(rng, 2000, 2)
    fa, _ = bm.blnn_forward(m, A, SolverConfig(kind="newton", tol=1e-8))
    fb, _ = bm.blnn_forward(m, B, SolverConfig(kind="newton", tol=1e-8))
    dx = np.linalg.norm(A - B, axis=1)
    ratio = np.linalg.norm(fa - fb, axis=1) / dx
    assert ratio.min() >= alpha - 1e-4
    assert ratio.max() <= alpha + beta + 1e-4
    inner = np.sum((fa - fb) * (A - B), axis=1)
    assert np.all(inner >= (alpha - 1e-4) * dx ** 2)


def test_input_jacobian_eigs_in_range(rng):
    for seed in range(10):
        alpha, beta = rng.uniform(0, 2), rng.uniform(0.5, 10)
        m = bm.make_blnn([3, 8, 8], alpha, beta, seed=seed)
        _, res = bm.blnn_forward(m, rng.normal(size=(5, 3)), TIGHT)
        J = bm.input_jacobian(m, res.y_star)
        ev = np.linalg.eigvalsh(J)
        assert ev.min() >= alpha - 1e-10 and ev.max() <= alpha + beta + 1e-10


# -- backward ---------------------------------------------------------------

def test_backward_zero_upstream(rng):
    m = bm.make_blnn([2, 4, 4], 1.0, 2.0, seed=2)
    x = rng.normal(size=2)
    _, res = bm.blnn_forward(m, x, TIGHT)
    pg, gx = bm.blnn_backward(m, x, res.y_star, np.zeros(2))
    assert all(np.all(a == 0) for a in pg.arrays()) and np.all(gx == 0)


def test_input_vjp_zero_core():
    m = zero_model(2, 1.0, 2.0)
    np.testing.assert_allclose(bm.blnn_input_vjp(m, np.zeros(2), np.array([1.0, 0.0])), [3.0, 0.0])


def test_param_grads_finite_differences(rng):
    m = bm.make_blnn([2, 4, 4], 0.5, 3.0, seed=3)
    x, c = rng.normal(size=2), rng.normal(size=2)
    _, res = bm.blnn_forward(m, x, TIGHT)
    pg = bm.blnn_backward_params(m, x, res.y_star, c, tol=TIGHT.tol)

    def loss(theta):
        mm = bm.Blnn(cn.unflatten(m.core, theta), m.config)
        return loss_of_output(bm.blnn_forward(mm, x, TIGHT)[0], c)

    fd = central_diff(loss, cn.flatten(m.core), 1e-6)
    assert rel_err(cn.flatten(pg), fd) < 1e-4


def test_input_grad_finite_differences(rng):
    m = bm.make_blnn([3, 6, 6], 0.8, 5.0, seed=4)
    x, c = rng.normal(size=3), rng.normal(size=3)
    _, res = bm.blnn_forward(m, x, TIGHT)
    vjp = bm.blnn_input_vjp(m, res.y_star, c)
    fd = central_diff(lambda t: loss_of_output(bm.blnn_forward(m, t, TIGHT)[0], c), x, 1e-6)
    assert rel_err(vjp, fd) < 1e-4
    _, gx = bm.blnn_backward(m, x, res.y_star, c)
    np.testing.assert_allclose(gx, vjp)


def test_backward_batch_sums(rng):
    m = bm.make_blnn([2, 5, 5], 1.0, 2.0, seed=5)
    X, C = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    _, res = bm.blnn_forward(m, X, TIGHT)
    total = sum(cn.flatten(bm.blnn_backward_params(m, X[k], res.y_star[k], C[k])) for k in range(4))
    np.testing.assert_allclose(cn.flatten(bm.blnn_backward_params(m, X, res.y_star, C)), total, atol=1e-12)


def test_backward_rejects_unconverged(rng):
    m = bm.make_blnn([2, 5, 5], 1.0, 10.0, seed=6)
    x = rng.normal(size=2) * 3
    with pytest.raises(bm.NotStationaryError):
        bm.blnn_backward(m, x, np.zeros(2), np.ones(2), tol=1e-8)


# -- composite --------------------------------------------------------------

def test_projector():
    assert np.array_equal(bm.make_projector(1, 2), [[1.0, 0.0]])
    with pytest.raises(ValueError):
        bm.CompositeBlnn(zero_model(2, 0, 1), zero_model(1, 0, 1), np.array([[0.0, 1.0]]))


def test_composite_trivial():
    c = bm.CompositeBlnn(zero_model(2, 0.0, 1.0), zero_model(1, 0.0, 1.0))
    out, tape = bm.composite_forward(c, np.array([1.0, 1.0]), TIGHT)
    np.testing.assert_allclose(tape.w, [[1.0]])
    np.testing.assert_allclose(out, [1.0])


def test_composite_identity_second(rng):
    first = bm.make_blnn([2, 6, 6], 0.5, 2.0, seed=7)
    c = bm.CompositeBlnn(first, zero_model(1, 0.0, 1.0))
    X = rng.normal(size=(5, 2))
    out, _ = bm.composite_forward(c, X, TIGHT)
    f1, _ = bm.blnn_forward(first, X, TIGHT)
    np.testing.assert_allclose(out, f1[:, :1], atol=1e-10)


def test_composite_sandwich_when_expanding(rng):
    a1, b1, a2, b2 = 0.5, 2.0, 1.0, 3.0
    c = bm.CompositeBlnn(bm.make_blnn([2, 8, 8], a1, b1, seed=8), bm.make_blnn([3, 8, 8], a2, b2, seed=9))
    A, B = sample_pairs(rng, 1000, 2)
    fa, _ = bm.composite_forward(c, A, TIGHT)
    fb, _ = bm.composite_forward(c, B, TIGHT)
    ratio = np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(A - B, axis=1)
    assert ratio.min() >= a1 * a2 - 1e-6
    assert ratio.max() <= (a1 + b1) * (a2 + b2) + 1e-6


def test_composite_backward(rng):
    c = bm.CompositeBlnn(bm.make_blnn([2, 4, 4], 0.5, 2.0, seed=10), bm.make_blnn([1, 4, 4], 1.0, 1.5, seed=11))
    x, g = rng.normal(size=2), np.array([0.7])
    _, tape = bm.composite_forward(c, x, TIGHT)
    g1, g2, gx = bm.composite_backward(c, tape, g, tol=TIGHT.tol)
    theta1, theta2 = cn.flatten(c.first.core), cn.flatten(c.second.core)

    def loss(t1, t2, xx):
        cc = bm.CompositeBlnn(bm.Blnn(cn.unflatten(c.first.core, t1), c.first.config),
                              bm.Blnn(cn.unflatten(c.second.core, t2), c.second.config))
        return loss_of_output(bm.composite_forward(cc, xx, TIGHT)[0], g)

    assert rel_err(cn.flatten(g1), central_diff(lambda t: loss(t, theta2, x), theta1, 1e-6)) < 1e-4
    assert rel_err(cn.flatten(g2), central_diff(lambda t: loss(theta1, t, x), theta2, 1e-6)) < 1e-4
    assert rel_err(gx, central_diff(lambda t: loss(theta1, theta2, t), x, 1e-6)) < 1e-4
    z1, z2, zx = bm.composite_backward(c, tape, np.zeros(1))
    assert np.all(cn.flatten(z1) == 0) and np.all(cn.flatten(z2) == 0) and np.all(zx == 0)


def test_composite_reduces_with_identity_second(rng):
    first = bm.make_blnn([2, 4, 4], 0.5, 2.0, seed=12)
    c = bm.CompositeBlnn(first, zero_model(1, 0.0, 1.0))
    x, g = rng.normal(size=2), np.array([1.3])
    _, tape = bm.composite_forward(c, x, TIGHT)
    g1, _, _ = bm.composite_backward(c, tape, g)
    ref = bm.blnn_backward_params(first, x, tape.y1[0], c.projector.T @ g)
    np.testing.assert_allclose(cn.flatten(g1), cn.flatten(ref), rtol=1e-10)


# -- partial model ----------------------------------------------------------

def pblnn_from_icnn(p, nonconvex_dim, alpha, beta):
    q = cn.init_picnn(p.input_dim, nonconvex_dim, p.dims[1:-1], seed=0)
    for k, layer in enumerate(q.layers):
        src = p.layers[k]
        layer.w_y[:] = src.w_input
        layer.bias[:] = src.bias
        layer.w_yu[:] = 0
        layer.b_y[:] = 1
        layer.w_u[:] = 0
        if layer.w_z is not None:
            layer.w_z[:] = src.w_gate
            layer.w_zu[:] = 0
            layer.b_z[:] = 1
    return bm.Pblnn(q, bm.BlnnConfig(alpha, beta))


def test_pblnn_trivial(rng):
    q = cn.init_picnn(2, 3, [4, 4], seed=0).zeros_like()
    m = bm.Pblnn(q, bm.BlnnConfig(0.0, 1.0))
    xn, y = rng.normal(size=3), rng.normal(size=2)
    out, _ = bm.pblnn_forward(m, xn, y, TIGHT)
    np.testing.assert_allclose(out, np.concatenate([xn, y]), atol=1e-12)


def test_pblnn_reduces_to_blnn(rng):
    p = cn.init_params([2, 5, 5, 1], seed=13)
    m = pblnn_from_icnn(p, 3, 0.5, 2.0)
    ref = bm.Blnn(p, bm.BlnnConfig(0.5, 2.0))
    Xn, Y = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    out, res = bm.pblnn_forward(m, Xn, Y, TIGHT)
    f, _ = bm.blnn_forward(ref, Y, TIGHT)
    np.testing.assert_allclose(out[:, 3:], f, atol=1e-10)
    g = rng.normal(size=(4, 5))
    _, _, gy = bm.pblnn_backward(m, Xn, Y, res.y_star, g)
    _, gref = bm.blnn_backward(ref, Y, res.y_star, g[:, 3:])
    np.testing.assert_allclose(gy, gref, rtol=1e-9)


def test_pblnn_slices_are_bilipschitz(rng):
    alpha, beta = 0.5, 3.0
    m = bm.Pblnn(cn.init_picnn(1, 3, [8, 8], seed=14), bm.BlnnConfig(alpha, beta))
    for xn in rng.normal(size=(3, 3)):
        A, B = sample_pairs(rng, 300, 1)
        fa, _ = bm.pblnn_forward(m, np.tile(xn, (len(A), 1)), A, TIGHT)
        fb, _ = bm.pblnn_forward(m, np.tile(xn, (len(B), 1)), B, TIGHT)
        ratio = np.abs(fa[:, 3] - fb[:, 3]) / np.abs(A[:, 0] - B[:, 0])
        assert ratio.min() >= alpha - 1e-6 and ratio.max() <= alpha + beta + 1e-6


def test_pblnn_backward_finite_differences(rng):
    m = bm.Pblnn(cn.init_picnn(1, 2, [5, 5], seed=15), bm.BlnnConfig(0.5, 2.0))
    xn, y, g = rng.normal(size=2), rng.normal(size=1), rng.normal(size=3)
    _, res = bm.pblnn_forward(m, xn, y, TIGHT)
    pg, gx, gy = bm.pblnn_backward(m, xn, y, res.y_star, g, tol=TIGHT.tol)

    def loss(theta, a, b):
        mm = bm.Pblnn(cn.unflatten(m.core, theta), m.config)
        return loss_of_output(bm.pblnn_forward(mm, a, b, TIGHT)[0], g)

    theta = cn.flatten(m.core)
    assert rel_err(cn.flatten(pg), central_diff(lambda t: loss(t, xn, y), theta, 1e-6)) < 1e-4
    assert rel_err(gx, central_diff(lambda t: loss(theta, t, y), xn, 1e-6)) < 1e-4
    assert rel_err(gy, central_diff(lambda t: loss(theta, xn, t), y, 1e-6)) < 1e-4
    pz, zx, zy = bm.pblnn_backward(m, xn, y, res.y_star, np.zeros(3))
    assert np.all(cn.flatten(pz) == 0) and np.all(zx == 0) and np.all(zy == 0)


# -- warm cache -------------------------------------------------------------

def test_warm_cache_keys_and_radius():
    cache = bm.WarmCache(2)
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    cache.insert(X, X * 10, keys=[5, 6])
    np.testing.assert_allclose(cache.lookup(X[::-1], keys=[6, 5]), X[::-1] * 10)
    np.testing.assert_allclose(cache.lookup(X, keys=[7, 8]), 0.0)
    cache.insert(X, X * 2)
    np.testing.assert_allclose(cache.lookup(X + 5e-7), X * 2)
    np.testing.assert_allclose(cache.lookup(X + 1e-3), 0.0)


def test_warm_cache_skips_unconverged_and_non_finite():
    cache = bm.WarmCache(1)
    cache.insert(np.ones((2, 1)), np.array([[np.nan], [3.0]]), keys=[0, 1], mask=[True, False])
    assert len(cache) == 0
    with pytest.raises(ValueError):
        cache.insert(np.ones((1, 1)), np.ones((1, 2)))


def test_warm_start_reduces_iterations(rng):
    m = bm.make_blnn([2, 8, 8], 1.0, 10.0, seed=16)
    X = rng.normal(size=(10, 2))
    cache = bm.WarmCache(2)
    keys = list(range(10))
    _, cold = bm.blnn_forward(m, X, cache=cache, keys=keys)
    _, warm = bm.blnn_forward(m, X, cache=cache, keys=keys)
    assert np.all(warm.iters == 0) and np.sum(cold.iters) > 0


def test_warm_cache_concurrent_inserts():
    cache = bm.WarmCache(1)

    def work(k):
        for i in range(200):
            cache.insert(np.array([[float(i)]]), np.array([[float(k)]]), keys=[(k, i)])
            cache.lookup(np.array([[float(i)]]), keys=[(k, i)])

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(cache) == 800


# -- bundles ----------------------------------------------------------------

def test_bundle_roundtrip(tmp_path, rng):
    m = bm.make_blnn([2, 5, 5], 1.5, 2.5, seed=17)
    path = tmp_path / "model.json"
    solver = SolverConfig(kind="agd", tol=1e-6)
    bm.save_model(m, path, solver)
    m2, s2 = bm.load_model(path)
    assert s2 == solver
    assert np.array_equal(cn.flatten(m.core), cn.flatten(m2.core))
    x = rng.normal(size=2)
    assert np.array_equal(bm.blnn_forward(m, x)[0], bm.blnn_forward(m2, x)[0])
    doc = json.loads(path.read_text())
    assert set(doc) == {"config", "core", "solver_defaults"}
    assert doc["config"]["alpha"] == 1.5 and doc["config"]["beta"] == 2.5


def test_bundle_weighted_roundtrip(tmp_path):
    m = bm.Blnn(bm.zero_core(2), bm.BlnnConfig(0.0, 1.0, a=[1.0, 2.0], b=[0.5, 3.0]))
    bm.save_model(m, tmp_path / "w.json")
    m2, _ = bm.load_model(tmp_path / "w.json")
    np.testing.assert_array_equal(m2.config.quad_diag(2), m.config.quad_diag(2))
    np.testing.assert_array_equal(m2.config.skip_diag(2), m.config.skip_diag(2))
