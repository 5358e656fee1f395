import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_graph
from graph_unlearn.errors import ConfigError, EmptyRemainingSet, IncompatibleModel
from graph_unlearn.features import gram_precompute, span_residual
from graph_unlearn.graph import Graph, affected_set
from graph_unlearn.linear_model import ModelWeights, Provenance, TrainConfig, hessian, loss_and_grad, train
from graph_unlearn.task import GraphTask
from graph_unlearn.unlearn import (
    BoundConstants,
    UnlearnRequest,
    estimate_constants,
    fisher_plus_unlearn,
    influence_plus_unlearn,
    inverse_quarter_root,
    probe_norm,
    projector_unlearn,
    prop2_condition,
    retrain_baseline,
    run_strategy,
    theorem1_bound,
)


def make_task(rng, n=40, d=5, p=0.15, kind="logistic", hops=2, multi_hop=False, C=3):
    g = random_graph(n, p, rng)
    X = rng.normal(size=(n, d))
    y = rng.choice([-1, 1], size=n) if kind in ("logistic", "hinge") else rng.integers(0, C, size=n)
    train_nodes = np.sort(rng.choice(n, size=int(0.75 * n), replace=False))
    test_nodes = np.setdiff1d(np.arange(n), train_nodes)
    return GraphTask(g, X, y, train_nodes, test_nodes, hops=hops, multi_hop=multi_hop)


def fit(task, kind="logistic", lam=0.05, epochs=200):
    model, _ = train(task.H, task.labels, task.train_nodes, kind, TrainConfig(lam=lam, epochs=epochs))
    return model


def newton_fit(H, y, nodes, lam, iters=40):
    """Logistic optimum by undamped Newton, independent of the library."""
    Hs, ys = H[nodes], y[nodes]
    n, d = Hs.shape
    w = np.zeros(d)
    for _ in range(iters):
        s = 1 / (1 + np.exp(ys * (Hs @ w)))
        g = lam * w - (ys * s) @ Hs / n
        Hm = lam * np.eye(d) + (Hs * (s * (1 - s))[:, None]).T @ Hs / n
        w = w - np.linalg.solve(Hm, g)
    return w


def as_model(w, lam, kind="logistic"):
    return ModelWeights(np.atleast_2d(w), kind, Provenance(lam, 0.1, 10))


# -- projector ------------------------------------------------------------


@given(st.integers(0, 2**31 - 1))
def test_projector_rows_lie_in_remaining_span(seed):
    rng = np.random.default_rng(seed)
    task = make_task(rng, n=int(rng.integers(8, 30)), d=int(rng.integers(2, 12)), kind="ovr_logistic")
    model = fit(task, "ovr_logistic", epochs=20)
    deleted = rng.choice(task.train_nodes, size=2, replace=False)
    out = projector_unlearn(model, task, UnlearnRequest(deleted)).model
    X_r = np.delete(task.features, deleted, axis=0)
    for row in out.W:
        assert span_residual(row, X_r) <= 1e-9 * max(1.0, np.linalg.norm(row))
    again = projector_unlearn(out, task, UnlearnRequest(deleted)).model
    assert np.allclose(again.W, out.W, atol=1e-10 * max(1.0, np.linalg.norm(out.W)))


def test_projector_zeroes_a_private_feature(rng):
    task = make_task(rng, n=30, d=4)
    X = np.hstack([task.features, np.zeros((30, 1))])
    victim = int(task.train_nodes[0])
    X[victim, 4] = 3.0
    task = task.with_features(X)
    model = fit(task)
    assert probe_norm(model.W, 4, 5) > 0
    res = projector_unlearn(model, task, UnlearnRequest([victim], probe_column=4))
    assert res.diagnostics["injected_channel_norm"] == 0.0
    assert res.model.W[0, 4] == 0.0


def test_projector_keeps_weights_already_in_span(rng):
    task = make_task(rng, n=30, d=4)
    model = fit(task)
    res = projector_unlearn(model, task, UnlearnRequest([int(task.train_nodes[3])]))
    # 29 generic rows in 4 dimensions still span everything
    assert np.allclose(res.model.W, model.W, atol=1e-12)


def test_projector_options_agree(rng):
    task = make_task(rng, n=60, d=8)
    model = fit(task)
    deleted = task.train_nodes[:5]
    a = projector_unlearn(model, task, UnlearnRequest(deleted))
    gram = gram_precompute(task.features, with_inverse=True)
    b = projector_unlearn(model, task, UnlearnRequest(deleted), gram=gram)
    assert a.diagnostics["gram_path"] == "option1"
    assert b.diagnostics["gram_path"] == "woodbury"
    assert np.linalg.norm(a.model.W - b.model.W) <= 1e-8 * np.linalg.norm(model.W)


def test_projector_woodbury_fallback(rng):
    task = make_task(rng, n=20, d=3)
    X = np.hstack([task.features, np.zeros((20, 1))])
    victim = int(task.train_nodes[0])
    X[victim, 3] = 30.0
    task = task.with_features(X)
    model = fit(task)
    gram = gram_precompute(X, with_inverse=True)
    res = projector_unlearn(model, task, UnlearnRequest([victim]), gram=gram)
    assert res.diagnostics["gram_path"] == "direct-fallback"
    assert res.model.W[0, 3] == 0.0


def test_projector_multi_hop_blocks(rng):
    task = make_task(rng, n=30, d=3, hops=3, multi_hop=True)
    X = np.hstack([task.features, np.zeros((30, 1))])
    victim = int(task.train_nodes[2])
    X[victim, 3] = 2.0
    task = task.with_features(X)
    model = fit(task)
    assert model.dim == 12
    out = projector_unlearn(model, task, UnlearnRequest([victim], probe_column=3)).model
    assert np.all(out.W[0, 3::4] == 0.0)
    assert probe_norm(model.W, 3, 4) > 0


def test_projector_finetune_stays_in_span(rng):
    task = make_task(rng, n=30, d=6)
    X = task.features.copy()
    X[:, 5] = 0.0
    victim = int(task.train_nodes[0])
    X[victim, 5] = 1.0
    task = task.with_features(X)
    model = fit(task)
    res = projector_unlearn(model, task, UnlearnRequest([victim], finetune_K=5, probe_column=5))
    assert res.model.provenance.finetune_steps == 5
    assert res.diagnostics["injected_channel_norm"] == 0.0


# -- influence ------------------------------------------------------------


def test_influence_isolated_deletion_is_noop(rng):
    g = Graph.from_edges(6, [(0, 1), (1, 2), (2, 3)])
    X = rng.normal(size=(6, 3))
    y = np.array([1, -1, 1, -1, 1, -1])
    task = GraphTask(g, X, y, np.arange(5), np.array([5]), hops=2)
    model = fit(task)
    res = influence_plus_unlearn(model, task, UnlearnRequest([5]))
    assert res.diagnostics["affected_set_size"] == 0
    assert np.array_equal(res.model.W, model.W)


def test_influence_is_newton_step_on_unaffected_nodes(rng):
    task = make_task(rng, n=40, d=4)
    lam = 0.1
    w = newton_fit(task.H, task.labels, task.train_nodes, lam)
    deleted = task.train_nodes[:2]
    A = np.intersect1d(affected_set(task.graph, deleted, task.hops), task.train_nodes)
    R = np.setdiff1d(task.train_nodes, A)
    lg = loss_and_grad(w[None], task.H, task.labels, R, lam, "logistic")
    HR = hessian(w[None], task.H, task.labels, R, lam, "logistic")
    expect = w - np.linalg.solve(HR, lg.grad[0])
    got = influence_plus_unlearn(as_model(w, lam), task, UnlearnRequest(deleted)).model.W[0]
    assert np.allclose(got, expect, atol=1e-9)
    # and it moves towards the optimum on R
    target = newton_fit(task.H, task.labels, R, lam)
    assert np.linalg.norm(got - target) < np.linalg.norm(w - target)


def test_influence_corrected_uses_post_deletion_gradient(rng):
    task = make_task(rng, n=40, d=4)
    lam = 0.1
    w = newton_fit(task.H, task.labels, task.train_nodes, lam)
    deleted = task.train_nodes[:2]
    A = np.intersect1d(affected_set(task.graph, deleted, task.hops), task.train_nodes)
    R = np.setdiff1d(task.train_nodes, A)
    reduced, index_map = task.without(deleted)
    S = index_map[np.setdiff1d(A, deleted)]
    Rp = R.size + S.size
    W = w[None]
    grad = lam * W + (
        loss_and_grad(W, task.H, task.labels, R, 0.0, "logistic").grad * R.size
        + loss_and_grad(W, reduced.H, reduced.labels, S, 0.0, "logistic").grad * S.size
    ) / Rp
    hess = lam * np.eye(4) + (
        hessian(W, task.H, task.labels, R, 0.0, "logistic") * R.size
        + hessian(W, reduced.H, reduced.labels, S, 0.0, "logistic") * S.size
    ) / Rp
    expect = w - np.linalg.solve(hess, grad[0])
    got = influence_plus_unlearn(as_model(w, lam), task, UnlearnRequest(deleted, corrected=True)).model.W[0]
    assert np.allclose(got, expect, atol=1e-9)


def test_influence_rejects_softmax(rng):
    task = make_task(rng, kind="softmax")
    model = fit(task, "softmax", epochs=3)
    with pytest.raises(IncompatibleModel):
        influence_plus_unlearn(model, task, UnlearnRequest(task.train_nodes[:1]))


# -- fisher ---------------------------------------------------------------


def test_fisher_leaves_reduced_optimum_fixed(rng):
    task = make_task(rng, n=40, d=4)
    lam = 0.1
    deleted = task.train_nodes[:3]
    reduced, _ = task.without(deleted)
    w = newton_fit(reduced.H, reduced.labels, reduced.train_nodes, lam)
    got = fisher_plus_unlearn(as_model(w, lam), task, UnlearnRequest(deleted)).model.W[0]
    assert np.allclose(got, w, atol=1e-12)


def test_fisher_is_newton_step(rng):
    task = make_task(rng, n=40, d=4, kind="ovr_logistic")
    model = fit(task, "ovr_logistic", lam=0.1, epochs=10)
    deleted = task.train_nodes[:3]
    reduced, _ = task.without(deleted)
    lg = loss_and_grad(model.W, reduced.H, reduced.labels, reduced.train_nodes, 0.1, "ovr_logistic")
    Hs = hessian(model.W, reduced.H, reduced.labels, reduced.train_nodes, 0.1, "ovr_logistic")
    expect = np.stack([model.W[c] - np.linalg.solve(Hs[c], lg.grad[c]) for c in range(3)])
    got = fisher_plus_unlearn(model, task, UnlearnRequest(deleted)).model.W
    assert np.allclose(got, expect, atol=1e-12)


def test_fisher_noise_is_seeded(rng):
    task = make_task(rng)
    model = fit(task, epochs=10)
    req = UnlearnRequest(task.train_nodes[:2], strategy="fisher_plus", noise_std=0.1, seed=7)
    a = fisher_plus_unlearn(model, task, req).model.W
    b = fisher_plus_unlearn(model, task, req).model.W
    c = fisher_plus_unlearn(model, task, UnlearnRequest(task.train_nodes[:2], noise_std=0.0)).model.W
    assert np.array_equal(a, b) and not np.allclose(a, c)


def test_inverse_quarter_root(rng):
    A = rng.normal(size=(5, 5))
    M = A @ A.T + np.eye(5)
    R = inverse_quarter_root(M, 1e-6)
    assert np.allclose(np.linalg.matrix_power(R, 4), np.linalg.inv(M), atol=1e-12)
    assert np.allclose(inverse_quarter_root(np.zeros((2, 2)), 16.0), 0.5 * np.eye(2))


# -- retrain and dispatch -------------------------------------------------


def test_retrain_matches_training_on_reduced_task(rng):
    task = make_task(rng)
    deleted = task.train_nodes[:4]
    cfg = TrainConfig(lam=0.05, epochs=50)
    res = retrain_baseline(task, deleted, cfg, "logistic")
    reduced, _ = task.without(deleted)
    expect, _ = train(reduced.H, reduced.labels, reduced.train_nodes, "logistic", cfg)
    assert res.model.W.tobytes() == expect.W.tobytes()
    assert res.model.W.tobytes() == retrain_baseline(task, deleted, cfg, "logistic").model.W.tobytes()


def test_run_strategy_dispatch_and_errors(rng):
    task = make_task(rng)
    model = fit(task, epochs=20)
    res = run_strategy(model, task, UnlearnRequest([], strategy="influence_plus"))
    assert res.diagnostics["skipped"] and res.model is model
    for s in ("projector", "influence_plus", "fisher_plus", "retrain"):
        assert run_strategy(model, task, UnlearnRequest(task.train_nodes[:2], strategy=s)).strategy == s
    with pytest.raises(ConfigError):
        run_strategy(model, task, UnlearnRequest([task.num_nodes]))
    with pytest.raises(EmptyRemainingSet) as info:
        run_strategy(model, task, UnlearnRequest(task.train_nodes))
    assert info.value.exit_code == 4
    hinge = ModelWeights(model.W, "hinge", model.provenance)
    with pytest.raises(IncompatibleModel) as info:
        run_strategy(hinge, task, UnlearnRequest(task.train_nodes[:1], strategy="retrain"))
    assert info.value.exit_code == 3
    with pytest.raises(ConfigError):
        UnlearnRequest([0], strategy="magic")


# -- closeness bound ------------------------------------------------------


def test_constants_without_deletion(rng):
    task = make_task(rng, n=25)
    model = fit(task, epochs=10)
    c = estimate_constants(task, [], model)
    assert c.P_d == 0.0 and c.G_est == 0.0 and c.delta == 0.0
    assert c.B_x == pytest.approx(np.linalg.norm(task.features, axis=1).max())
    assert theorem1_bound(c) == 0.0


def test_constants_on_three_node_path():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    X = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    task = GraphTask(g, X, np.array([1, -1, 1]), np.arange(3), np.array([], dtype=int), hops=1)
    model = as_model([0.5, -0.5], 0.1)
    c = estimate_constants(task, [2], model, sample_count=0)
    assert c.P_s == pytest.approx(1.0)
    assert c.P_d == pytest.approx(1.0)
    assert c.B_x == pytest.approx(2.0)
    assert c.num_nodes == 3 and c.deleted_count == 1


def test_constants_limits(rng):
    task = make_task(rng, n=30, hops=2, multi_hop=True)
    model = fit(task, epochs=2)
    with pytest.raises(IncompatibleModel):
        estimate_constants(task, [0], model)
    task = make_task(rng, n=30)
    with pytest.raises(ConfigError):
        estimate_constants(task, [0], fit(task, epochs=2), max_nodes=10)


def bound_by_loop(c: BoundConstants) -> float:
    Q = c.eta * ((1 + c.B_x * c.B_w * c.P_s) * c.B_x * c.P_d + c.G_est)
    rate = 1 + c.eta * (c.lam + c.B_x**2 * c.P_s**2)
    return sum(Q * rate ** (t - 1) for t in range(1, c.T + 1)) + c.delta * c.eta * c.T * c.deleted_count


def constants(**kw):
    base = dict(B_x=1.0, B_w=1.0, P_s=1.0, P_d=0.5, G_est=0.1, delta=0.2, lam=0.01, eta=0.1, T=10,
                deleted_count=2, num_nodes=100)
    base.update(kw)
    return BoundConstants(**base)


def test_bound_by_hand():
    assert theorem1_bound(constants(P_d=0.0, G_est=0.0, delta=0.0)) == 0.0
    c = constants(T=1)
    assert theorem1_bound(c) == pytest.approx(0.1 * (2 * 0.5 + 0.1) + 0.2 * 0.1 * 2, rel=1e-14)


@given(
    st.floats(0, 5), st.floats(0, 5), st.floats(0, 2), st.floats(0, 2), st.floats(0, 1), st.floats(0, 3),
    st.floats(1e-4, 1), st.floats(1e-3, 1), st.integers(1, 60), st.integers(1, 10),
)
def test_bound_matches_loop(Bx, Bw, Ps, Pd, G, delta, lam, eta, T, m):
    c = constants(B_x=Bx, B_w=Bw, P_s=Ps, P_d=Pd, G_est=G, delta=delta, lam=lam, eta=eta, T=T, deleted_count=m)
    expect = bound_by_loop(c)
    assert theorem1_bound(c) == pytest.approx(expect, rel=1e-10, abs=1e-300)


def test_bound_overflow_is_inf():
    assert theorem1_bound(constants(B_x=100.0, P_s=10.0, eta=1.0, T=10**6)) == math.inf


def test_prop2_threshold():
    c = constants(lam=0.5, eta=0.2, T=10, B_x=3.0, num_nodes=50, deleted_count=5)
    out = prop2_condition(c)
    assert out["threshold"] == pytest.approx((1 / (0.5 * 0.2 * 10) + 1) * 3.0 * 50 / 5)
    assert out["holds"]
    assert not prop2_condition(constants(delta=1e9))["holds"]
    with pytest.raises(ValueError):
        prop2_condition(constants(deleted_count=0))
