import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from wnll_lab.graph import (
    ConvergenceError,
    DisconnectedGraphError,
    TemplateSet,
    WeightGraph,
    build_knn_graph,
    dirichlet_energy,
    harmonic_extend,
    predict_labels,
    solve_sparse_cg,
    warn_if_small_template,
    wnll_boost,
    wnll_interpolate,
)

from helpers import dense_wnll_oracle


def random_instance(rng, n=None, k=None, m=None, d=None):
    n = n or int(rng.integers(8, 51))
    m = m or int(rng.integers(2, 5))
    k = k or int(rng.integers(3, min(10, n - 1) + 1))
    d = d or int(rng.integers(2, 6))
    pts = rng.normal(size=(n, d))
    n_te = int(rng.integers(m, max(m + 1, n // 3)))
    idx = rng.choice(n, size=n_te, replace=False)
    classes = np.concatenate([np.arange(m), rng.integers(0, m, size=n_te - m)])
    return build_knn_graph(pts, k=k), TemplateSet.from_classes(idx, classes, m)


def brute_knn(pts, k):
    n = len(pts)
    out = []
    for i in range(n):
        d = [(float(np.sum((pts[i] - pts[j]) ** 2)), j) for j in range(n) if j != i]
        d.sort()
        out.append(sorted(j for _, j in d[:k]))
    return out


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 5))
    g = build_knn_graph(pts, k=5)
    assert [sorted(r) for r in g.neighbors.tolist()] == brute_knn(pts, 5)
    assert np.all(g.neighbors != np.arange(30)[:, None])
    assert np.all((g.weights > 0) & (g.weights <= 1))


def test_coincident_points_weight_one():
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0]])
    g = build_knn_graph(pts, k=1)
    assert g.neighbors[0, 0] == 1 and g.weights[0, 0] == 1.0
    # sigma floor keeps the weight finite when every neighbour coincides
    g2 = build_knn_graph(np.zeros((3, 2)), k=2)
    assert np.all(g2.weights == 1.0)


def test_weight_at_sigma_distance():
    pts = np.array([[0.0], [1.0], [3.0]])
    g = build_knn_graph(pts, k=2, k_sigma=1)
    # node 0: sigma = 1 (distance to node 1) -> w(0, 1) = exp(-1)
    assert g.sigma[0] == 1.0
    assert g.weights[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert g.weights[0, 0] == pytest.approx(0.36788, abs=1e-5)


def test_graph_rejects_single_point():
    with pytest.raises(ValueError):
        build_knn_graph(np.zeros((1, 3)), k=1)


def test_dirichlet_energy_cases():
    g = WeightGraph(np.array([[1], [0]]), np.array([[1.0], [0.0]]), np.ones(2))
    assert dirichlet_energy(g, np.array([0.0, 1.0])) == 0.5
    rng = np.random.default_rng(1)
    g = build_knn_graph(rng.normal(size=(20, 3)), k=4)
    assert dirichlet_energy(g, np.full((20, 3), 0.7)) == 0.0
    u = rng.normal(size=(20, 3))
    dense = 0.0
    for x in range(20):
        for j, y in enumerate(g.neighbors[x]):
            dense += 0.5 * g.weights[x, j] * np.sum((u[x] - u[y]) ** 2)
    assert abs(dirichlet_energy(g, u) - dense) <= 1e-10
    with pytest.raises(ValueError):
        dirichlet_energy(g, np.zeros((19, 3)))


def path_graph():
    # reflection-symmetric, so the middle node is equidistant from both labels
    return build_knn_graph(np.array([[0.0], [1.0], [2.0]]), k=2)


def test_three_node_path_midpoint():
    te = TemplateSet.from_classes([0, 2], [0, 1], 2)
    for solver in (harmonic_extend, wnll_interpolate):
        u = solver(path_graph(), te)
        np.testing.assert_allclose(u[1], [0.5, 0.5], atol=1e-12)


def test_all_labeled_returns_labels():
    rng = np.random.default_rng(2)
    g = build_knn_graph(rng.normal(size=(6, 2)), k=3)
    te = TemplateSet.from_classes(np.arange(6), [0, 1, 2, 0, 1, 2], 3)
    assert wnll_boost(6, 6) == 0.0
    for solver in (harmonic_extend, wnll_interpolate):
        np.testing.assert_array_equal(solver(g, te), np.eye(3)[[0, 1, 2, 0, 1, 2]])


@pytest.mark.parametrize("seed", range(5))
def test_solvers_match_dense_oracle_n40(seed):
    rng = np.random.default_rng(100 + seed)
    g, te = random_instance(rng, n=40)
    boost = wnll_boost(g.n, len(te.indices))
    np.testing.assert_allclose(harmonic_extend(g, te), dense_wnll_oracle(g, te, 0.0), atol=1e-8, rtol=0)
    np.testing.assert_allclose(wnll_interpolate(g, te), dense_wnll_oracle(g, te, boost), atol=1e-8, rtol=0)


def test_disconnected_component_rejected():
    pts = np.array([[0.0], [0.1], [0.2], [50.0], [50.1], [50.2]])
    g = build_knn_graph(pts, k=2)
    te = TemplateSet.from_classes([0, 1], [0, 1], 2)
    with pytest.raises(DisconnectedGraphError, match="node [345]"):
        wnll_interpolate(g, te)


def test_template_validation():
    with pytest.raises(ValueError, match="cover"):
        TemplateSet.from_classes([0, 1], [0, 0], 2)
    with pytest.raises(ValueError, match="distinct"):
        TemplateSet.from_classes([0, 0], [0, 1], 2)
    with pytest.raises(ValueError, match="one-hot"):
        TemplateSet([0, 1], [[0.5, 0.5], [0, 1]])


def test_small_template_warning():
    with pytest.warns(UserWarning):
        assert warn_if_small_template(20, 10)  # 10 ln 10 = 23.03
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not warn_if_small_template(24, 10)


def test_cg_small_cases():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(solve_sparse_cg(sp.identity(3), b), b)
    np.testing.assert_allclose(solve_sparse_cg(sp.diags([2.0, 4.0]), np.array([2.0, 4.0])), [1.0, 1.0])


def test_cg_random_spd_vs_dense():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(50, 50))
    a = q @ q.T + 5 * np.eye(50)
    b = rng.normal(size=50)
    x = solve_sparse_cg(sp.csr_matrix(a), b, tol=1e-11)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-8, rtol=0)


def test_cg_non_convergence_reports_residual():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(30, 30))
    a = q @ q.T + np.eye(30)
    with pytest.raises(ConvergenceError) as err:
        solve_sparse_cg(sp.csr_matrix(a), rng.normal(size=30), tol=1e-14, max_iter=2)
    assert err.value.residual > 0


def test_predict_labels_ties_to_lowest():
    assert predict_labels(np.array([[0, 0, 1.0]]))[0] == 2
    assert predict_labels(np.array([[0.5, 0.5]]))[0] == 0
    rng = np.random.default_rng(5)
    u = rng.integers(0, 3, size=(40, 4)).astype(float)
    expected = []
    for row in u:
        best = 0
        for c in range(1, 4):
            if row[c] > row[best]:
                best = c
        expected.append(best)
    assert predict_labels(u).tolist() == expected
