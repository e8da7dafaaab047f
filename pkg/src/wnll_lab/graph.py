"""kNN weight graphs and label interpolation by harmonic extension / WNLL.

Labels live on a small template subset of a point cloud. Unlabeled values
solve a sparse symmetric system obtained by eliminating the template rows;
the WNLL variant adds extra weight on edges that come from template points,
scaled by ``n / n_template - 1``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

SIGMA_FLOOR = 1e-12


class DisconnectedGraphError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class WeightGraph:
    """Directed kNN graph: row ``i`` holds the ``k`` neighbours of point ``i``.

    ``weights[i, j] = exp(-|x_i - x_nbr|^2 / sigma_i^2)`` with ``sigma_i`` the
    distance from ``i`` to its ``k_sigma``-th neighbour.
    """

    neighbors: np.ndarray
    weights: np.ndarray
    sigma: np.ndarray

    @property
    def n(self):
        return self.neighbors.shape[0]

    @property
    def k(self):
        return self.neighbors.shape[1]

    def to_sparse(self):
        """Weight matrix ``W`` with ``W[i, j] = w(x_i, x_j)``."""
        rows = np.repeat(np.arange(self.n), self.k)
        return sp.csr_matrix(
            (self.weights.ravel(), (rows, self.neighbors.ravel())), shape=(self.n, self.n)
        )


@dataclass(frozen=True)
class TemplateSet:
    """Labelled subset of a point cloud, labels stored one-hot."""

    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        lab = np.asarray(self.labels, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", lab)
        if idx.ndim != 1 or lab.ndim != 2 or len(idx) != lab.shape[0]:
            raise ValueError(f"template indices {idx.shape} and labels {lab.shape} disagree")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("template indices must be distinct")
        if not (np.all((lab == 0) | (lab == 1)) and np.all(lab.sum(axis=1) == 1)):
            raise ValueError("template labels must be one-hot rows")
        missing = np.flatnonzero(lab.sum(axis=0) == 0)
        if len(missing):
            raise ValueError(f"template does not cover classes {missing.tolist()}")

    @classmethod
    def from_classes(cls, indices, classes, n_classes):
        classes = np.asarray(classes, dtype=np.int64)
        return cls(indices, np.eye(n_classes)[classes])

    @property
    def n_classes(self):
        return self.labels.shape[1]

    def validate_for(self, n):
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError(f"template index out of range for {n} points")


def min_template_size(n_classes):
    """``m ln m`` lower bound on template size."""
    return n_classes * math.log(n_classes) if n_classes > 1 else 1.0


def warn_if_small_template(size, n_classes):
    if size < min_template_size(n_classes):
        warnings.warn(
            f"template of {size} points is below m*ln(m) = {min_template_size(n_classes):.2f} "
            f"for m = {n_classes} classes",
            stacklevel=3,
        )
        return True
    return False


def pairwise_sqdist(points, chunk=64):
    """Exact squared distances computed from explicit differences."""
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, n))
    for s in range(0, n, chunk):
        diff = x[s:s + chunk, None, :] - x[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def build_knn_graph(points, k=15, k_sigma=None):
    """Exhaustive kNN graph with Gaussian weights and per-node scale.

    Neighbours are ordered by distance with ties broken by the lower index,
    so the result does not depend on the order in which points are supplied
    except through their indices.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"points must be (n, d), got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points to build a graph")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    k = min(k, n - 1)
    if k < 1:
        raise ValueError("k must be at least 1")
    k_sigma = k if k_sigma is None else min(k_sigma, k)
    if not 1 <= k_sigma <= k:
        raise ValueError(f"k_sigma must lie in [1, {k}]")

    d2 = pairwise_sqdist(x)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    nd2 = np.take_along_axis(d2, order, axis=1)
    sigma = np.maximum(np.sqrt(nd2[:, k_sigma - 1]), SIGMA_FLOOR)
    w = np.exp(-nd2 / sigma[:, None] ** 2)
    return WeightGraph(order, w, sigma)


def dirichlet_energy(graph, u):
    """``1/2 * sum_x sum_y w(x, y) |u(x) - u(y)|^2`` over graph edges."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[0] != graph.n:
        raise ValueError(f"field has {u.shape[0]} rows, graph has {graph.n} nodes")
    diff = u[:, None, :] - u[graph.neighbors]
    return 0.5 * float(np.sum(graph.weights[:, :, None] * diff * diff))


def solve_sparse_cg(a, b, tol=1e-10, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients for SPD ``a``.

    Stops once ``max|a x - b| <= tol``; raises ConvergenceError otherwise.
    """
    a = sp.csr_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    if n == 0:
        return np.zeros(0)
    diag = a.diagonal()
    if np.any(diag <= 0):
        raise ValueError("matrix is not positive definite (non-positive diagonal)")
    inv_d = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - a @ x
    if np.max(np.abs(r)) <= tol:
        return x
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.max(np.abs(r)) <= tol:
            # recompute the true residual to guard against drift
            r = b - a @ x
            if np.max(np.abs(r)) <= tol:
                return x
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.max(np.abs(b - a @ x)))
    raise ConvergenceError(f"CG did not converge in {max_iter} iterations (residual {res:.3e})", res)


def _check_connectivity(wsym, labeled_mask):
    _, comp = connected_components(wsym, directed=False)
    has_label = np.zeros(comp.max() + 1, dtype=bool)
    has_label[comp[labeled_mask]] = True
    bad = np.flatnonzero(~has_label[comp] & ~labeled_mask)
    if len(bad):
        raise DisconnectedGraphError(
            f"unlabeled node {int(bad[0])} has no path to a template node"
        )


def _interpolate(graph, template, boost):
    n = graph.n
    template.validate_for(n)
    lab = np.zeros(n, dtype=bool)
    lab[template.indices] = True
    unl = np.flatnonzero(~lab)
    m = template.n_classes

    u = np.zeros((n, m))
    u[template.indices] = template.labels
    if len(unl) == 0:
        return u

    w = graph.to_sparse()
    wsym = (w + w.T).tocsr()
    _check_connectivity(wsym, lab)

    g = np.zeros((n, m))
    g[template.indices] = template.labels
    # Row x: sum_y wsym(x,y)(u_x - u_y) + boost * sum_{y in te} w(y,x)(u_x - u_y) = 0
    wt_from_te = w.T.tocsr()[:, template.indices]  # (n, n_te): w(y, x)
    w_uu = wsym[unl][:, unl]
    deg = np.asarray(wsym[unl].sum(axis=1)).ravel()
    a = sp.diags(deg) - w_uu
    rhs = wsym[unl][:, template.indices] @ template.labels
    if boost != 0.0:
        wte = wt_from_te[unl]
        a = a + sp.diags(boost * np.asarray(wte.sum(axis=1)).ravel())
        rhs = rhs + boost * (wte @ template.labels)
    a = a.tocsr()
    max_iter = 10 * n
    for c in range(m):
        u[unl, c] = solve_sparse_cg(a, np.asarray(rhs[:, c]).ravel(), tol=1e-10, max_iter=max_iter)
    return u


def harmonic_extend(graph, template):
    """Harmonic extension of one-hot template labels to all graph nodes."""
    return _interpolate(graph, template, 0.0)


def wnll_boost(n, n_template):
    return n / n_template - 1.0


def wnll_interpolate(graph, template):
    """Weighted nonlocal Laplacian interpolation of template labels."""
    if len(template.indices) < 1:
        raise ValueError("WNLL needs at least one template point")
    return _interpolate(graph, template, wnll_boost(graph.n, len(template.indices)))


def predict_labels(u):
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(u), axis=1)
