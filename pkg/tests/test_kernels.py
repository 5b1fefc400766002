"""Backend equivalence: every kernel's numba and numpy paths must agree."""

import numpy as np
import pytest

from toporl import kernels


def random_graph(rng, n=12, extra=14):
    """Connected weighted graph in CSR form plus an edge list."""
    edges = {}
    order = rng.permutation(n)
    for a, b in zip(order[:-1], order[1:]):
        edges[(min(a, b), max(a, b))] = float(rng.uniform(0.5, 3.0))
    for _ in range(extra):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges[(min(a, b), max(a, b))] = float(rng.uniform(0.5, 3.0))
    adj = [[] for _ in range(n)]
    for (a, b), w in edges.items():
        adj[a].append((b, w))
        adj[b].append((a, w))
    indptr = [0]
    indices = []
    weights = []
    for row in adj:
        for b, w in sorted(row):
            indices.append(b)
            weights.append(w)
        indptr.append(len(indices))
    return (
        np.array(indptr, dtype=np.int64),
        np.array(indices, dtype=np.int64),
        np.array(weights),
        edges,
    )


needs_numba = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")


@needs_numba
def test_apsp_backends_agree():
    rng = np.random.default_rng(0)
    for _ in range(5):
        indptr, indices, weights, _ = random_graph(rng)
        n = len(indptr) - 1
        a = kernels.IMPLS["numpy"]["apsp"](n, indptr, indices, weights)
        b = kernels.IMPLS["numba"]["apsp"](n, indptr, indices, weights)
        np.testing.assert_allclose(a, b, rtol=1e-15, atol=0)


@needs_numba
def test_dtw_backends_agree():
    rng = np.random.default_rng(1)
    for _ in range(10):
        dist = rng.uniform(0, 5, size=(rng.integers(1, 9), rng.integers(1, 9)))
        a = kernels.IMPLS["numpy"]["dtw_cost"](dist)
        b = kernels.IMPLS["numba"]["dtw_cost"](dist)
        assert a == pytest.approx(b, rel=1e-15)


@needs_numba
def test_adam_backends_agree():
    rng = np.random.default_rng(2)
    p1 = rng.normal(size=64)
    g = rng.normal(size=64)
    m1, v1 = np.zeros(64), np.zeros(64)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    for t in range(1, 4):
        kernels.IMPLS["numpy"]["adam_update"](p1, g, m1, v1, t, 0.01, 0.9, 0.999, 1e-8)
        kernels.IMPLS["numba"]["adam_update"](p2, g, m2, v2, t, 0.01, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p1, p2, rtol=1e-14)
    np.testing.assert_allclose(m1, m2, rtol=1e-14)
    np.testing.assert_allclose(v1, v2, rtol=1e-14)


@needs_numba
def test_gelu_backends_agree():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 7)) * 3
    dy = rng.normal(size=(5, 7))
    for name, args in [("gelu_forward", (x,)), ("gelu_backward", (x, dy))]:
        a = kernels.IMPLS["numpy"][name](*args)
        b = kernels.IMPLS["numba"][name](*args)
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_apsp_symmetric_and_zero_diagonal():
    rng = np.random.default_rng(4)
    indptr, indices, weights, _ = random_graph(rng)
    n = len(indptr) - 1
    d = kernels.apsp(n, indptr, indices, weights)
    np.testing.assert_allclose(d, d.T, atol=1e-12)
    np.testing.assert_array_equal(np.diag(d), np.zeros(n))


def test_apsp_matches_bellman_ford():
    rng = np.random.default_rng(5)
    indptr, indices, weights, edges = random_graph(rng, n=9, extra=8)
    n = len(indptr) - 1
    got = kernels.apsp(n, indptr, indices, weights)
    # brute-force Bellman-Ford oracle
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for src in range(n):
        for _ in range(n):
            for (a, b), w in edges.items():
                if dist[src, a] + w < dist[src, b]:
                    dist[src, b] = dist[src, a] + w
                if dist[src, b] + w < dist[src, a]:
                    dist[src, a] = dist[src, b] + w
    np.testing.assert_allclose(got, dist, atol=1e-9)


def test_dtw_monotone_alignment_identity():
    dist = np.zeros((4, 4))
    assert kernels.dtw_cost(dist) == 0.0
    single = np.array([[2.5]])
    assert kernels.dtw_cost(single) == 2.5


def test_warmup_runs():
    kernels.warmup()
