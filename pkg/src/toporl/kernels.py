"""Loop-heavy numeric kernels, numba-jitted with pure-numpy fallbacks.

The hot inner loops that are not BLAS-shaped live here: all-pairs shortest
paths over the navigation graph, the DTW accumulation table, the fused Adam
update, and the gelu pair used by every FFN. Dense matmuls stay on numpy/BLAS.

Backend selection happens once at import: numba when importable, unless the
environment variable ``TOPORL_NO_NUMBA`` is set to a non-empty value, in which
case the numpy implementations are used. Both backends are always importable
via :data:`IMPLS` so they can be benchmarked and cross-checked against each
other (see ``benchmarks/bench_kernels.py``).

Kernels avoid ``parallel=True`` and ``fastmath``: results must be
deterministic, and the two backends must agree to float precision.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        return decorator


USE_NUMBA = HAS_NUMBA and not os.environ.get("TOPORL_NO_NUMBA")

INF = np.inf

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_apsp(n: int, indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """All-pairs shortest paths by per-source Dijkstra over a CSR adjacency.

    O(n^2) selection per source; graphs here have tens of nodes, so the
    simple argmin scan beats a heap and keeps both backends tie-break
    identical (first minimum wins).
    """
    dist = np.full((n, n), INF)
    for src in range(n):
        d = dist[src]
        d[src] = 0.0
        done = np.zeros(n, dtype=np.bool_)
        for _ in range(n):
            u = int(np.argmin(np.where(done, INF, d)))
            if not np.isfinite(d[u]) or done[u]:
                break
            done[u] = True
            lo, hi = indptr[u], indptr[u + 1]
            nbrs = indices[lo:hi]
            cand = d[u] + weights[lo:hi]
            np.minimum.at(d, nbrs, cand)
    return dist


def _np_dtw_cost(dist: np.ndarray) -> float:
    """DTW accumulated cost for a precomputed (|P|, |R|) distance matrix."""
    n, m = dist.shape
    cum = np.empty((n, m))
    cum[0, 0] = dist[0, 0]
    for j in range(1, m):
        cum[0, j] = cum[0, j - 1] + dist[0, j]
    for i in range(1, n):
        cum[i, 0] = cum[i - 1, 0] + dist[i, 0]
        for j in range(1, m):
            best = cum[i - 1, j]
            if cum[i, j - 1] < best:
                best = cum[i, j - 1]
            if cum[i - 1, j - 1] < best:
                best = cum[i - 1, j - 1]
            cum[i, j] = dist[i, j] + best
    return float(cum[n - 1, m - 1])


def _np_adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    b1: float,
    b2: float,
    eps: float,
) -> None:
    """One fused in-place Adam update on flat float64 views."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _np_gelu_forward(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, tanh approximation."""
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _np_gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_apsp(n, indptr, indices, weights):
    dist = np.full((n, n), INF)
    for src in range(n):
        d = dist[src]
        d[src] = 0.0
        done = np.zeros(n, dtype=np.bool_)
        for _ in range(n):
            u = -1
            best = INF
            for i in range(n):
                if not done[i] and d[i] < best:
                    best = d[i]
                    u = i
            if u < 0:
                break
            done[u] = True
            for e in range(indptr[u], indptr[u + 1]):
                w = indices[e]
                cand = d[u] + weights[e]
                if cand < d[w]:
                    d[w] = cand
    return dist


@njit(cache=True)
def _nb_dtw_cost(dist):
    n, m = dist.shape
    cum = np.empty((n, m))
    cum[0, 0] = dist[0, 0]
    for j in range(1, m):
        cum[0, j] = cum[0, j - 1] + dist[0, j]
    for i in range(1, n):
        cum[i, 0] = cum[i - 1, 0] + dist[i, 0]
        for j in range(1, m):
            best = cum[i - 1, j]
            if cum[i, j - 1] < best:
                best = cum[i, j - 1]
            if cum[i - 1, j - 1] < best:
                best = cum[i - 1, j - 1]
            cum[i, j] = dist[i, j] + best
    return cum[n - 1, m - 1]


@njit(cache=True)
def _nb_adam_update(p, g, m, v, t, lr, b1, b2, eps):
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def _nb_gelu_forward(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        xi = x[i]
        inner = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        out[i] = 0.5 * xi * (1.0 + math.tanh(inner))
    return out


@njit(cache=True)
def _nb_gelu_backward(x, dy):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        xi = x[i]
        inner = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        t = math.tanh(inner)
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xi * xi)
        out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner)
    return out


def _nb_dtw_cost_f(dist: np.ndarray) -> float:
    return float(_nb_dtw_cost(dist))


def _nb_adam_update_i(p, g, m, v, t, lr, b1, b2, eps):
    _nb_adam_update(p, g, m, v, t, lr, b1, b2, eps)


# gelu kernels operate on flat views; wrappers keep the caller shape-agnostic


def _gelu_fwd_wrap(impl):
    def fwd(x: np.ndarray) -> np.ndarray:
        flat = np.ascontiguousarray(x).reshape(-1)
        return impl(flat).reshape(x.shape)

    return fwd


def _gelu_bwd_wrap(impl):
    def bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        flat_x = np.ascontiguousarray(x).reshape(-1)
        flat_dy = np.ascontiguousarray(dy).reshape(-1)
        return impl(flat_x, flat_dy).reshape(x.shape)

    return bwd


IMPLS = {
    "numpy": {
        "apsp": _np_apsp,
        "dtw_cost": _np_dtw_cost,
        "adam_update": _np_adam_update,
        "gelu_forward": _gelu_fwd_wrap(_np_gelu_forward),
        "gelu_backward": _gelu_bwd_wrap(_np_gelu_backward),
    },
}

if HAS_NUMBA:
    IMPLS["numba"] = {
        "apsp": _nb_apsp,
        "dtw_cost": _nb_dtw_cost_f,
        "adam_update": _nb_adam_update_i,
        "gelu_forward": _gelu_fwd_wrap(_nb_gelu_forward),
        "gelu_backward": _gelu_bwd_wrap(_nb_gelu_backward),
    }

BACKEND = "numba" if USE_NUMBA else "numpy"

apsp = IMPLS[BACKEND]["apsp"]
dtw_cost = IMPLS[BACKEND]["dtw_cost"]
adam_update = IMPLS[BACKEND]["adam_update"]
gelu_forward = IMPLS[BACKEND]["gelu_forward"]
gelu_backward = IMPLS[BACKEND]["gelu_backward"]


def warmup() -> None:
    """Trigger JIT compilation on tiny inputs (no-op on the numpy backend)."""
    indptr = np.array([0, 1, 2], dtype=np.int64)
    indices = np.array([1, 0], dtype=np.int64)
    weights = np.array([1.0, 1.0])
    apsp(2, indptr, indices, weights)
    dtw_cost(np.ones((2, 2)))
    buf = np.zeros(4)
    adam_update(buf.copy(), buf.copy(), buf.copy(), buf.copy(), 1, 0.0, 0.9, 0.999, 1e-8)
    gelu_backward(buf, gelu_forward(buf))
