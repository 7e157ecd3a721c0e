"""Hot numeric kernels: nearest-neighbour search, k-nearest lists, optimal assignment.

Each kernel exists twice, a numba ``@njit`` loop and a vectorised numpy path.
The numba path is used when numba imports and ``SHAPEDIFF_NO_NUMBA`` is unset
(or ``0``).  Both paths compute squared distances as ``dx*dx + dy*dy + dz*dz``
in that order and break ties towards the lower index, so they agree exactly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("SHAPEDIFF_NO_NUMBA", "0") in ("", "0")

_CHUNK = 256


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def _sqdist_block(a, b):
    d = a[:, None, :] - b[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_numpy(P, Q):
    n = P.shape[0]
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for s in range(0, n, _CHUNK):
        block = _sqdist_block(P[s:s + _CHUNK], Q)
        j = np.argmin(block, axis=1)
        idx[s:s + _CHUNK] = j
        d2[s:s + _CHUNK] = block[np.arange(block.shape[0]), j]
    return idx, d2


def knn_numpy(X, k):
    n = X.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, _CHUNK):
        block = _sqdist_block(X[s:s + _CHUNK], X)
        rows = np.arange(block.shape[0])
        block[rows, rows + s] = np.inf
        out[s:s + _CHUNK] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return out


def assignment_numpy(C):
    """Shortest augmenting path assignment (rows <= cols), column loop vectorised."""
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

def _nearest_loop(P, Q):
    n = P.shape[0]
    m = Q.shape[0]
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(m):
            dx = P[i, 0] - Q[j, 0]
            dy = P[i, 1] - Q[j, 1]
            dz = P[i, 2] - Q[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bj = j
        idx[i] = bj
        d2[i] = best
    return idx, d2


def _knn_loop(X, k):
    n = X.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    best_j = np.empty(k, dtype=np.int64)
    for i in range(n):
        for s in range(k):
            best_d[s] = np.inf
            best_j[s] = -1
        for j in range(n):
            if j == i:
                continue
            dx = X[i, 0] - X[j, 0]
            dy = X[i, 1] - X[j, 1]
            dz = X[i, 2] - X[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best_d[k - 1]:
                pos = k - 1
                while pos > 0 and d < best_d[pos - 1]:
                    best_d[pos] = best_d[pos - 1]
                    best_j[pos] = best_j[pos - 1]
                    pos -= 1
                best_d[pos] = d
                best_j[pos] = j
        for s in range(k):
            out[i, s] = best_j[s]
    return out


def _assignment_loop(C):
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = np.inf
            used[j] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


if HAVE_NUMBA:
    nearest_numba = numba.njit(cache=True)(_nearest_loop)
    knn_numba = numba.njit(cache=True)(_knn_loop)
    assignment_numba = numba.njit(cache=True)(_assignment_loop)
else:  # pragma: no cover
    nearest_numba = knn_numba = assignment_numba = None


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def _as_points(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def nearest(P, Q, use_numba=None):
    """For each row of ``P`` the index of and squared distance to its nearest row of ``Q``."""
    P, Q = _as_points(P), _as_points(Q)
    if use_numba if use_numba is not None else USE_NUMBA:
        return nearest_numba(P, Q)
    return nearest_numpy(P, Q)


def knn(X, k, use_numba=None):
    """``(n, k)`` nearest-neighbour indices, self excluded, ascending distance."""
    X = _as_points(X)
    k = int(k)
    if not 1 <= k < len(X):
        raise ValueError(f"k must be in [1, {len(X) - 1}] for {len(X)} points, got {k}")
    if use_numba if use_numba is not None else USE_NUMBA:
        return knn_numba(X, k)
    return knn_numpy(X, k)


def assignment(C, use_numba=None):
    """Minimum-cost assignment of every row of ``C`` to a distinct column.

    Requires ``C.shape[0] <= C.shape[1]``.  Returns the column chosen for each row.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    if C.shape[0] > C.shape[1]:
        raise ValueError("assignment needs rows <= cols")
    if C.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    if use_numba if use_numba is not None else USE_NUMBA:
        return assignment_numba(C)
    return assignment_numpy(C)
