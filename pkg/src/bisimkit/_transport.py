"""Compiled transportation-simplex kernels.

Bases are stored as parallel arrays ``(rows, cols, flows)`` of length
``m + n - 1`` so a solved basis can be handed back in as a warm start when
only the cost matrix changes (the marginals, and hence feasibility, stay put).
"""

import os

import numba
import numpy as np
from numba import njit, prange

# TBB is often too old in slim images; workqueue is always available.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"
if os.environ.get("BISIMKIT_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["BISIMKIT_THREADS"]), numba.config.NUMBA_NUM_THREADS)))

STATUS_OK = 0
STATUS_PIVOT_LIMIT = 1


@njit(cache=True)
def northwest_corner(p, q, rows, cols, flows):
    m = p.size
    n = q.size
    a = p.copy()
    b = q.copy()
    i = 0
    j = 0
    k = 0
    while True:
        f = min(a[i], b[j])
        rows[k] = i
        cols[k] = j
        flows[k] = f
        k += 1
        a[i] -= f
        b[j] -= f
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return k


@njit(cache=True)
def _potentials(cost, rows, cols, nb, u, v):
    m, n = cost.shape
    has_u = np.zeros(m, dtype=np.bool_)
    has_v = np.zeros(n, dtype=np.bool_)
    u[0] = 0.0
    has_u[0] = True
    assigned = 1
    while assigned < m + n:
        progress = False
        for k in range(nb):
            i = rows[k]
            j = cols[k]
            if has_u[i] and not has_v[j]:
                v[j] = cost[i, j] - u[i]
                has_v[j] = True
                assigned += 1
                progress = True
            elif has_v[j] and not has_u[i]:
                u[i] = cost[i, j] - v[j]
                has_u[i] = True
                assigned += 1
                progress = True
        if not progress:
            return False
    return True


@njit(cache=True)
def _tree_path(m, n, rows, cols, nb, start_row, end_col, path):
    """Basis cells on the tree path from column ``end_col`` back to row ``start_row``."""
    n_nodes = m + n
    parent_node = np.full(n_nodes, -1, dtype=np.int64)
    parent_edge = np.full(n_nodes, -1, dtype=np.int64)
    visited = np.zeros(n_nodes, dtype=np.bool_)
    queue = np.empty(n_nodes, dtype=np.int64)
    head = 0
    tail = 0
    queue[tail] = start_row
    tail += 1
    visited[start_row] = True
    target = m + end_col
    while head < tail and not visited[target]:
        node = queue[head]
        head += 1
        for k in range(nb):
            if node < m:
                if rows[k] != node:
                    continue
                nxt = m + cols[k]
            else:
                if cols[k] != node - m:
                    continue
                nxt = rows[k]
            if not visited[nxt]:
                visited[nxt] = True
                parent_node[nxt] = node
                parent_edge[nxt] = k
                queue[tail] = nxt
                tail += 1
    length = 0
    node = target
    while node != start_row:
        path[length] = parent_edge[node]
        length += 1
        node = parent_node[node]
    return length


@njit(cache=True)
def transport_simplex(p, q, cost, rows, cols, flows, warm):
    """Solve the balanced transportation problem in place.

    Entering cells follow Dantzig's most-negative rule; after a degenerate
    pivot the solver switches to Bland's lowest-index rule until a pivot moves
    mass again. Returns ``(value, status)``.
    """
    m, n = cost.shape
    nb = m + n - 1
    if not warm:
        northwest_corner(p, q, rows, cols, flows)
    is_basic = np.zeros((m, n), dtype=np.bool_)
    for k in range(nb):
        is_basic[rows[k], cols[k]] = True
    scale = 0.0
    for i in range(m):
        for j in range(n):
            scale = max(scale, abs(cost[i, j]))
    eps = 1e-12 * (1.0 + scale)
    u = np.empty(m)
    v = np.empty(n)
    path = np.empty(nb, dtype=np.int64)
    bland = False
    status = STATUS_OK
    max_pivots = 1000 + 50 * m * n
    for _ in range(max_pivots + 1):
        _potentials(cost, rows, cols, nb, u, v)
        enter_i = -1
        enter_j = -1
        best = -eps
        for i in range(m):
            for j in range(n):
                if is_basic[i, j]:
                    continue
                rc = cost[i, j] - u[i] - v[j]
                if rc < best:
                    best = rc
                    enter_i = i
                    enter_j = j
                    if bland:
                        break
            if bland and enter_i >= 0:
                break
        if enter_i < 0:
            break
        length = _tree_path(m, n, rows, cols, nb, enter_i, enter_j, path)
        theta = np.inf
        leave = -1
        leave_key = m * n
        for t in range(0, length, 2):
            k = path[t]
            f = flows[k]
            key = rows[k] * n + cols[k]
            if f < theta or (f == theta and key < leave_key):
                theta = f
                leave = k
                leave_key = key
        for t in range(length):
            k = path[t]
            if t % 2 == 0:
                flows[k] -= theta
            else:
                flows[k] += theta
        is_basic[rows[leave], cols[leave]] = False
        rows[leave] = enter_i
        cols[leave] = enter_j
        flows[leave] = theta
        is_basic[enter_i, enter_j] = True
        bland = theta <= 0.0
    else:
        status = STATUS_PIVOT_LIMIT
    value = 0.0
    for k in range(nb):
        value += flows[k] * cost[rows[k], cols[k]]
    return value, status


@njit(parallel=True, cache=True)
def w1_batch(dist, sup_a, prob_a, size_a, sup_b, prob_b, size_b, rows, cols, flows, warm, out, status):
    """Solve one transport problem per row of the support tables.

    Problem ``k`` moves ``prob_a[k, :size_a[k]]`` (on states ``sup_a[k]``) onto
    ``prob_b[k, :size_b[k]]`` with ground cost ``dist``. ``size_a[k] == 0``
    marks a problem known to have value 0. Each ``k`` writes only its own
    slots, so the result does not depend on the thread schedule.
    """
    n_problems = size_a.size
    for k in prange(n_problems):
        m = size_a[k]
        n = size_b[k]
        if m == 0:
            out[k] = 0.0
            status[k] = STATUS_OK
            continue
        cost = np.empty((m, n))
        for i in range(m):
            for j in range(n):
                cost[i, j] = dist[sup_a[k, i], sup_b[k, j]]
        value, st = transport_simplex(
            prob_a[k, :m], prob_b[k, :n], cost, rows[k], cols[k], flows[k], warm[k]
        )
        out[k] = value
        status[k] = st
        warm[k] = True
