"""Optimal transport between small discrete distributions and diagonal Gaussians."""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _transport
from .validation import check_distribution, check_finite

BRUTE_FORCE_MAX_SUPPORT = 5


@dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    value: float


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """Gaussian with diagonal covariance, parameterised by per-dimension stddev."""

    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        stddev = np.atleast_1d(np.asarray(self.stddev, dtype=np.float64))
        if mean.shape != stddev.shape:
            raise ValueError(f"mean shape {mean.shape} != stddev shape {stddev.shape}")
        check_finite(mean, "mean")
        if not np.all(np.isfinite(stddev)) or np.any(stddev <= 0):
            raise ValueError("stddev entries must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", stddev)


def _check_problem(p, q, cost):
    p = check_distribution(p, "p")
    q = check_distribution(q, "q")
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (p.size, q.size):
        raise ValueError(f"cost shape {cost.shape} does not match supports ({p.size}, {q.size})")
    check_finite(cost, "cost")
    if np.any(cost < 0):
        raise ValueError("cost entries must be nonnegative")
    return p, q, cost


def w1_discrete(p, q, cost):
    """Exact 1-Wasserstein distance and an optimal coupling.

    Solved with the transportation simplex (north-west-corner start, MODI
    pricing). Zero-mass support points are dropped before solving.
    """
    p, q, cost = _check_problem(p, q, cost)
    ia = np.flatnonzero(p > 0)
    ib = np.flatnonzero(q > 0)
    pa = p[ia] / p[ia].sum()
    qb = q[ib] / q[ib].sum()
    sub = np.ascontiguousarray(cost[np.ix_(ia, ib)])
    nb = ia.size + ib.size - 1
    rows = np.zeros(nb, dtype=np.int64)
    cols = np.zeros(nb, dtype=np.int64)
    flows = np.zeros(nb)
    _, status = _transport.transport_simplex(pa, qb, sub, rows, cols, flows, False)
    if status != _transport.STATUS_OK:
        raise RuntimeError("transportation simplex hit its pivot limit")
    coupling = np.zeros((p.size, q.size))
    np.add.at(coupling, (ia[rows], ib[cols]), flows)
    return TransportPlan(coupling, float(np.sum(coupling * cost)))


@lru_cache(maxsize=None)
def _spanning_tree_inverses(m, n):
    """Cells and inverse reduced incidence matrix of every spanning tree of K(m, n).

    Spanning trees of the complete bipartite graph are exactly the bases of
    the m-by-n transportation polytope. Equation ``i < m`` is the supply
    constraint of source ``i``; equations ``m..m+n-2`` are the demand
    constraints of the first ``n - 1`` sinks (the last is implied by balance).
    The incidence matrix of a tree is unimodular, so inverses are stored as int8.
    """
    size = m + n - 1
    combos = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(m * n), size)),
        dtype=np.int64,
    ).reshape(-1, size)
    trees, inverses = [], []
    for chunk in np.array_split(combos, max(1, len(combos) // 50_000)):
        count = len(chunk)
        t = np.repeat(np.arange(count), size)
        k = np.tile(np.arange(size), count)
        r = (chunk // n).ravel()
        c = (chunk % n).ravel()
        a = np.zeros((count, size, size))
        a[t, r, k] = 1.0
        demand = c < n - 1
        a[t[demand], m + c[demand], k[demand]] = 1.0
        keep = np.abs(np.linalg.det(a)) > 0.5
        if np.any(keep):
            trees.append(chunk[keep])
            inverses.append(np.rint(np.linalg.inv(a[keep])).astype(np.int8))
    return np.concatenate(trees), np.concatenate(inverses)


def brute_force_w1(p, q, cost):
    """Exact W1 by enumerating every basic feasible transport plan.

    An independent check of :func:`w1_discrete` for tiny supports: at most
    five points per side once zero-mass points are dropped.
    """
    p, q, cost = _check_problem(p, q, cost)
    ia = np.flatnonzero(p > 0)
    ib = np.flatnonzero(q > 0)
    m, n = ia.size, ib.size
    if max(m, n) > BRUTE_FORCE_MAX_SUPPORT:
        raise ValueError(
            f"brute force supports at most {BRUTE_FORCE_MAX_SUPPORT} points per side, got ({m}, {n})"
        )
    if m == 1 or n == 1:
        return float(p[ia] @ cost[np.ix_(ia, ib)] @ q[ib])
    trees, inverses = _spanning_tree_inverses(m, n)
    rhs = np.concatenate([p[ia], q[ib][:-1]])
    flows = inverses @ rhs
    feasible = np.all(flows >= -1e-12, axis=1)
    cells = cost[np.ix_(ia, ib)].ravel()[trees]
    values = np.sum(np.clip(flows, 0.0, None) * cells, axis=1)
    return float(values[feasible].min())


def w2_diag_gaussian(a, b):
    """Closed-form 2-Wasserstein distance between diagonal Gaussians."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    return float(np.sqrt(np.sum((a.mean - b.mean) ** 2) + np.sum((a.stddev - b.stddev) ** 2)))
