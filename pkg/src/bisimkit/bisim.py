"""Exact bisimulation relations and metrics on finite MDPs.

Metrics are fixed points of

    d(s, t) = max_a (1 - c) |R(s, a) - R(t, a)| + c W1(P(.|s, a), P(.|t, a); d)

(or the policy-averaged analogue), computed by iterating from ``d = 0`` with
an exact transportation-simplex W1 per state pair and action.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from sklearn.base import BaseEstimator, ClusterMixin

from . import _transport
from .mdp import DiscretePolicy, FiniteMdp, check_mdp, check_policy, greedy_policy, policy_averaged, value_iteration
from .validation import ConvergenceError, check_square_metric, check_unit_interval

DEFAULT_TOL = 1e-8
_ITERATION_MARGIN = 50


@dataclass(frozen=True, eq=False)
class PseudoMetric:
    """Symmetric state-distance matrix with zero diagonal plus solver diagnostics."""

    dist: np.ndarray
    n_iter: int = 0
    last_delta: float = 0.0

    def __post_init__(self):
        dist = check_square_metric(self.dist)
        if np.any(np.diag(dist) != 0):
            raise ValueError("pseudometric diagonal must be exactly zero")
        if np.any(dist < 0):
            raise ValueError("pseudometric entries must be nonnegative")
        if np.max(np.abs(dist - dist.T), initial=0.0) > 1e-12:
            raise ValueError("pseudometric must be symmetric")
        object.__setattr__(self, "dist", dist)

    @property
    def n_states(self):
        return self.dist.shape[0]

    def triangle_violation(self):
        """Largest ``d(i, k) - d(i, j) - d(j, k)`` over all triples (<= 0 for a pseudometric)."""
        d = self.dist
        worst = -np.inf
        for j in range(d.shape[0]):
            worst = max(worst, float(np.max(d - d[:, j : j + 1] - d[j : j + 1, :])))
        return worst


@dataclass(frozen=True, eq=False)
class StatePartition:
    block_id: np.ndarray

    @property
    def n_blocks(self):
        return int(self.block_id.max()) + 1 if self.block_id.size else 0

    def blocks(self):
        return [np.flatnonzero(self.block_id == b) for b in range(self.n_blocks)]


@dataclass(frozen=True, eq=False)
class AggregatedMdp:
    cluster_of: np.ndarray
    representatives: np.ndarray
    mdp: FiniteMdp

    @property
    def n_clusters(self):
        return self.representatives.size


@dataclass(frozen=True)
class ValueBoundReport:
    max_gap: float
    bound: float
    holds: bool


@dataclass(frozen=True)
class LipschitzReport:
    max_ratio: float
    max_violation: float
    holds: bool


# ----------------------------------------------------------------------------
# W1 sweeps over all state pairs


class _PairwiseW1:
    """Batched exact W1 between fixed pairs of distributions under a changing ground metric.

    Each problem keeps its last optimal basis; since only the cost changes
    between calls, that basis stays feasible and is reused as a warm start.
    """

    def __init__(self, dists_a, dists_b):
        dists_a = np.asarray(dists_a, dtype=np.float64)
        dists_b = np.asarray(dists_b, dtype=np.float64)
        n_problems = dists_a.shape[0]
        mask_a = dists_a > 0
        mask_b = dists_b > 0
        width_a = max(1, int(mask_a.sum(axis=1).max(initial=1)))
        width_b = max(1, int(mask_b.sum(axis=1).max(initial=1)))
        self.sup_a = np.zeros((n_problems, width_a), dtype=np.int64)
        self.sup_b = np.zeros((n_problems, width_b), dtype=np.int64)
        self.prob_a = np.zeros((n_problems, width_a))
        self.prob_b = np.zeros((n_problems, width_b))
        self.size_a = np.zeros(n_problems, dtype=np.int64)
        self.size_b = np.zeros(n_problems, dtype=np.int64)
        identical = np.all(dists_a == dists_b, axis=1)
        for k in range(n_problems):
            if identical[k]:
                continue
            ia = np.flatnonzero(mask_a[k])
            ib = np.flatnonzero(mask_b[k])
            self.sup_a[k, : ia.size] = ia
            self.sup_b[k, : ib.size] = ib
            self.prob_a[k, : ia.size] = dists_a[k, ia] / dists_a[k, ia].sum()
            self.prob_b[k, : ib.size] = dists_b[k, ib] / dists_b[k, ib].sum()
            self.size_a[k] = ia.size
            self.size_b[k] = ib.size
        n_basis = width_a + width_b - 1
        self.rows = np.zeros((n_problems, n_basis), dtype=np.int64)
        self.cols = np.zeros((n_problems, n_basis), dtype=np.int64)
        self.flows = np.zeros((n_problems, n_basis))
        self.warm = np.zeros(n_problems, dtype=np.bool_)
        self.status = np.zeros(n_problems, dtype=np.int64)

    def __call__(self, dist):
        out = np.empty(self.size_a.size)
        _transport.w1_batch(
            np.ascontiguousarray(dist, dtype=np.float64),
            self.sup_a,
            self.prob_a,
            self.size_a,
            self.sup_b,
            self.prob_b,
            self.size_b,
            self.rows,
            self.cols,
            self.flows,
            self.warm,
            out,
            self.status,
        )
        if np.any(self.status != _transport.STATUS_OK):
            raise RuntimeError("transportation simplex hit its pivot limit")
        return out

    def couplings(self):
        """Sparse entries ``(problem, state_a, state_b, mass)`` of the current optimal plans."""
        problems, states_a, states_b, masses = [], [], [], []
        for k in np.flatnonzero(self.size_a > 0):
            nb = self.size_a[k] + self.size_b[k] - 1
            problems.append(np.full(nb, k))
            states_a.append(self.sup_a[k, self.rows[k, :nb]])
            states_b.append(self.sup_b[k, self.cols[k, :nb]])
            masses.append(self.flows[k, :nb])
        if not problems:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty, np.zeros(0)
        return tuple(np.concatenate(x) for x in (problems, states_a, states_b, masses))


def _iteration_cap(reward_gap, c, tol):
    if reward_gap == 0 or c == 0:
        return 2 + _ITERATION_MARGIN
    ratio = tol * (1.0 - c) / reward_gap
    if ratio >= 1:
        return 2 + _ITERATION_MARGIN
    return math.ceil(math.log(ratio) / math.log(c)) + _ITERATION_MARGIN


def _fill_symmetric(n, iu, pair_values):
    d = np.zeros((n, n))
    d[iu] = pair_values
    d[(iu[1], iu[0])] = pair_values
    return d


def _fixed_point(n, iu, reward_gaps, sweeper, c, tol):
    """Iterate ``d <- max_a (1-c) gap_a + c W1_a(d)`` from zero until the sup-norm step <= tol.

    ``reward_gaps`` has shape (n_actions, n_pairs); the sweeper returns W1 in
    the same layout (flattened action-major).
    """
    n_actions, n_pairs = reward_gaps.shape
    cap = _iteration_cap(float(reward_gaps.max(initial=0.0)), c, tol)
    pairs = np.zeros(n_pairs)
    prev_delta = np.inf
    for it in range(1, cap + 1):
        if n_pairs == 0:
            return np.zeros((n, n)), it, 0.0
        w = sweeper(_fill_symmetric(n, iu, pairs)).reshape(n_actions, n_pairs)
        new_pairs = np.max((1.0 - c) * reward_gaps + c * w, axis=0)
        delta = float(np.max(np.abs(new_pairs - pairs)))
        # the operator is a c-contraction in sup norm
        if delta > c * prev_delta + 1e-10 * (1.0 + prev_delta):
            raise RuntimeError(
                f"contraction violated at iteration {it}: step {delta:.3e} > {c} * {prev_delta:.3e}"
            )
        pairs = new_pairs
        prev_delta = delta
        if delta <= tol:
            return _fill_symmetric(n, iu, pairs), it, delta
    raise ConvergenceError(f"bisimulation metric did not converge within {cap} iterations")


def bisim_metric_max(mdp, c, tol=DEFAULT_TOL):
    """Bisimulation metric maximising over actions, iterated from ``d = 0``."""
    check_mdp(mdp)
    c = check_unit_interval(c, "c")
    n = mdp.n_states
    iu = np.triu_indices(n, 1)
    gaps = np.abs(mdp.reward[iu[0], :] - mdp.reward[iu[1], :]).T
    dists_a = mdp.transition[:, iu[0], :].reshape(-1, n)
    dists_b = mdp.transition[:, iu[1], :].reshape(-1, n)
    dist, n_iter, delta = _fixed_point(n, iu, gaps, _PairwiseW1(dists_a, dists_b), c, tol)
    return PseudoMetric(dist, n_iter, delta)


def bisim_metric_onpolicy(mdp, policy, c, tol=DEFAULT_TOL, method="iterate"):
    """Bisimulation metric of the Markov chain induced by ``policy``.

    ``method="iterate"`` runs the fixed-point iteration from zero.
    ``method="coupling"`` alternates exact linear solves for fixed optimal
    couplings with re-solving the couplings; it reaches the same (unique)
    fixed point in a handful of rounds and is much faster for c near 1.
    """
    check_mdp(mdp)
    c = check_unit_interval(c, "c")
    r_pi, p_pi = policy_averaged(mdp, check_policy(mdp, policy))
    n = mdp.n_states
    iu = np.triu_indices(n, 1)
    gaps = np.abs(r_pi[iu[0]] - r_pi[iu[1]])[None, :]
    sweeper = _PairwiseW1(p_pi[iu[0]], p_pi[iu[1]])
    if method == "iterate":
        dist, n_iter, delta = _fixed_point(n, iu, gaps, sweeper, c, tol)
    elif method == "coupling":
        dist, n_iter, delta = _coupling_iteration(n, iu, gaps[0], sweeper, c, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    return PseudoMetric(dist, n_iter, delta)


def _coupling_iteration(n, iu, gaps, sweeper, c, tol, max_rounds=200):
    n_pairs = gaps.size
    if n_pairs == 0:
        return np.zeros((n, n)), 0, 0.0
    pair_id = np.full((n, n), -1, dtype=np.int64)
    pair_id[iu] = np.arange(n_pairs)
    pair_id[(iu[1], iu[0])] = np.arange(n_pairs)
    pairs = np.zeros(n_pairs)
    w = sweeper(_fill_symmetric(n, iu, pairs))
    for rounds in range(1, max_rounds + 1):
        problem, sa, sb, mass = sweeper.couplings()
        target = pair_id[sa, sb]
        off_diag = target >= 0
        coupling = scipy.sparse.csr_matrix(
            (mass[off_diag], (problem[off_diag], target[off_diag])), shape=(n_pairs, n_pairs)
        )
        system = scipy.sparse.identity(n_pairs, format="csc") - c * coupling.tocsc()
        pairs = np.maximum(scipy.sparse.linalg.spsolve(system, (1.0 - c) * gaps), 0.0)
        w = sweeper(_fill_symmetric(n, iu, pairs))
        residual = float(np.max(np.abs((1.0 - c) * gaps + c * w - pairs)))
        if residual <= tol:
            return _fill_symmetric(n, iu, pairs), rounds, residual
    raise ConvergenceError(f"coupling iteration did not converge within {max_rounds} rounds")


def pi_star_bisim_metric(mdp, c, tol=DEFAULT_TOL, initial_policy=None, max_rounds=100):
    """Alternate on-policy metric solves with greedy policy improvement.

    Starting from ``initial_policy`` (uniform by default), each round solves
    the metric of the current policy to convergence, then replaces the policy
    by the greedy policy of its value function. Stops when the policy no
    longer changes. Returns ``(metric, policy, rounds)`` where ``rounds`` is
    the list of per-round metrics.
    """
    from .mdp import policy_evaluation

    policy = initial_policy or DiscretePolicy.uniform(mdp.n_states, mdp.n_actions)
    rounds = []
    for _ in range(max_rounds):
        metric = bisim_metric_onpolicy(mdp, policy, c, tol, method="coupling")
        rounds.append(metric)
        improved = greedy_policy(mdp, policy_evaluation(mdp, policy, tol))
        if np.array_equal(improved.probs, policy.probs):
            return metric, policy, rounds
        policy = improved
    raise ConvergenceError(f"policy did not stabilise within {max_rounds} rounds")


# ----------------------------------------------------------------------------
# Exact bisimulation relation


def bisimulation_partition(mdp, tol=1e-12):
    """Coarsest bisimulation partition, by splitting blocks until stable.

    Blockmates must agree on ``R(., a)`` and on the mass sent into every block
    for every action, up to ``tol``. Within a block, states are scanned in
    index order and joined to the first sub-block whose founder matches.
    """
    check_mdp(mdp)
    n = mdp.n_states
    block = np.zeros(n, dtype=np.int64)
    n_blocks = 1
    while True:
        onehot = np.zeros((n, n_blocks))
        onehot[np.arange(n), block] = 1.0
        block_mass = np.einsum("ast,tb->sab", mdp.transition, onehot).reshape(n, -1)
        signature = np.hstack([mdp.reward, block_mass])
        new_block = np.full(n, -1, dtype=np.int64)
        founders = []
        for s in range(n):
            for b, f in founders:
                if block[f] == block[s] and np.max(np.abs(signature[s] - signature[f])) <= tol:
                    new_block[s] = b
                    break
            else:
                new_block[s] = len(founders)
                founders.append((len(founders), s))
        if len(founders) == n_blocks:
            return StatePartition(new_block)
        block, n_blocks = new_block, len(founders)


# ----------------------------------------------------------------------------
# Aggregation and bound certificates


def epsilon_aggregate(mdp, metric, epsilon, mode="average"):
    """Greedy epsilon-cover of the states, and the MDP over the resulting clusters.

    States are scanned in index order; each joins the first cluster whose
    representative lies within ``epsilon``, otherwise it founds a new cluster.
    With ``mode="average"`` cluster rewards and transitions are uniform
    averages over members; ``mode="representative"`` copies the founder's.
    """
    check_mdp(mdp)
    dist = metric.dist if isinstance(metric, PseudoMetric) else check_square_metric(metric, mdp.n_states)
    if dist.shape[0] != mdp.n_states:
        raise ValueError("metric and MDP sizes differ")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    cluster_of = np.full(mdp.n_states, -1, dtype=np.int64)
    reps = []
    for s in range(mdp.n_states):
        for k, r in enumerate(reps):
            if dist[s, r] <= epsilon:
                cluster_of[s] = k
                break
        else:
            cluster_of[s] = len(reps)
            reps.append(s)
    reps = np.array(reps, dtype=np.int64)
    n_clusters = reps.size
    membership = np.zeros((mdp.n_states, n_clusters))
    membership[np.arange(mdp.n_states), cluster_of] = 1.0
    # P(cluster' | s, a) for every original state
    to_cluster = mdp.transition @ membership
    if mode == "average":
        weights = membership / membership.sum(axis=0, keepdims=True)
    elif mode == "representative":
        weights = np.zeros_like(membership)
        weights[reps, np.arange(n_clusters)] = 1.0
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    reward = weights.T @ mdp.reward
    transition = np.einsum("sk,asj->akj", weights, to_cluster)
    transition /= transition.sum(axis=2, keepdims=True)
    return AggregatedMdp(cluster_of, reps, FiniteMdp(transition, reward, mdp.gamma))


def value_bound(epsilon, gamma, c, learning_error=0.0):
    return (2.0 * epsilon + 2.0 * learning_error) / ((1.0 - gamma) * (1.0 - c))


def check_value_bound(mdp, agg, epsilon, c, tol=1e-6, learning_error=0.0, vi_tol=1e-10):
    """Compare optimal values of an MDP and its aggregation against the epsilon bound."""
    check_mdp(mdp)
    if agg.cluster_of.shape != (mdp.n_states,) or agg.mdp.gamma != mdp.gamma:
        raise ValueError("aggregation was not built from this MDP")
    v = value_iteration(mdp, vi_tol)
    v_bar = value_iteration(agg.mdp, vi_tol)
    gap = float(np.max(np.abs(v - v_bar[agg.cluster_of])))
    bound = value_bound(epsilon, mdp.gamma, c, learning_error)
    return ValueBoundReport(gap, bound, gap <= bound + tol)


def check_lipschitz(mdp, metric, c, tol=1e-6, vi_tol=1e-10):
    """Check ``|V*(s) - V*(t)| <= d(s, t) / (1 - c)`` on every pair (requires c >= gamma)."""
    check_mdp(mdp)
    if c < mdp.gamma:
        raise ValueError(f"the Lipschitz certificate needs c >= gamma, got c={c} < gamma={mdp.gamma}")
    dist = metric.dist if isinstance(metric, PseudoMetric) else check_square_metric(metric, mdp.n_states)
    v = value_iteration(mdp, vi_tol)
    dv = np.abs(v[:, None] - v[None, :])
    allowed = dist / (1.0 - c)
    violation = float(np.max(dv - allowed))
    positive = dist > 0
    max_ratio = float(np.max(dv[positive] / allowed[positive])) if np.any(positive) else 0.0
    return LipschitzReport(max_ratio, violation, violation <= tol)


def learning_error(latents, metric, norm="l1", pairs=None):
    """Largest gap between latent distances and metric distances over state pairs.

    ``pairs`` optionally restricts the supremum to an index pair subset
    ``(rows, cols)``.
    """
    z = np.asarray(latents, dtype=np.float64)
    dist = metric.dist if isinstance(metric, PseudoMetric) else np.asarray(metric, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != dist.shape[0]:
        raise ValueError(f"{z.shape[0]} latents for a metric over {dist.shape[0]} states")
    latent = latent_distances(z, norm)
    gap = np.abs(latent - dist)
    if pairs is not None:
        return float(np.max(gap[pairs]))
    return float(np.max(gap))


def latent_distances(z, norm="l1"):
    diff = z[:, None, :] - z[None, :, :]
    if norm == "l1":
        return np.abs(diff).sum(axis=-1)
    if norm == "l2":
        return np.sqrt((diff**2).sum(axis=-1))
    raise ValueError(f"unknown norm {norm!r}")


# ----------------------------------------------------------------------------
# CSV exports


def write_metric_csv(metric, path):
    dist = metric.dist if isinstance(metric, PseudoMetric) else metric
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["i", "j", "d"])
        n = dist.shape[0]
        for i in range(n):
            for j in range(n):
                writer.writerow([i, j, repr(float(dist[i, j]))])


def read_metric_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = max(int(r["i"]) for r in rows) + 1
    dist = np.zeros((n, n))
    for r in rows:
        dist[int(r["i"]), int(r["j"])] = float(r["d"])
    return dist


def write_partition_csv(partition, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["state", "block"])
        for s, b in enumerate(partition.block_id):
            writer.writerow([s, int(b)])


# ----------------------------------------------------------------------------
# Estimator front-ends


class BisimulationMetric(BaseEstimator):
    """Estimator wrapper around the exact metric solvers.

    Parameters
    ----------
    c : float
        Weight of the transition term; rewards are weighted by ``1 - c``.
    policy : None, "optimal" or DiscretePolicy
        ``None`` maximises over actions; ``"optimal"`` uses the greedy policy
        of ``V*``; a policy table gives the on-policy metric.
    tol : float
        Sup-norm stopping tolerance.
    method : {"iterate", "coupling"}
        Solver for on-policy metrics.
    """

    def __init__(self, c=0.9, policy=None, tol=DEFAULT_TOL, method="iterate"):
        self.c = c
        self.policy = policy
        self.tol = tol
        self.method = method

    def fit(self, mdp, y=None):
        if self.policy is None:
            metric = bisim_metric_max(mdp, self.c, self.tol)
        else:
            policy = self.policy
            if isinstance(policy, str):
                if policy != "optimal":
                    raise ValueError(f"unknown policy {policy!r}")
                policy = greedy_policy(mdp, value_iteration(mdp, self.tol))
            metric = bisim_metric_onpolicy(mdp, policy, self.c, self.tol, self.method)
        self.metric_ = metric
        self.dist_ = metric.dist
        self.n_iter_ = metric.n_iter
        return self

    def transform(self, states):
        """Rows of the fitted distance matrix for the given state indices."""
        return self.dist_[np.asarray(states, dtype=np.int64)]


class BisimulationPartition(ClusterMixin, BaseEstimator):
    def __init__(self, tol=1e-12):
        self.tol = tol

    def fit(self, mdp, y=None):
        self.partition_ = bisimulation_partition(mdp, self.tol)
        self.labels_ = self.partition_.block_id
        return self


class EpsilonAggregation(ClusterMixin, BaseEstimator):
    """Greedy epsilon-cover clustering of MDP states under a fitted metric."""

    def __init__(self, epsilon=0.05, mode="average"):
        self.epsilon = epsilon
        self.mode = mode

    def fit(self, mdp, metric):
        self.aggregated_ = epsilon_aggregate(mdp, metric, self.epsilon, self.mode)
        self.labels_ = self.aggregated_.cluster_of
        self.representatives_ = self.aggregated_.representatives
        return self

    def fit_predict(self, mdp, metric):
        return self.fit(mdp, metric).labels_
