import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bisimkit.bisim import (
    BisimulationMetric,
    BisimulationPartition,
    EpsilonAggregation,
    PseudoMetric,
    bisim_metric_max,
    bisim_metric_onpolicy,
    bisimulation_partition,
    check_lipschitz,
    check_value_bound,
    epsilon_aggregate,
    learning_error,
    pi_star_bisim_metric,
    read_metric_csv,
    value_bound,
    write_metric_csv,
    write_partition_csv,
)
from bisimkit.mdp import DiscretePolicy, FiniteMdp, random_mdp, value_iteration
from bisimkit.ot import brute_force_w1
from bisimkit.validation import ConvergenceError
from helpers import (
    absorbing_pair,
    coarsest_bisimulation,
    lp_w1,
    plain_metric,
    same_partition,
    sparse_random_mdp,
    with_duplicate,
)


def _brute_w1(p, q, d):
    return brute_force_w1(p, q, d)


def _lp_w1(p, q, d):
    return lp_w1(p, q, d)


# -- partition ----------------------------------------------------------------


def test_duplicated_states_share_a_block():
    mdp = with_duplicate(random_mdp(4, 2, 0.9, 0), state=1)
    labels = bisimulation_partition(mdp).block_id
    assert labels[1] == labels[4]
    assert len(set(labels)) == 4


def test_distinct_rewards_give_singletons():
    mdp = FiniteMdp(random_mdp(4, 2, 0.9, 0).transition, [[0, 0], [1, 0], [2, 0], [3, 0]], 0.9)
    assert bisimulation_partition(mdp).n_blocks == 4


def test_partition_refinement_needs_block_masses():
    # s2 and s3 share rewards; s2 -> s0, s3 -> s1, with s0 ~ s1 only if both loop
    p = np.zeros((1, 4, 4))
    p[0, 0, 0] = p[0, 1, 1] = 1.0
    p[0, 2, 0] = 1.0
    p[0, 3, 1] = 1.0
    r = np.array([[1.0], [1.0], [0.0], [0.0]])
    mdp = FiniteMdp(p, r, 0.9)
    labels = bisimulation_partition(mdp).block_id
    assert same_partition(labels, coarsest_bisimulation(mdp))
    assert labels[2] == labels[3] and labels[0] == labels[1] and labels[0] != labels[2]


def test_partition_matches_exhaustive_search_on_small_mdps():
    rng = np.random.default_rng(0)
    for seed in range(40):
        n = int(rng.integers(2, 6))
        # coarse integer-valued tables make nontrivial bisimulations common
        p = np.zeros((2, n, n))
        for a in range(2):
            for s in range(n):
                p[a, s, rng.integers(n)] += 0.5
                p[a, s, rng.integers(n)] += 0.5
        r = rng.integers(0, 2, size=(n, 2)).astype(float)
        mdp = FiniteMdp(p, r, 0.9)
        assert same_partition(bisimulation_partition(mdp).block_id, coarsest_bisimulation(mdp)), seed


def test_partition_ids_are_contiguous_from_zero():
    labels = bisimulation_partition(with_duplicate(random_mdp(5, 2, 0.9, 3), 0)).block_id
    assert set(labels) == set(range(labels.max() + 1))


def test_blockmates_have_near_zero_metric_distance():
    mdp = with_duplicate(with_duplicate(random_mdp(4, 2, 0.9, 9), 0), 2)
    tol = 1e-9
    metric = bisim_metric_max(mdp, 0.9, tol)
    labels = bisimulation_partition(mdp).block_id
    same = labels[:, None] == labels[None, :]
    assert np.max(metric.dist[same]) <= tol / (1 - 0.9)


# -- metric solvers -----------------------------------------------------------


@pytest.mark.parametrize("c", [0.0, 0.5, 0.9, 0.99])
def test_absorbing_pair_closed_form(c):
    d = bisim_metric_max(absorbing_pair(), c, tol=1e-10).dist
    assert d[0, 1] == pytest.approx(1.0, abs=1e-6)


def test_duplicates_have_zero_distance():
    mdp = with_duplicate(random_mdp(5, 3, 0.9, 1), 2)
    assert bisim_metric_max(mdp, 0.9).dist[2, 5] == pytest.approx(0.0, abs=1e-9)


def test_max_metric_matches_brute_force_fixed_point_loop():
    mdp = sparse_random_mdp(6, 2, 0.9, seed=17, support=4)
    oracle = plain_metric(mdp, 0.9, _brute_w1, tol=1e-10)
    got = bisim_metric_max(mdp, 0.9, tol=1e-10).dist
    assert np.max(np.abs(got - oracle)) <= 1e-6


def test_max_metric_matches_linear_program_fixed_point_loop_on_dense_rows():
    mdp = random_mdp(5, 2, 0.8, seed=23)
    oracle = plain_metric(mdp, 0.8, _lp_w1, tol=1e-10)
    got = bisim_metric_max(mdp, 0.8, tol=1e-10).dist
    assert np.max(np.abs(got - oracle)) <= 1e-6


def test_onpolicy_with_one_action_equals_max_metric():
    mdp = random_mdp(7, 1, 0.9, seed=2)
    a = bisim_metric_max(mdp, 0.9).dist
    b = bisim_metric_onpolicy(mdp, DiscretePolicy.uniform(7, 1), 0.9).dist
    assert np.array_equal(a, b)


@pytest.mark.parametrize("method", ["iterate", "coupling"])
def test_onpolicy_absorbing_pair(method):
    mdp = absorbing_pair(r0=0.75, r1=0.25, n_actions=2)
    policy = DiscretePolicy([[0.3, 0.7], [1.0, 0.0]])
    assert bisim_metric_onpolicy(mdp, policy, 0.9, method=method).dist[0, 1] == pytest.approx(0.5, abs=1e-6)


def test_mirror_states_of_symmetric_two_arm_mdp():
    # start state 0; arms 1 and 2 mirror each other under action swap
    p = np.zeros((2, 5, 5))
    p[0, 0, 1] = p[1, 0, 2] = 1.0
    p[0, 1, 3] = p[1, 1, 4] = 1.0
    p[0, 2, 4] = p[1, 2, 3] = 1.0
    p[:, 3, 3] = p[:, 4, 4] = 1.0
    r = np.array([[0, 0], [0.5, 0.2], [0.2, 0.5], [1, 1], [0, 0]], dtype=float)
    mdp = FiniteMdp(p, r, 0.9)
    uniform = np.full((5, 2), 0.5)
    got = bisim_metric_onpolicy(mdp, DiscretePolicy(uniform), 0.9).dist
    oracle = plain_metric(mdp, 0.9, _brute_w1, policy_probs=uniform, tol=1e-12)
    assert got[1, 2] == pytest.approx(0.0, abs=1e-9)
    assert np.max(np.abs(got - oracle)) <= 1e-6


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_coupling_solver_agrees_with_iteration(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(int(rng.integers(2, 9)), 2, 0.9, seed)
    policy = DiscretePolicy(rng.dirichlet(np.ones(2), size=mdp.n_states))
    a = bisim_metric_onpolicy(mdp, policy, 0.95, tol=1e-10, method="iterate").dist
    b = bisim_metric_onpolicy(mdp, policy, 0.95, tol=1e-10, method="coupling").dist
    assert np.max(np.abs(a - b)) <= 1e-7


def test_iterates_increase_monotonically_from_zero():
    # a looser tol stops earlier on the same iterate sequence
    mdp = random_mdp(6, 2, 0.9, seed=31)
    prev = np.zeros((6, 6))
    for k in range(1, 40):
        d = bisim_metric_max(mdp, 0.9, 0.5**k).dist
        assert np.all(d >= prev - 1e-12)
        prev = d
    assert bisim_metric_max(mdp, 0.9, 1e-10).last_delta <= 1e-10


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_converged_metric_is_a_pseudometric(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(int(rng.integers(1, 10)), int(rng.integers(1, 4)), 0.9, seed)
    metric = bisim_metric_max(mdp, float(rng.uniform(0, 0.95)))
    d = metric.dist
    assert np.all(np.diag(d) == 0)
    assert np.all(d >= 0)
    assert np.max(np.abs(d - d.T)) <= 1e-12
    assert metric.triangle_violation() <= 1e-7


def test_iteration_cap_raises_convergence_error(monkeypatch):
    from bisimkit import bisim

    monkeypatch.setattr(bisim, "_ITERATION_MARGIN", -10**6)
    with pytest.raises(ConvergenceError):
        bisim_metric_max(random_mdp(4, 2, 0.9, 0), 0.9)


def test_invalid_c_is_rejected():
    with pytest.raises(ValueError):
        bisim_metric_max(absorbing_pair(), 1.0)


def test_pi_star_metric_reaches_greedy_fixed_point():
    mdp = random_mdp(6, 3, 0.9, seed=8)
    metric, policy, rounds = pi_star_bisim_metric(mdp, 0.9)
    v = value_iteration(mdp, 1e-10)
    assert np.array_equal(policy.actions, np.argmax(mdp.q_values(v), axis=1))
    assert len(rounds) >= 1
    assert np.array_equal(metric.dist, rounds[-1].dist)


# -- aggregation and certificates --------------------------------------------


def test_large_epsilon_gives_one_cluster():
    mdp = random_mdp(6, 2, 0.9, 0)
    metric = bisim_metric_max(mdp, 0.9)
    assert epsilon_aggregate(mdp, metric, metric.dist.max()).n_clusters == 1


def test_zero_epsilon_positive_metric_gives_singletons():
    mdp = random_mdp(6, 2, 0.9, 0)
    metric = bisim_metric_max(mdp, 0.9)
    assert epsilon_aggregate(mdp, metric, 0.0).n_clusters == 6


def test_duplicates_merge_for_any_positive_epsilon():
    mdp = with_duplicate(random_mdp(5, 2, 0.9, 4), 3)
    metric = bisim_metric_max(mdp, 0.9)
    agg = epsilon_aggregate(mdp, metric, 1e-6)
    assert agg.cluster_of[3] == agg.cluster_of[5]


def test_aggregated_mdp_is_valid_and_clusters_have_bounded_diameter():
    mdp = random_mdp(12, 3, 0.9, 5)
    metric = bisim_metric_max(mdp, 0.9)
    eps = float(np.median(metric.dist))
    for mode in ("average", "representative"):
        agg = epsilon_aggregate(mdp, metric, eps, mode=mode)
        assert set(agg.cluster_of) == set(range(agg.n_clusters))
        assert np.allclose(agg.mdp.transition.sum(axis=2), 1.0)
        for k in range(agg.n_clusters):
            members = np.flatnonzero(agg.cluster_of == k)
            assert metric.dist[np.ix_(members, members)].max() <= 2 * eps + 1e-12


def test_value_bound_arithmetic():
    assert value_bound(0.05, 0.9, 0.9) == pytest.approx(10.0)


def test_exact_aggregation_of_duplicates_has_zero_gap():
    mdp = with_duplicate(random_mdp(5, 2, 0.9, 6), 1)
    metric = bisim_metric_max(mdp, 0.9)
    agg = epsilon_aggregate(mdp, metric, 0.0)
    report = check_value_bound(mdp, agg, 0.0, 0.9)
    assert report.max_gap == pytest.approx(0.0, abs=1e-8)
    assert report.holds


def test_mismatched_aggregation_is_rejected():
    mdp = random_mdp(5, 2, 0.9, 6)
    agg = epsilon_aggregate(mdp, bisim_metric_max(mdp, 0.9), 0.1)
    with pytest.raises(ValueError, match="not built"):
        check_value_bound(random_mdp(6, 2, 0.9, 6), agg, 0.1, 0.9)


def test_lipschitz_equality_case_on_absorbing_pair():
    mdp = absorbing_pair(gamma=0.9)
    report = check_lipschitz(mdp, bisim_metric_max(mdp, 0.9, 1e-12), 0.9)
    assert report.holds
    assert report.max_ratio == pytest.approx(1.0, abs=1e-8)


def test_lipschitz_duplicates_both_sides_zero():
    mdp = with_duplicate(absorbing_pair(gamma=0.5), 0)
    report = check_lipschitz(mdp, bisim_metric_max(mdp, 0.5), 0.5)
    assert report.holds


def test_lipschitz_requires_c_at_least_gamma():
    mdp = absorbing_pair(gamma=0.9)
    with pytest.raises(ValueError, match="c >= gamma"):
        check_lipschitz(mdp, bisim_metric_max(mdp, 0.5), 0.5)


# -- learning error ------------------------------------------------------------


def test_learning_error_zero_for_isometric_line():
    pos = np.array([0.0, 0.3, 1.1, 2.0])
    assert learning_error(pos, np.abs(pos[:, None] - pos[None])) == 0.0


def test_learning_error_constant_latents_is_metric_diameter():
    mdp = random_mdp(5, 2, 0.9, 3)
    metric = bisim_metric_max(mdp, 0.9)
    assert learning_error(np.ones((5, 3)), metric) == pytest.approx(metric.dist.max())


def test_learning_error_on_subset_is_at_most_full():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 2))
    d = bisim_metric_max(random_mdp(6, 2, 0.9, 0), 0.9)
    pairs = (np.array([0, 1, 2]), np.array([3, 4, 5]))
    assert learning_error(z, d, pairs=pairs) <= learning_error(z, d)
    assert learning_error(z, d, norm="l2") >= 0


def test_learning_error_count_mismatch():
    with pytest.raises(ValueError, match="latents"):
        learning_error(np.zeros((3, 2)), np.zeros((4, 4)))


def test_learning_error_extended_bound_with_perturbed_metric():
    rng = np.random.default_rng(5)
    c = gamma = 0.9
    for seed in range(20):
        mdp = random_mdp(10, 3, gamma, seed)
        metric = bisim_metric_max(mdp, c)
        noise = rng.uniform(-1, 1, size=metric.dist.shape) * 0.02
        noisy = np.clip(metric.dist + (noise + noise.T) / 2, 0, None)
        np.fill_diagonal(noisy, 0.0)
        err = float(np.max(np.abs(noisy - metric.dist)))
        for eps in (0.01, 0.05, 0.1):
            agg = epsilon_aggregate(mdp, noisy, eps)
            assert check_value_bound(mdp, agg, eps, c, learning_error=err).holds


# -- exports and estimators -----------------------------------------------------


def test_metric_csv_round_trip(tmp_path):
    metric = bisim_metric_max(random_mdp(4, 2, 0.9, 0), 0.9)
    write_metric_csv(metric, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "i,j,d"
    assert np.array_equal(read_metric_csv(tmp_path / "m.csv"), metric.dist)


def test_partition_csv_header(tmp_path):
    write_partition_csv(bisimulation_partition(absorbing_pair()), tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text() == "state,block\n0,0\n1,1\n"


def test_pseudometric_validation():
    with pytest.raises(ValueError, match="diagonal"):
        PseudoMetric(np.ones((2, 2)))
    with pytest.raises(ValueError, match="symmetric"):
        PseudoMetric(np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_estimator_front_ends():
    mdp = with_duplicate(random_mdp(5, 2, 0.9, 1), 0)
    est = BisimulationMetric(c=0.9).fit(mdp)
    assert est.transform([0])[0, 5] == pytest.approx(0.0, abs=1e-9)
    onpol = BisimulationMetric(c=0.9, policy="optimal", method="coupling").fit(mdp)
    assert np.all(onpol.dist_ <= est.dist_ + 1e-7)
    labels = BisimulationPartition().fit(mdp).labels_
    assert labels[0] == labels[5]
    clusters = EpsilonAggregation(epsilon=0.0).fit_predict(mdp, est.metric_)
    assert clusters[0] == clusters[5]
    assert BisimulationMetric(c=0.5).get_params()["c"] == 0.5
