"""Evaluations of learned representations against exact metrics and across tasks."""

import math
import warnings

import numpy as np
from scipy import stats

from .bisim import bisim_metric_max, bisim_metric_onpolicy
from .envs import reward_variant, to_finite_mdp
from .mdp import DiscretePolicy


def _clean(x):
    x = float(x)
    return None if math.isnan(x) else x


def greedy_tabular_policy(agent, env):
    """Deterministic policy obtained by discretizing the agent's mean action in every state."""
    actions = agent.predict(env.all_observations())
    return DiscretePolicy.deterministic([env.discretize(np.clip(a, -1.0, 1.0)) for a in actions], env.n_actions)


def correlation_report(agent, env, c=None, tol=1e-8, include_max=False):
    """Compare learned pairwise distances with the exact on-policy metric.

    The metric is computed under the agent's greedy tabular policy with
    ``c`` (default: the env discount). ``learning_error`` is the largest
    absolute gap to the metric; ``learning_error_scaled`` compares against
    ``d / (1 - c)``, the scale at which a loss with unit reward weight settles.
    """
    gamma = agent.cfg_.gamma
    c = gamma if c is None else c
    mdp = to_finite_mdp(env, gamma)
    policy = greedy_tabular_policy(agent, env)
    metric = bisim_metric_onpolicy(mdp, policy, c, tol=tol, method="coupling").dist
    obs = env.all_observations()
    rows, cols = np.triu_indices(mdp.n_states, 1)
    learned = np.asarray(agent.policy_distance(obs[rows], obs[cols]), dtype=np.float64)
    target = metric[rows, cols]
    report = {
        "n_pairs": int(rows.size),
        "c": float(c),
        "pearson": _safe_corr(stats.pearsonr, learned, target),
        "spearman": _safe_corr(stats.spearmanr, learned, target),
        "learning_error": float(np.max(np.abs(learned - target))),
        "learning_error_scaled": float(np.max(np.abs(learned - target / (1.0 - c)))) if c < 1 else None,
        "policy": [int(a) for a in policy.actions],
    }
    if include_max:
        max_metric = bisim_metric_max(mdp, c, tol=tol).dist[rows, cols]
        report["pearson_max_metric"] = _safe_corr(stats.pearsonr, learned, max_metric)
        report["spearman_max_metric"] = _safe_corr(stats.spearmanr, learned, max_metric)
    return report


def _safe_corr(fn, a, b):
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return _clean(fn(a, b)[0])


def invariance_report(agent, env, n_pairs=2000, seed=0):
    """Mean latent l1 distance over distractor-only versus task-only observation pairs."""
    if getattr(env, "tabular", False):
        obs = env.all_observations()
        pairs = {kind: env.factor_pairs(kind) for kind in ("distractor", "task")}
        if any(rows.size == 0 for rows, _ in pairs.values()):
            raise ValueError("environment has no pairs differing in a single factor group")
        means = {
            kind: float(np.mean(np.sum(np.abs(agent.transform(obs[r]) - agent.transform(obs[c])), axis=1)))
            for kind, (r, c) in pairs.items()
        }
        counts = {kind: int(r.size) for kind, (r, _) in pairs.items()}
    elif hasattr(env, "sample_states"):
        rng = np.random.default_rng(seed)
        base = env.sample_states(rng, n_pairs)
        other = env.sample_states(rng, n_pairs)
        distractor_only = base.copy()
        distractor_only[:, 4:] = other[:, 4:]
        task_only = base.copy()
        task_only[:, :4] = other[:, :4]
        z = agent.transform(env.observe(base))
        means = {
            "distractor": float(np.mean(np.sum(np.abs(z - agent.transform(env.observe(distractor_only))), axis=1))),
            "task": float(np.mean(np.sum(np.abs(z - agent.transform(env.observe(task_only))), axis=1))),
        }
        counts = {"distractor": n_pairs, "task": n_pairs}
    else:
        raise ValueError(f"{type(env).__name__} exposes no factor structure")
    ratio = means["distractor"] / means["task"] if means["task"] > 0 else None
    return {
        "distractor_dist_mean": means["distractor"],
        "task_dist_mean": means["task"],
        "ratio": ratio,
        "n_distractor_pairs": counts["distractor"],
        "n_task_pairs": counts["task"],
    }


def random_policy_return(env, n_episodes, seed):
    """Mean return of uniformly random actions, the zero point for normalized scores."""
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(n_episodes):
        env.reset(seed=int(rng.integers(2**63)))
        total, done = 0.0, False
        while not done:
            _, reward, done = env.step(rng.uniform(-1.0, 1.0, size=env.action_dim))
            total += reward
        returns.append(total)
    return float(np.mean(returns))


def normalized_score(value, reference, baseline):
    """``(value - baseline) / (reference - baseline)``: 1 matches the reference, 0 matches the baseline."""
    span = reference - baseline
    if span <= 0:
        return None
    return float((value - baseline) / span)


def variant_env(env, variant):
    return env if variant == env.variant else reward_variant(env, variant)
