"""Shared builders and independent oracles for the test suite."""

import numpy as np

from bisimkit.mdp import FiniteMdp


def absorbing_pair(r0=1.0, r1=0.0, gamma=0.9, n_actions=1):
    """Two self-looping states with constant rewards."""
    transition = np.tile(np.eye(2), (n_actions, 1, 1))
    reward = np.repeat([[r0], [r1]], n_actions, axis=1)
    return FiniteMdp(transition, reward, gamma)


def with_duplicate(mdp, state):
    """Append a behavioural copy of ``state``; mass into ``state`` is split with the copy."""
    n, a = mdp.n_states, mdp.n_actions
    p = np.zeros((a, n + 1, n + 1))
    p[:, :n, :n] = mdp.transition
    p[:, n, :n] = mdp.transition[:, state, :]
    # half of all mass entering `state` goes to the copy instead
    p[:, :, n] = 0.5 * p[:, :, state]
    p[:, :, state] *= 0.5
    r = np.vstack([mdp.reward, mdp.reward[state]])
    return FiniteMdp(p, r, mdp.gamma)


def linear_values(mdp, policy_probs):
    """``(I - gamma P_pi)^-1 R_pi`` by a dense solve."""
    probs = np.asarray(policy_probs, dtype=float)
    r_pi = (probs * mdp.reward).sum(axis=1)
    p_pi = np.einsum("sa,ast->st", probs, mdp.transition)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def lp_w1(p, q, cost):
    """W1 as a dense linear program (HiGHS)."""
    from scipy.optimize import linprog

    m, n = len(p), len(q)
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    res = linprog(np.ravel(cost), A_eq=a_eq, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    assert res.status == 0
    return float(res.fun)


def plain_metric(mdp, c, w1, policy_probs=None, tol=1e-11, max_iter=100_000):
    """Textbook fixed-point loop over all ordered pairs, with a pluggable W1 routine."""
    n = mdp.n_states
    d = np.zeros((n, n))
    if policy_probs is not None:
        probs = np.asarray(policy_probs, dtype=float)
        rewards = [(probs * mdp.reward).sum(axis=1)]
        transitions = [np.einsum("sa,ast->st", probs, mdp.transition)]
    else:
        rewards = [mdp.reward[:, a] for a in range(mdp.n_actions)]
        transitions = [mdp.transition[a] for a in range(mdp.n_actions)]
    for _ in range(max_iter):
        new = np.zeros_like(d)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                new[i, j] = max(
                    (1 - c) * abs(r[i] - r[j]) + c * w1(p[i], p[j], d) for r, p in zip(rewards, transitions)
                )
        step = np.max(np.abs(new - d))
        d = new
        if step <= tol:
            return d
    raise AssertionError("oracle did not converge")


def set_partitions(items):
    """Every set partition of ``items`` (lists of blocks)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first, *part[k]]] + part[k + 1 :]
        yield [[first], *part]


def coarsest_bisimulation(mdp, tol=1e-12):
    """Coarsest bisimulation by exhaustive search over all set partitions (tiny MDPs only)."""
    n = mdp.n_states
    best = None
    for part in set_partitions(list(range(n))):
        if best is not None and len(part) >= len(best):
            continue
        ok = True
        for block in part:
            for s in block[1:]:
                t = block[0]
                if np.max(np.abs(mdp.reward[s] - mdp.reward[t])) > tol:
                    ok = False
                for target in part:
                    mass = mdp.transition[:, [s, t]][:, :, target].sum(axis=2)
                    if np.max(np.abs(mass[:, 0] - mass[:, 1])) > tol:
                        ok = False
        if ok:
            best = part
    labels = np.empty(n, dtype=int)
    for k, block in enumerate(best):
        labels[block] = k
    return labels


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(a.size) for j in range(a.size))


def scalar_adam(grad_fn, x0, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam on one scalar with plain Python floats."""
    x, m, v = float(x0), 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x -= lr * m_hat / (v_hat**0.5 + eps)
        path.append(x)
    return path


def sparse_random_mdp(n_states, n_actions, gamma, seed, support=3):
    """Random MDP whose transition rows have at most ``support`` nonzeros."""
    rng = np.random.default_rng(seed)
    p = np.zeros((n_actions, n_states, n_states))
    for a in range(n_actions):
        for s in range(n_states):
            cols = rng.choice(n_states, size=min(support, n_states), replace=False)
            p[a, s, cols] = rng.dirichlet(np.ones(cols.size))
    return FiniteMdp(p, rng.uniform(0, 1, size=(n_states, n_actions)), gamma)


def relu_margin(net, x):
    """Smallest |pre-activation| over the hidden relu units for input ``x``.

    Central differences are meaningless when a perturbation flips a relu,
    so gradient checks only use inputs whose margin is comfortably large.
    """
    _, (_, _, pre, _) = net.forward(x)
    return min((float(np.min(np.abs(a))) for a in pre[:-1]), default=np.inf)


def smooth_seeds(build, count=20, margin=1e-3, limit=500):
    """First ``count`` seeds whose ``build(seed)`` reports a kink margin above ``margin``."""
    seeds = []
    for seed in range(limit):
        if build(seed) > margin:
            seeds.append(seed)
            if len(seeds) == count:
                return seeds
    raise AssertionError("too few smooth seeds")
