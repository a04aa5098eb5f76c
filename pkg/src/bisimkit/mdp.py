"""Tabular MDPs and exact dynamic-programming solvers."""

import json
from dataclasses import dataclass, field

import numpy as np

from .validation import check_positive, check_probability_rows, check_unit_interval

DEFAULT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Finite MDP with rewards ``R(s, a)``.

    ``transition`` is indexed ``(action, state, next_state)`` and ``reward``
    is indexed ``(state, action)``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float = field(init=False)

    def __post_init__(self):
        transition = np.array(self.transition, dtype=np.float64)
        reward = np.array(self.reward, dtype=np.float64)
        if transition.ndim != 3 or transition.shape[1] != transition.shape[2]:
            raise ValueError(
                f"transition must have shape (n_actions, n_states, n_states), got {transition.shape}"
            )
        n_actions, n_states = transition.shape[:2]
        if n_states < 1 or n_actions < 1:
            raise ValueError("an MDP needs at least one state and one action")
        if reward.shape != (n_states, n_actions):
            raise ValueError(f"reward must have shape {(n_states, n_actions)}, got {reward.shape}")
        check_probability_rows(transition, "transition")
        if not np.all(np.isfinite(reward)):
            idx = [int(i) for i in np.argwhere(~np.isfinite(reward))[0]]
            raise ValueError(f"reward{idx} is not finite")
        gamma = check_unit_interval(self.gamma, "gamma")
        transition.setflags(write=False)
        reward.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "r_max", float(np.abs(reward).max()))

    @property
    def n_states(self):
        return self.transition.shape[1]

    @property
    def n_actions(self):
        return self.transition.shape[0]

    def with_gamma(self, gamma):
        return FiniteMdp(self.transition, self.reward, gamma)

    def q_values(self, v):
        """One-step lookahead ``Q(s, a) = R(s, a) + gamma * sum_s' P(s'|s,a) V(s')``."""
        return self.reward + self.gamma * (self.transition @ v).T

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        for key in ("n_states", "n_actions", "gamma", "transition", "reward"):
            if key not in data:
                raise ValueError(f"MDP description is missing key {key!r}")
        mdp = cls(data["transition"], data["reward"], data["gamma"])
        if (mdp.n_states, mdp.n_actions) != (data["n_states"], data["n_actions"]):
            raise ValueError(
                f"declared sizes ({data['n_states']}, {data['n_actions']}) do not match "
                f"tensors ({mdp.n_states}, {mdp.n_actions})"
            )
        return mdp


@dataclass(frozen=True, eq=False)
class DiscretePolicy:
    """Stochastic policy table indexed ``(state, action)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {probs.shape}")
        check_probability_rows(probs, "policy")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def actions(self):
        """Most likely action per state (exact for deterministic policies)."""
        return np.argmax(self.probs, axis=1)


def load_mdp(path):
    with open(path) as fh:
        return FiniteMdp.from_dict(json.load(fh))


def save_mdp(mdp, path):
    with open(path, "w") as fh:
        json.dump(mdp.to_dict(), fh)


def check_mdp(mdp):
    if not isinstance(mdp, FiniteMdp):
        raise TypeError(f"expected a FiniteMdp, got {type(mdp).__name__}")
    return mdp


def check_policy(mdp, policy):
    if not isinstance(policy, DiscretePolicy):
        policy = DiscretePolicy(policy)
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )
    return policy


def policy_averaged(mdp, policy):
    """Reward vector and transition matrix of the Markov chain induced by ``policy``."""
    policy = check_policy(mdp, policy)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    p_pi = np.einsum("sa,ast->st", policy.probs, mdp.transition)
    return r_pi, p_pi


def _stop_threshold(gamma, tol):
    # sup-norm step size that certifies ||V - V_true|| <= tol
    return np.inf if gamma == 0 else tol * (1.0 - gamma) / gamma


def value_iteration(mdp, tol=DEFAULT_TOL):
    """Optimal state values by Bellman optimality iteration from ``V = 0``.

    Stops once successive iterates differ by at most ``tol * (1 - gamma) / gamma``
    in sup norm, which bounds the distance to ``V*`` by ``tol``.
    """
    check_mdp(mdp)
    check_positive(tol, "tol")
    threshold = _stop_threshold(mdp.gamma, tol)
    v = np.zeros(mdp.n_states)
    while True:
        v_new = mdp.q_values(v).max(axis=1)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= threshold:
            return v


def policy_evaluation(mdp, policy, tol=DEFAULT_TOL):
    check_mdp(mdp)
    check_positive(tol, "tol")
    r_pi, p_pi = policy_averaged(mdp, policy)
    threshold = _stop_threshold(mdp.gamma, tol)
    v = np.zeros(mdp.n_states)
    while True:
        v_new = r_pi + mdp.gamma * (p_pi @ v)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= threshold:
            return v


def greedy_policy(mdp, v):
    """Deterministic greedy policy w.r.t. ``v``; ties go to the lowest action index."""
    check_mdp(mdp)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"value vector must have shape ({mdp.n_states},), got {v.shape}")
    # np.argmax returns the first maximiser
    return DiscretePolicy.deterministic(np.argmax(mdp.q_values(v), axis=1), mdp.n_actions)


def bellman_residual(mdp, v, policy=None):
    if policy is None:
        target = mdp.q_values(v).max(axis=1)
    else:
        r_pi, p_pi = policy_averaged(mdp, policy)
        target = r_pi + mdp.gamma * (p_pi @ v)
    return float(np.max(np.abs(v - target)))


def random_mdp(n_states, n_actions, gamma, seed):
    """Random MDP with Dirichlet(1) transition rows and U[0, 1] rewards."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return FiniteMdp(transition, reward, gamma)
