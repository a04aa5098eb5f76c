"""Small environments with controllable task-irrelevant factors.

* :class:`TabularDistractorGrid` - grid navigation paired with an independent
  Markov chain that only affects the observation.
* :class:`ContinuousPointMass` - 2-D point mass whose observation linearly
  mixes the physical state with mean-reverting noise dimensions.
* :class:`FactoredCausalMdp` - three discrete factors with ``s2 -> s1 -> R``
  and an isolated ``s3``.

All environments share ``reset(seed) -> obs`` and
``step(action) -> (obs, reward, done)``. ``done`` is raised at the episode
cap; ``last_terminal`` tells a true termination from a timeout (none of the
environments here terminate on their own).
"""

import copy
import warnings

import numpy as np

from .mdp import FiniteMdp, load_mdp


class Env:
    family = "env"
    tabular = False
    #: reward variant -> factors the reward depends on, directly or through dynamics
    variants = {}
    task_factors = ()
    distractor_factors = ()

    def __init__(self, episode_cap, variant):
        if episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")
        if variant not in self.variants:
            raise ValueError(f"unknown reward variant {variant!r} for {self.family}; known: {sorted(self.variants)}")
        self.episode_cap = int(episode_cap)
        self.variant = variant
        self.base_variant = variant
        self.t = 0
        self.last_terminal = False
        self._streams = None

    @property
    def ancestors(self):
        return self.variants[self.variant]

    def _spawn(self, seed, n):
        self._streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]

    def _tick(self):
        self.t += 1
        self.last_terminal = False
        return self.t >= self.episode_cap

    def _require_reset(self):
        if self._streams is None:
            raise RuntimeError("call reset() before step()")


def reward_variant(env, variant_id):
    """Copy of ``env`` with the reward replaced by a registered variant.

    Warns when the variant depends on factors outside the original reward's
    causal ancestors, since encoders trained on the original reward need not
    represent them.
    """
    if variant_id not in env.variants:
        raise ValueError(f"unknown reward variant {variant_id!r}; known: {sorted(env.variants)}")
    new = copy.deepcopy(env)
    new.variant = variant_id
    extra = set(env.variants[variant_id]) - set(env.variants[env.base_variant])
    if extra:
        warnings.warn(
            f"reward variant {variant_id!r} depends on {sorted(extra)}, which are not causal "
            f"ancestors of the original reward {env.base_variant!r}; transfer is not expected to work",
            stacklevel=2,
        )
    return new


def intervene(env, factor, value):
    """Set one factor of the current state in place, leaving the others untouched."""
    env.set_factor(factor, value)
    return env


# ----------------------------------------------------------------------------
# Tabular environments


class TabularEnv(Env):
    """Finite environment with one-hot style observations.

    Continuous actions of length ``n_actions`` are mapped to the argmax index
    (ties to the lowest index), so the same environment serves both tabular
    solvers and continuous-action agents.
    """

    tabular = True

    @property
    def action_dim(self):
        return self.n_actions

    def discretize(self, action):
        if np.ndim(action) == 0:
            idx = int(action)
            if idx != action or not 0 <= idx < self.n_actions:
                raise ValueError(f"action index {action!r} outside 0..{self.n_actions - 1}")
            return idx
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.n_actions,):
            raise ValueError(f"continuous action must have shape ({self.n_actions},), got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0 + 1e-9):
            raise ValueError(f"continuous action {a} outside [-1, 1]")
        return int(np.argmax(a))

    def all_observations(self):
        return np.stack([self.observation_of(s) for s in range(self.n_states)])

    def factor_pairs(self, kind):
        """State-index pairs ``(i, j)``, ``i < j``, differing only in distractor or only in task factors."""
        factors = np.array([self.factors_of(s) for s in range(self.n_states)])
        names = self.factor_names
        distractor = [names.index(f) for f in self.distractor_factors]
        task = [names.index(f) for f in self.task_factors]
        changed, fixed = (distractor, task) if kind == "distractor" else (task, distractor)
        if kind not in ("distractor", "task"):
            raise ValueError(f"kind must be 'distractor' or 'task', got {kind!r}")
        rows, cols = [], []
        for i in range(self.n_states):
            for j in range(i + 1, self.n_states):
                fi, fj = factors[i], factors[j]
                if np.array_equal(fi[fixed], fj[fixed]) and not np.array_equal(fi[changed], fj[changed]):
                    rows.append(i)
                    cols.append(j)
        return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


class TabularDistractorGrid(TabularEnv):
    """Grid navigation with an independent distractor chain.

    Moves are 0 up, 1 down, 2 left, 3 right; bumping into a wall leaves the
    agent in place. Reward is 1 when the move ends on the goal cell (default:
    bottom-right corner), so an agent at the goal collects reward by pushing
    into a wall. The distractor evolves by a random Dirichlet(1) chain that
    ignores the agent. Observation: one-hot(cell) followed by one-hot(chain
    state); state index ``cell * n_distractor + chain_state``.
    """

    family = "grid"
    variants = {"reach_goal": ("agent",), "distractor_reward": ("distractor",)}
    task_factors = ("agent",)
    distractor_factors = ("distractor",)
    factor_names = ("agent", "distractor")
    n_actions = 4
    _MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, size=4, n_distractor=5, goal=None, episode_cap=50, chain_seed=0, variant="reach_goal"):
        super().__init__(episode_cap, variant)
        if size < 1 or n_distractor < 1:
            raise ValueError("size and n_distractor must be >= 1")
        self.size = int(size)
        self.n_distractor = int(n_distractor)
        self.n_cells = self.size**2
        self.goal = self.n_cells - 1 if goal is None else int(goal)
        if not 0 <= self.goal < self.n_cells:
            raise ValueError(f"goal cell {goal} outside the grid")
        self.chain_seed = chain_seed
        self.chain = np.random.default_rng(chain_seed).dirichlet(np.ones(self.n_distractor), size=self.n_distractor)
        self.n_states = self.n_cells * self.n_distractor
        self.obs_dim = self.n_cells + self.n_distractor
        self.cell = 0
        self.distractor = 0

    def move(self, cell, action):
        row, col = divmod(cell, self.size)
        dr, dc = self._MOVES[action]
        row = min(max(row + dr, 0), self.size - 1)
        col = min(max(col + dc, 0), self.size - 1)
        return row * self.size + col

    def grid_transition(self):
        p = np.zeros((self.n_actions, self.n_cells, self.n_cells))
        for a in range(self.n_actions):
            for cell in range(self.n_cells):
                p[a, cell, self.move(cell, a)] = 1.0
        return p

    def state_index(self, cell, distractor):
        return cell * self.n_distractor + distractor

    def factors_of(self, state):
        return divmod(int(state), self.n_distractor)

    def observation_of(self, state):
        cell, d = self.factors_of(state)
        obs = np.zeros(self.obs_dim)
        obs[cell] = 1.0
        obs[self.n_cells + d] = 1.0
        return obs

    @property
    def state(self):
        return self.state_index(self.cell, self.distractor)

    def _reward(self, cell, distractor):
        if self.variant == "reach_goal":
            return float(cell == self.goal)
        return float(distractor == 0)

    def reset(self, seed=None):
        self._spawn(seed, 2)
        self.t = 0
        self.last_terminal = False
        self.cell = int(self._streams[0].integers(self.n_cells))
        self.distractor = int(self._streams[1].integers(self.n_distractor))
        return self.observation_of(self.state)

    def step(self, action):
        self._require_reset()
        a = self.discretize(action)
        self.cell = self.move(self.cell, a)
        self.distractor = int(self._streams[1].choice(self.n_distractor, p=self.chain[self.distractor]))
        reward = self._reward(self.cell, self.distractor)
        return self.observation_of(self.state), reward, self._tick()

    def set_factor(self, factor, value):
        if factor == "agent":
            if not 0 <= value < self.n_cells:
                raise ValueError(f"cell {value} outside the grid")
            self.cell = int(value)
        elif factor == "distractor":
            if not 0 <= value < self.n_distractor:
                raise ValueError(f"distractor state {value} outside 0..{self.n_distractor - 1}")
            self.distractor = int(value)
        else:
            raise ValueError(f"unknown factor {factor!r}")

    def to_finite_mdp(self, gamma=0.99):
        grid = self.grid_transition()
        transition = np.einsum("agh,de->agdhe", grid, self.chain).reshape(
            self.n_actions, self.n_states, self.n_states
        )
        next_reward = np.array([self._reward(*self.factors_of(s)) for s in range(self.n_states)])
        # reward on arrival, taken in expectation over the next state
        reward = (transition @ next_reward).T
        return FiniteMdp(transition, reward, gamma)

    def with_distractor_seed(self, chain_seed):
        new = copy.deepcopy(self)
        new.chain_seed = chain_seed
        new.chain = np.random.default_rng(chain_seed).dirichlet(np.ones(self.n_distractor), size=self.n_distractor)
        return new


class FactoredCausalMdp(TabularEnv):
    """Three-factor MDP with causal graph ``s2 -> s1 -> R`` and an isolated ``s3``.

    ``s1'`` depends on ``(s1, s2, a)``, ``s2'`` on ``s2`` and ``s3'`` on
    ``s3``; the base reward is a function of ``s1`` alone. Each factor draws
    from its own random stream, so interventions on one factor never shift
    the random numbers seen by another.
    """

    family = "factored"
    variants = {"s1_reward": ("s1", "s2"), "s2_reward": ("s2",), "s3_reward": ("s3",)}
    task_factors = ("s1", "s2")
    distractor_factors = ("s3",)
    factor_names = ("s1", "s2", "s3")

    def __init__(self, sizes=(3, 2, 3), n_actions=2, seed=0, episode_cap=50, variant="s1_reward"):
        super().__init__(episode_cap, variant)
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) != 3 or min(self.sizes) < 1:
            raise ValueError(f"sizes must be three positive integers, got {sizes}")
        self.n_actions = int(n_actions)
        self.seed = seed
        n1, n2, n3 = self.sizes
        rng = np.random.default_rng(seed)
        self.p1 = rng.dirichlet(np.ones(n1), size=(self.n_actions, n1, n2))
        self.p2 = rng.dirichlet(np.ones(n2), size=n2)
        self.p3 = rng.dirichlet(np.ones(n3), size=n3)
        self.rewards = {name: rng.uniform(0.0, 1.0, size=n) for name, n in zip(self.factor_names, self.sizes)}
        self.n_states = n1 * n2 * n3
        self.obs_dim = n1 + n2 + n3
        self.values = [0, 0, 0]

    def state_index(self, s1, s2, s3):
        _, n2, n3 = self.sizes
        return (s1 * n2 + s2) * n3 + s3

    def factors_of(self, state):
        _, n2, n3 = self.sizes
        rest, s3 = divmod(int(state), n3)
        s1, s2 = divmod(rest, n2)
        return s1, s2, s3

    def observation_of(self, state):
        obs = np.zeros(self.obs_dim)
        offset = 0
        for v, n in zip(self.factors_of(state), self.sizes):
            obs[offset + v] = 1.0
            offset += n
        return obs

    @property
    def state(self):
        return self.state_index(*self.values)

    def _reward_of(self, factors):
        name = self.variant[:2]
        return float(self.rewards[name][factors[self.factor_names.index(name)]])

    def reset(self, seed=None):
        self._spawn(seed, 4)
        self.t = 0
        self.last_terminal = False
        init = self._streams[3]
        self.values = [int(init.integers(n)) for n in self.sizes]
        return self.observation_of(self.state)

    def step(self, action):
        self._require_reset()
        a = self.discretize(action)
        s1, s2, s3 = self.values
        reward = self._reward_of(self.values)
        n1, n2, n3 = self.sizes
        self.values = [
            int(self._streams[0].choice(n1, p=self.p1[a, s1, s2])),
            int(self._streams[1].choice(n2, p=self.p2[s2])),
            int(self._streams[2].choice(n3, p=self.p3[s3])),
        ]
        return self.observation_of(self.state), reward, self._tick()

    def set_factor(self, factor, value):
        if factor not in self.factor_names:
            raise ValueError(f"unknown factor {factor!r}")
        k = self.factor_names.index(factor)
        if not 0 <= value < self.sizes[k]:
            raise ValueError(f"value {value} outside the domain of {factor}")
        self.values[k] = int(value)

    def to_finite_mdp(self, gamma=0.99):
        n1, n2, n3 = self.sizes
        transition = np.einsum("aijk,jl,mn->aijmkln", self.p1, self.p2, self.p3).reshape(
            self.n_actions, self.n_states, self.n_states
        )
        r = np.array([self._reward_of(self.factors_of(s)) for s in range(self.n_states)])
        return FiniteMdp(transition, np.repeat(r[:, None], self.n_actions, axis=1), gamma)


class MdpFileEnv(TabularEnv):
    """A FiniteMdp loaded from JSON, observed as one-hot state vectors."""

    family = "mdp_json"
    variants = {"file": ("state",)}
    factor_names = ("state",)
    task_factors = ("state",)

    def __init__(self, path=None, mdp=None, episode_cap=50, variant="file"):
        super().__init__(episode_cap, variant)
        self.mdp = mdp if mdp is not None else load_mdp(path)
        self.n_states = self.mdp.n_states
        self.n_actions = self.mdp.n_actions
        self.obs_dim = self.n_states
        self.current = 0

    def factors_of(self, state):
        return (int(state),)

    def observation_of(self, state):
        obs = np.zeros(self.obs_dim)
        obs[state] = 1.0
        return obs

    def reset(self, seed=None):
        self._spawn(seed, 1)
        self.t = 0
        self.current = int(self._streams[0].integers(self.n_states))
        return self.observation_of(self.current)

    def step(self, action):
        self._require_reset()
        a = self.discretize(action)
        reward = float(self.mdp.reward[self.current, a])
        self.current = int(self._streams[0].choice(self.n_states, p=self.mdp.transition[a, self.current]))
        return self.observation_of(self.current), reward, self._tick()

    def set_factor(self, factor, value):
        if factor != "state" or not 0 <= value < self.n_states:
            raise ValueError(f"invalid intervention {factor}={value}")
        self.current = int(value)

    def to_finite_mdp(self, gamma=None):
        return self.mdp if gamma is None else self.mdp.with_gamma(gamma)


def to_finite_mdp(env, gamma=0.99):
    if not getattr(env, "tabular", False):
        raise TypeError(f"{type(env).__name__} has a continuous state space; no exact MDP available")
    return env.to_finite_mdp(gamma)


# ----------------------------------------------------------------------------
# Continuous point mass


def random_orthogonal(dim, seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


class ContinuousPointMass(Env):
    """Damped 2-D point mass observed through a fixed orthogonal mixing.

    The hidden state is ``[position(2), velocity(2), distractors(k)]``. The
    distractors follow ``x' = mu + rho (x - mu) + sqrt(1 - rho^2) sigma eps``,
    independent of the agent. Observations are ``M @ state`` for a random
    orthogonal ``M``, so no observation coordinate is purely task-relevant.
    """

    family = "point_mass"
    variants = {
        "reach_goal": ("position", "velocity"),
        "hold_velocity": ("velocity",),
        "track_distractor": ("distractor",),
    }
    task_factors = ("position", "velocity")
    distractor_factors = ("distractor",)
    factor_names = ("position", "velocity", "distractor")

    def __init__(
        self,
        n_distractors=8,
        dt=0.05,
        action_penalty=0.1,
        episode_cap=100,
        mixing_seed=0,
        distractor_rho=0.9,
        distractor_scale=1.0,
        distractor_mean=0.0,
        force=2.0,
        damping=1.0,
        start_range=1.0,
        goal=(0.0, 0.0),
        target_velocity=(0.5, 0.0),
        variant="reach_goal",
    ):
        super().__init__(episode_cap, variant)
        if not 0.0 <= distractor_rho < 1.0:
            raise ValueError("distractor_rho must lie in [0, 1)")
        self.n_distractors = int(n_distractors)
        self.dt = float(dt)
        self.action_penalty = float(action_penalty)
        self.mixing_seed = mixing_seed
        self.distractor_rho = float(distractor_rho)
        self.distractor_scale = float(distractor_scale)
        self.distractor_mean = float(distractor_mean)
        self.force = float(force)
        self.damping = float(damping)
        self.start_range = float(start_range)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.target_velocity = np.asarray(target_velocity, dtype=np.float64)
        self.obs_dim = 4 + self.n_distractors
        self.action_dim = 2
        self.mixing = random_orthogonal(self.obs_dim, mixing_seed)
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.distractors = np.zeros(self.n_distractors)

    @property
    def hidden_state(self):
        return np.concatenate([self.position, self.velocity, self.distractors])

    def observe(self, hidden):
        return np.asarray(hidden, dtype=np.float64) @ self.mixing.T

    def sample_distractors(self, rng, size=None):
        shape = (self.n_distractors,) if size is None else (size, self.n_distractors)
        return self.distractor_mean + self.distractor_scale * rng.normal(size=shape)

    def reward(self, position, velocity, action):
        penalty = self.action_penalty * float(np.sum(np.square(action)))
        if self.variant == "reach_goal":
            return -float(np.linalg.norm(position - self.goal)) - penalty
        if self.variant == "hold_velocity":
            return -float(np.linalg.norm(velocity - self.target_velocity)) - penalty
        return -float(abs(self.distractors[0])) - penalty

    def reset(self, seed=None):
        self._spawn(seed, 2)
        self.t = 0
        self.last_terminal = False
        self.position = self._streams[0].uniform(-self.start_range, self.start_range, size=2)
        self.velocity = np.zeros(2)
        self.distractors = self.sample_distractors(self._streams[1])
        return self.observe(self.hidden_state)

    def step(self, action):
        self._require_reset()
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0 + 1e-9):
            raise ValueError(f"action must be a finite 2-vector in [-1, 1], got {action!r}")
        self.velocity = self.velocity + self.dt * (self.force * a - self.damping * self.velocity)
        self.position = self.position + self.dt * self.velocity
        rho = self.distractor_rho
        noise = self._streams[1].normal(size=self.n_distractors)
        self.distractors = (
            self.distractor_mean
            + rho * (self.distractors - self.distractor_mean)
            + np.sqrt(1.0 - rho**2) * self.distractor_scale * noise
        )
        reward = self.reward(self.position, self.velocity, a)
        return self.observe(self.hidden_state), reward, self._tick()

    def set_factor(self, factor, value):
        value = np.asarray(value, dtype=np.float64)
        if factor == "position" and value.shape == (2,):
            self.position = value.copy()
        elif factor == "velocity" and value.shape == (2,):
            self.velocity = value.copy()
        elif factor == "distractor" and value.shape == (self.n_distractors,):
            self.distractors = value.copy()
        else:
            raise ValueError(f"invalid intervention {factor}={value!r}")

    def with_distractor_params(self, rho=None, scale=None, mean=None):
        new = copy.deepcopy(self)
        if rho is not None:
            new.distractor_rho = float(rho)
        if scale is not None:
            new.distractor_scale = float(scale)
        if mean is not None:
            new.distractor_mean = float(mean)
        return new

    def sample_states(self, rng, n):
        """Hidden states drawn from the start distribution with random velocities."""
        pos = rng.uniform(-self.start_range, self.start_range, size=(n, 2))
        vel = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.hstack([pos, vel, self.sample_distractors(rng, n)])


# ----------------------------------------------------------------------------
# Construction from specs

ENV_FAMILIES = {
    "grid": TabularDistractorGrid,
    "point_mass": ContinuousPointMass,
    "factored": FactoredCausalMdp,
    "mdp_json": MdpFileEnv,
}


def make_env(spec):
    """Build an environment from a spec mapping with a ``family`` key."""
    spec = dict(spec)
    family = spec.pop("family", None)
    if family not in ENV_FAMILIES:
        raise ValueError(f"unknown env family {family!r}; known: {sorted(ENV_FAMILIES)}")
    cls = ENV_FAMILIES[family]
    try:
        return cls(**spec)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {family} env: {exc}") from None
