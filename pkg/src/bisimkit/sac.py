"""Soft actor-critic pieces operating on encoder latents."""

from dataclasses import dataclass

import numpy as np

from .nn import Mlp
from .validation import NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class ActorSample:
    action: np.ndarray
    log_pi: np.ndarray
    pre_tanh: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    noise: np.ndarray
    cache: tuple


class Actor(Mlp):
    """Tanh-squashed diagonal Gaussian policy over latents.

    The raw log-std output passes through ``tanh`` and is rescaled onto
    ``log_std_bounds``, which keeps it inside the bounds with a smooth gradient.
    """

    def __init__(
        self, latent_dim, action_dim, hidden=(256, 256), log_std_bounds=(-5.0, 2.0), rng=None, dtype=np.float64
    ):
        super().__init__([latent_dim, *hidden, 2 * action_dim], rng=rng, dtype=dtype)
        self.latent_dim = int(latent_dim)
        self.action_dim = int(action_dim)
        lo, hi = log_std_bounds
        if not lo < hi:
            raise ValueError(f"log_std bounds must be increasing, got {log_std_bounds}")
        self.log_std_bounds = (float(lo), float(hi))

    def distribution(self, z):
        out, cache = self.forward(z)
        k = self.action_dim
        lo, hi = self.log_std_bounds
        squash = np.tanh(out[:, k:])
        log_std = lo + 0.5 * (hi - lo) * (squash + 1.0)
        return out[:, :k], log_std, (cache, squash)

    def mean_action(self, z):
        return np.tanh(self.distribution(z)[0])

    def sample(self, z, noise):
        """Reparameterised sample ``tanh(mean + std * noise)`` and its log-density."""
        mean, log_std, cache = self.distribution(z)
        noise = np.reshape(noise, mean.shape)
        u = mean + np.exp(log_std) * noise
        log_pi = np.sum(-0.5 * noise**2 - log_std - 0.5 * LOG_2PI - log1m_tanh_sq(u), axis=1)
        return ActorSample(np.tanh(u), log_pi, u, mean, log_std, noise, cache)

    def backward_sample(self, sample, grad_action, grad_log_pi, input_grad=False):
        """Backprop through a sample with the noise held fixed; returns ``(grads, grad_z)``."""
        a = sample.action
        g_lp = np.reshape(grad_log_pi, (-1, 1))
        grad_u = grad_action * (1.0 - a**2) + g_lp * 2.0 * a
        std = np.exp(sample.log_std)
        grad_log_std = grad_u * std * sample.noise - g_lp
        net_cache, squash = sample.cache
        lo, hi = self.log_std_bounds
        grad_out = np.hstack([grad_u, grad_log_std * 0.5 * (hi - lo) * (1.0 - squash**2)])
        return self.backward(net_cache, grad_out, input_grad)


class Critic(Mlp):
    """``Q(z, a)``."""

    def __init__(self, latent_dim, action_dim, hidden=(256, 256), rng=None, dtype=np.float64):
        super().__init__([latent_dim + action_dim, *hidden, 1], rng=rng, dtype=dtype)
        self.latent_dim = int(latent_dim)
        self.action_dim = int(action_dim)

    def predict(self, z, a):
        out, cache = self.forward(np.hstack([z, a]))
        return out[:, 0], cache

    def backward_predict(self, cache, grad_q, input_grad=True):
        grads, grad_in = self.backward(cache, np.reshape(grad_q, (-1, 1)), input_grad)
        if grad_in is None:
            return grads, None, None
        return grads, grad_in[:, : self.latent_dim], grad_in[:, self.latent_dim :]


def soft_value(q1, q2, alpha, log_pi):
    """``min(q1, q2) - alpha * log_pi``."""
    return np.minimum(q1, q2) - alpha * log_pi


def act(obs, encoder, actor, deterministic=False, rng=None):
    """Action for one observation (or a batch). Sampling draws noise from ``rng``."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    z = encoder(obs[None] if single else obs)
    mean, log_std, _ = actor.distribution(z)
    if deterministic:
        action = np.tanh(mean)
    else:
        noise = np.random.default_rng(rng).standard_normal(mean.shape)
        action = np.tanh(mean + np.exp(log_std) * noise)
    if not np.all(np.isfinite(action)):
        raise NumericalError("actor produced a non-finite action")
    return action[0] if single else action


# ----------------------------------------------------------------------------
# Losses


@dataclass
class CriticLossResult:
    loss: float
    target: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    encoder_grads: list
    critic_grads: list


def critic_loss_and_grads(
    encoder, critics, target_encoder, target_critics, actor, alpha, batch, gamma, noise, detach_encoder=False
):
    """Soft Bellman residual of both critics.

    The bootstrap action is sampled by the actor on the online latent of the
    next observation; the target critics see the target-encoder latent.
    Gradients reach the online encoder unless ``detach_encoder``.
    """
    z, cache = encoder.forward(batch["obs"])
    nxt = actor.sample(encoder(batch["next_obs"]), noise)
    z_target = target_encoder(batch["next_obs"])
    tq1, _ = target_critics[0].predict(z_target, nxt.action)
    tq2, _ = target_critics[1].predict(z_target, nxt.action)
    target = batch["reward"] + gamma * (1.0 - batch["done"]) * soft_value(tq1, tq2, alpha, nxt.log_pi)
    q1, c1 = critics[0].predict(z, batch["action"])
    q2, c2 = critics[1].predict(z, batch["action"])
    n = q1.size
    loss = float(np.mean((q1 - target) ** 2) + np.mean((q2 - target) ** 2))
    if not np.isfinite(loss):
        raise NumericalError(f"critic loss is {loss}")
    g1, gz1, _ = critics[0].backward_predict(c1, 2.0 * (q1 - target) / n, input_grad=not detach_encoder)
    g2, gz2, _ = critics[1].backward_predict(c2, 2.0 * (q2 - target) / n, input_grad=not detach_encoder)
    enc_grads = None
    if not detach_encoder:
        enc_grads, _ = encoder.backward(cache, gz1 + gz2, input_grad=False)
    return CriticLossResult(loss, target, q1, q2, enc_grads, [g1, g2])


def actor_loss_and_grads(encoder, critics, actor, alpha, obs, noise):
    """``mean(alpha * log_pi - min(Q1, Q2))`` on detached latents.

    Returns ``(loss, actor_grads, log_pi)``.
    """
    z = encoder(obs)
    s = actor.sample(z, noise)
    q1, c1 = critics[0].predict(z, s.action)
    q2, c2 = critics[1].predict(z, s.action)
    n = q1.size
    loss = float(np.mean(alpha * s.log_pi - np.minimum(q1, q2)))
    if not np.isfinite(loss):
        raise NumericalError(f"actor loss is {loss}")
    first = q1 <= q2
    _, _, ga1 = critics[0].backward_predict(c1, -first.astype(np.float64) / n)
    _, _, ga2 = critics[1].backward_predict(c2, -(~first).astype(np.float64) / n)
    grads, _ = actor.backward_sample(s, ga1 + ga2, np.full(n, alpha / n))
    return loss, grads, s.log_pi


def alpha_loss_and_grads(log_alpha, log_pi, target_entropy):
    """``mean(-alpha * (log_pi + H))`` with ``log_pi`` constant; gradient w.r.t. ``log alpha``."""
    alpha = float(np.exp(log_alpha))
    loss = float(np.mean(-alpha * (log_pi + target_entropy)))
    return loss, np.array(loss)


# ----------------------------------------------------------------------------
# Replay


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling with replacement."""

    def __init__(self, capacity, obs_dim, action_dim):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.action = np.zeros((self.capacity, action_dim))
        self.reward = np.zeros(self.capacity)
        self.done = np.zeros(self.capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, obs, action, reward, next_obs, done):
        i = self.cursor
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng):
        if self.size < batch_size or batch_size < 1:
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {self.size}")
        return np.random.default_rng(rng).integers(0, self.size, size=batch_size)

    def sample(self, batch_size, rng):
        idx = self.sample_indices(batch_size, rng)
        return {
            "obs": self.obs[idx],
            "action": self.action[idx],
            "reward": self.reward[idx],
            "next_obs": self.next_obs[idx],
            "done": self.done[idx],
            "index": idx,
        }
