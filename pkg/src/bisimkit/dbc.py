"""Bisimulation encoder losses, latent models and the two baseline encoder losses.

Every ``*_loss_and_grads`` function is a pure function of the networks and a
batch: it returns the loss and per-module gradient lists and never mutates
parameters, so it can be finite-difference checked directly and reused by
the training loop.

Stop-gradient convention: a latent written ``zbar`` is a plain array taken
from an encoder forward pass whose cache is discarded, so nothing computed
from it can push gradient back into the encoder.
"""

from dataclasses import dataclass

import numpy as np

from .nn import Mlp
from .validation import NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))


def pair_batch(batch_size, rng):
    """Uniformly random permutation pairing row ``i`` with row ``perm[i]``."""
    if batch_size < 1:
        raise ValueError("batch must be nonempty")
    return np.random.default_rng(rng).permutation(batch_size)


def _finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"{name}: non-finite input")


def gaussian_w2(mean_i, std_i, mean_j, std_j):
    """Row-wise closed-form W2 between diagonal Gaussians."""
    return np.sqrt(np.sum((mean_i - mean_j) ** 2, axis=-1) + np.sum((std_i - std_j) ** 2, axis=-1))


@dataclass
class BisimLossResult:
    loss: float
    grad_z_i: np.ndarray
    grad_z_j: np.ndarray
    target: np.ndarray
    latent_dist: np.ndarray


def bisim_loss(z_i, z_j, r_i, r_j, mean_i, std_i, mean_j, std_j, discount_weight=0.99):
    """Squared gap between latent l1 distance and the model-based bisimulation target.

    ``target = |r_i - r_j| + discount_weight * W2(N_i, N_j)`` is treated as a
    constant: gradients are returned only for ``z_i`` and ``z_j``.
    """
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape or z_i.ndim != 2:
        raise ValueError(f"latent batches must share a 2-D shape, got {z_i.shape} and {z_j.shape}")
    batch, dim = z_i.shape
    r_i = np.reshape(r_i, -1)
    r_j = np.reshape(r_j, -1)
    for name, arr in (("r_i", r_i), ("r_j", r_j)):
        if arr.shape != (batch,):
            raise ValueError(f"{name} must have {batch} entries, got {arr.shape}")
    for name, arr in (("mean_i", mean_i), ("std_i", std_i), ("mean_j", mean_j), ("std_j", std_j)):
        if np.ndim(arr) != 2 or np.shape(arr)[0] != batch:
            raise ValueError(f"{name} must have shape ({batch}, k), got {np.shape(arr)}")
    _finite("bisim_loss", z_i, z_j, r_i, r_j, mean_i, std_i, mean_j, std_j)
    target = np.abs(r_i - r_j) + discount_weight * gaussian_w2(mean_i, std_i, mean_j, std_j)
    delta = z_i - z_j
    latent_dist = np.sum(np.abs(delta), axis=1)
    gap = latent_dist - target
    loss = float(np.mean(gap**2))
    grad_z_i = (2.0 / batch) * gap[:, None] * np.sign(delta)
    return BisimLossResult(loss, grad_z_i, -grad_z_i, target, latent_dist)


def gaussian_nll(mean, std, target):
    """Diagonal Gaussian NLL summed over dimensions, averaged over the batch.

    Returns ``(loss, grad_mean, grad_std)``.
    """
    batch = mean.shape[0]
    scaled = (target - mean) / std
    per_row = np.sum(0.5 * LOG_2PI + np.log(std) + 0.5 * scaled**2, axis=1)
    grad_mean = -scaled / std / batch
    grad_std = (1.0 / std - scaled**2 / std) / batch
    return float(np.mean(per_row)), grad_mean, grad_std


def squared_error(pred, target):
    """Mean over the batch of the summed squared error; returns ``(loss, grad_pred)``."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.reshape(target, pred.shape)
    batch = pred.shape[0]
    return float(np.sum(diff**2) / batch), 2.0 * diff / batch


def castro_loss(psi, r_i, r_j, target_psi, gamma):
    """``mean((psi - |r_i - r_j| - gamma * target_psi)^2)``; returns ``(loss, grad_psi)``."""
    psi = np.reshape(psi, -1)
    _finite("castro_loss", psi, r_i, r_j, target_psi)
    gap = psi - np.abs(np.reshape(r_i, -1) - np.reshape(r_j, -1)) - gamma * np.reshape(target_psi, -1)
    return float(np.mean(gap**2)), 2.0 * gap / psi.size


def reconstruction_mse(recon, obs):
    """Mean over all entries of ``(recon - obs)^2``; returns ``(loss, grad_recon)``."""
    if recon.shape != obs.shape:
        raise ValueError(f"reconstruction shape {recon.shape} != observation shape {obs.shape}")
    diff = recon - obs
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ----------------------------------------------------------------------------
# Models


class DynamicsModel(Mlp):
    """``(z, a) -> N(mean, diag(std^2))`` over the next latent.

    The std head is squashed smoothly so ``log std`` lies in
    ``[log std_min, log std_max]``. With ``fixed_std`` the head is ignored and
    ``std = 1``.
    """

    def __init__(
        self, latent_dim, action_dim, hidden=(200, 200), std_bounds=(1e-3, 10.0), fixed_std=False,
        rng=None, dtype=np.float64,
    ):
        super().__init__([latent_dim + action_dim, *hidden, 2 * latent_dim], rng=rng, dtype=dtype)
        self.latent_dim = int(latent_dim)
        self.action_dim = int(action_dim)
        lo, hi = std_bounds
        if not 0 < lo < hi:
            raise ValueError(f"need 0 < std_min < std_max, got {std_bounds}")
        self.std_bounds = (float(lo), float(hi))
        self.fixed_std = bool(fixed_std)

    def predict(self, z, a):
        out, cache = self.forward(np.hstack([z, a]))
        k = self.latent_dim
        mean = out[:, :k]
        if self.fixed_std:
            return mean, np.ones_like(mean), (cache, None)
        lo, hi = np.log(self.std_bounds[0]), np.log(self.std_bounds[1])
        squash = np.tanh(out[:, k:])
        std = np.exp(lo + 0.5 * (hi - lo) * (squash + 1.0))
        return mean, std, (cache, (squash, std, hi - lo))

    def backward_predict(self, cache, grad_mean, grad_std=None, input_grad=True):
        """Returns ``(param_grads, grad_z, grad_a)``."""
        net_cache, head = cache
        grad_out = np.zeros((grad_mean.shape[0], 2 * self.latent_dim))
        grad_out[:, : self.latent_dim] = grad_mean
        if head is not None and grad_std is not None:
            squash, std, span = head
            grad_out[:, self.latent_dim :] = grad_std * std * 0.5 * span * (1.0 - squash**2)
        grads, grad_in = self.backward(net_cache, grad_out, input_grad)
        if grad_in is None:
            return grads, None, None
        return grads, grad_in[:, : self.latent_dim], grad_in[:, self.latent_dim :]


class RewardModel(Mlp):
    """Deterministic latent -> reward regressor."""

    def __init__(self, latent_dim, hidden=(200, 200), rng=None, dtype=np.float64):
        super().__init__([latent_dim, *hidden, 1], rng=rng, dtype=dtype)

    def predict(self, z):
        out, cache = self.forward(z)
        return out[:, 0], cache

    def backward_predict(self, cache, grad_r, input_grad=True):
        return self.backward(cache, np.reshape(grad_r, (-1, 1)), input_grad)


class DistanceNetwork(Mlp):
    """``psi(z_i, z_j) >= 0`` with one relu hidden layer and a softplus head."""

    def __init__(self, latent_dim, hidden=729, rng=None, dtype=np.float64):
        super().__init__([2 * latent_dim, int(hidden), 1], output_activation="softplus", rng=rng, dtype=dtype)
        self.latent_dim = int(latent_dim)

    def predict(self, z_i, z_j):
        out, cache = self.forward(np.hstack([z_i, z_j]))
        return out[:, 0], cache

    def backward_predict(self, cache, grad_psi, input_grad=True):
        grads, grad_in = self.backward(cache, np.reshape(grad_psi, (-1, 1)), input_grad)
        if grad_in is None:
            return grads, None, None
        return grads, grad_in[:, : self.latent_dim], grad_in[:, self.latent_dim :]


def make_encoder(obs_dim, latent_dim=50, hidden=(), rng=None, dtype=np.float64):
    """Encoder MLP; with no hidden layers it is a single linear map."""
    return Mlp([obs_dim, *hidden, latent_dim], rng=rng, dtype=dtype)


def make_decoder(latent_dim, obs_dim, encoder_hidden=(), rng=None, dtype=np.float64):
    """Decoder mirroring the encoder widths."""
    return Mlp([latent_dim, *reversed(tuple(encoder_hidden)), obs_dim], rng=rng, dtype=dtype)


# ----------------------------------------------------------------------------
# Loss assemblies


def scatter_pair_grad(grad_i, grad_j, perm):
    """Gradient w.r.t. a batch ``z`` given gradients w.r.t. ``z`` and ``z[perm]``."""
    grad = grad_i.copy()
    np.add.at(grad, perm, grad_j)
    return grad


def bisim_loss_and_grads(encoder, policy_mean, dynamics, reward, obs, perm, discount_weight=0.99):
    """Encoder loss on a paired batch; returns ``(BisimLossResult, encoder_grads)``.

    ``policy_mean`` maps latents to the mean (squashed) policy action. Reward,
    dynamics and policy are evaluated on stop-gradient latents, so only the
    l1 term reaches the encoder.
    """
    z, cache = encoder.forward(obs)
    zbar = z.copy()
    r_hat, _ = reward.predict(zbar)
    mean, std, _ = dynamics.predict(zbar, policy_mean(zbar))
    res = bisim_loss(z, z[perm], r_hat, r_hat[perm], mean, std, mean[perm], std[perm], discount_weight)
    grad_z = scatter_pair_grad(res.grad_z_i, res.grad_z_j, perm)
    grads, _ = encoder.backward(cache, grad_z, input_grad=False)
    return res, grads


def dynamics_loss_and_grads(encoder, dynamics, obs, action, next_obs, mse=False):
    """NLL (or squared error with ``mse``) of the stop-gradient next latent.

    Returns ``(loss, encoder_grads, dynamics_grads)``.
    """
    z, cache = encoder.forward(obs)
    target = encoder(next_obs)
    mean, std, dyn_cache = dynamics.predict(z, action)
    if mse:
        loss, grad_mean = squared_error(mean, target)
        grad_std = None
    else:
        loss, grad_mean, grad_std = gaussian_nll(mean, std, target)
    if not np.isfinite(loss):
        raise NumericalError(f"dynamics loss is {loss}")
    dyn_grads, grad_z, _ = dynamics.backward_predict(dyn_cache, grad_mean, grad_std)
    enc_grads, _ = encoder.backward(cache, grad_z, input_grad=False)
    return loss, enc_grads, dyn_grads


def reward_loss_and_grads(encoder, dynamics, reward, obs, action, rew):
    """Squared error of the reward predicted at the mean next latent.

    Returns ``(loss, encoder_grads, dynamics_grads, reward_grads)``.
    """
    z, cache = encoder.forward(obs)
    mean, _, dyn_cache = dynamics.predict(z, action)
    r_hat, rew_cache = reward.predict(mean)
    loss, grad_r = squared_error(r_hat, rew)
    if not np.isfinite(loss):
        raise NumericalError(f"reward loss is {loss}")
    rew_grads, grad_mean = reward.backward_predict(rew_cache, grad_r)
    dyn_grads, grad_z, _ = dynamics.backward_predict(dyn_cache, grad_mean, None)
    enc_grads, _ = encoder.backward(cache, grad_z, input_grad=False)
    return loss, enc_grads, dyn_grads, rew_grads


def castro_loss_and_grads(encoder, psi, target_encoder, target_psi, obs, rew, next_obs, perm, gamma):
    """Sample-based metric loss with a learned distance head.

    Returns ``(loss, encoder_grads, psi_grads)``.
    """
    z, cache = encoder.forward(obs)
    d, psi_cache = psi.predict(z, z[perm])
    zn = target_encoder(next_obs)
    target, _ = target_psi.predict(zn, zn[perm])
    rew = np.reshape(rew, -1)
    loss, grad_d = castro_loss(d, rew, rew[perm], target, gamma)
    psi_grads, g_i, g_j = psi.backward_predict(psi_cache, grad_d)
    enc_grads, _ = encoder.backward(cache, scatter_pair_grad(g_i, g_j, perm), input_grad=False)
    return loss, enc_grads, psi_grads


def reconstruction_loss_and_grads(encoder, decoder, obs):
    """Returns ``(loss, encoder_grads, decoder_grads)``."""
    z, cache = encoder.forward(obs)
    recon, dec_cache = decoder.forward(z)
    loss, grad = reconstruction_mse(recon, obs)
    dec_grads, grad_z = decoder.backward(dec_cache, grad)
    enc_grads, _ = encoder.backward(cache, grad_z, input_grad=False)
    return loss, enc_grads, dec_grads
