"""Encoder + SAC agent and its training loop.

One update per environment step after ``init_steps`` random-action steps:
critic, then (every ``actor_update_freq`` steps) actor and temperature,
then the representation losses of the chosen algorithm, each with its own
Adam optimizer. Target networks move only through Polyak averaging.
"""

import copy
import csv
import math

import numpy as np
from sklearn.base import BaseEstimator

from . import dbc, sac
from .config import ExperimentConfig
from .envs import make_env
from .nn import Adam, Parameter, load_module_tensors, load_tensors, module_tensors, polyak_update, save_tensors
from .validation import NumericalError

TRAIN_COLUMNS = (
    "step", "episode", "return", "critic_loss", "actor_loss", "alpha", "encoder_loss", "dyn_loss", "rew_loss",
)
CHECKPOINT_FORMAT = "bisimkit-agent"


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class _Streams:
    """Independent generators for every source of randomness in a run."""

    NAMES = ("init", "env", "explore", "replay", "noise", "pair", "eval")

    def __init__(self, seed):
        for name, child in zip(self.NAMES, np.random.SeedSequence(seed).spawn(len(self.NAMES))):
            setattr(self, name, np.random.default_rng(child))

    def env_seed(self):
        return int(self.env.integers(2**63))


class DBCAgent(BaseEstimator):
    """Representation-learning SAC agent.

    ``config.algorithm`` picks the encoder objective: ``dbc`` (bisimulation
    loss plus latent dynamics/reward models), ``castro`` (sample-based metric
    with a learned distance head), ``reconstruction`` (autoencoder) or
    ``sac_raw`` (critic gradients only).

    Parameters
    ----------
    config : ExperimentConfig or dict, optional
    seed : int, optional
        Overrides ``config.seed`` when given.
    """

    def __init__(self, config=None, seed=None):
        self.config = config
        self.seed = seed

    # -- construction -------------------------------------------------------

    def _resolved_config(self):
        cfg = self.config
        if cfg is None:
            cfg = ExperimentConfig()
        elif isinstance(cfg, dict):
            cfg = ExperimentConfig.from_dict(cfg)
        if self.seed is not None:
            cfg = cfg.replace(seed=int(self.seed))
        return cfg

    def build(self, obs_dim, action_dim):
        """Initialise all networks and optimizers for the given spaces."""
        cfg = self.cfg_ = self._resolved_config()
        self.streams_ = _Streams(cfg.seed)
        rng = self.streams_.init
        dt = np.dtype(cfg.dtype)
        k = cfg.latent_dim
        h = (cfg.hidden_dim, cfg.hidden_dim)
        mh = (cfg.model_hidden, cfg.model_hidden)
        self.obs_dim_ = int(obs_dim)
        self.action_dim_ = int(action_dim)
        self.encoder_ = dbc.make_encoder(obs_dim, k, cfg.encoder_hidden, rng=rng, dtype=dt)
        self.target_encoder_ = self.encoder_.clone()
        self.actor_ = sac.Actor(k, action_dim, h, (cfg.log_std_min, cfg.log_std_max), rng=rng, dtype=dt)
        self.critics_ = [sac.Critic(k, action_dim, h, rng=rng, dtype=dt) for _ in range(2)]
        self.target_critics_ = [q.clone() for q in self.critics_]
        self.log_alpha_ = Parameter(np.log(cfg.init_alpha))
        self.target_entropy_ = -float(action_dim)
        self.dynamics_ = dbc.DynamicsModel(
            k, action_dim, mh, (cfg.std_min, cfg.std_max), fixed_std=cfg.dynamics_loss == "mse", rng=rng, dtype=dt
        )
        self.reward_ = dbc.RewardModel(k, mh, rng=rng, dtype=dt)
        self.psi_ = dbc.DistanceNetwork(k, cfg.psi_hidden, rng=rng, dtype=dt)
        self.target_psi_ = self.psi_.clone()
        self.decoder_ = dbc.make_decoder(k, obs_dim, cfg.encoder_hidden, rng=rng, dtype=dt)
        self.encoder_frozen_ = False
        self._make_optimizers()
        self.steps_done_ = 0
        self.updates_done_ = 0
        return self

    def _make_optimizers(self):
        cfg = self.cfg_
        enc = [] if self.encoder_frozen_ else [self.encoder_]
        self.critic_opt_ = Adam([*self.critics_, *enc], cfg.critic_lr)
        self.actor_opt_ = Adam([self.actor_], cfg.actor_lr)
        self.alpha_opt_ = Adam([self.log_alpha_], cfg.alpha_lr, betas=(cfg.alpha_beta1, 0.999))
        self.encoder_opt_ = Adam([self.encoder_], cfg.encoder_lr)
        self.dynamics_opt_ = Adam([self.encoder_, self.dynamics_], cfg.model_lr)
        self.reward_opt_ = Adam([self.encoder_, self.dynamics_, self.reward_], cfg.model_lr)
        self.psi_opt_ = Adam([self.encoder_, self.psi_], cfg.encoder_lr)
        self.decoder_opt_ = Adam([self.encoder_, self.decoder_], cfg.model_lr)

    def freeze_encoder(self):
        """Stop every gradient into the encoder (critic included)."""
        self.encoder_frozen_ = True
        self._make_optimizers()
        return self

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha_.value))

    def modules(self):
        named = {
            "encoder": self.encoder_,
            "target_encoder": self.target_encoder_,
            "actor": self.actor_,
            "critic1": self.critics_[0],
            "critic2": self.critics_[1],
            "target_critic1": self.target_critics_[0],
            "target_critic2": self.target_critics_[1],
            "log_alpha": self.log_alpha_,
            "dynamics": self.dynamics_,
            "reward": self.reward_,
            "psi": self.psi_,
            "target_psi": self.target_psi_,
            "decoder": self.decoder_,
        }
        return named

    # -- inference ----------------------------------------------------------

    def transform(self, obs):
        """Latent codes for a batch of observations."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        return self.encoder_(obs)

    def predict(self, obs):
        """Deterministic (mean) actions for a batch of observations."""
        return sac.act(np.atleast_2d(obs), self.encoder_, self.actor_, deterministic=True)

    def policy_distance(self, obs_i, obs_j):
        """Learned distance between observation batches: l1 latent distance, or psi for castro."""
        zi, zj = self.transform(obs_i), self.transform(obs_j)
        if self.cfg_.algorithm == "castro":
            return self.psi_.predict(zi, zj)[0]
        return np.sum(np.abs(zi - zj), axis=1)

    # -- updates ------------------------------------------------------------

    def update(self, batch, step):
        """One round of gradient updates on a replay batch; returns loss scalars."""
        cfg = self.cfg_
        s = self.streams_
        n = batch["obs"].shape[0]
        perm = dbc.pair_batch(n, s.pair)
        out = {}
        noise = s.noise.standard_normal((n, self.action_dim_))
        res = sac.critic_loss_and_grads(
            self.encoder_, self.critics_, self.target_encoder_, self.target_critics_, self.actor_,
            self.alpha, batch, cfg.gamma, noise, detach_encoder=self.encoder_frozen_,
        )
        grads = res.critic_grads if self.encoder_frozen_ else [*res.critic_grads, res.encoder_grads]
        self.critic_opt_.step(grads)
        out["critic_loss"] = res.loss

        if step % cfg.actor_update_freq == 0:
            noise = s.noise.standard_normal((n, self.action_dim_))
            loss, actor_grads, log_pi = sac.actor_loss_and_grads(
                self.encoder_, self.critics_, self.actor_, self.alpha, batch["obs"], noise
            )
            self.actor_opt_.step([actor_grads])
            alpha_loss, alpha_grad = sac.alpha_loss_and_grads(self.log_alpha_.value, log_pi, self.target_entropy_)
            self.alpha_opt_.step([[alpha_grad]])
            out["actor_loss"] = loss
            out["alpha_loss"] = alpha_loss
        if step % cfg.critic_target_update_freq == 0:
            for target, online in zip(self.target_critics_, self.critics_):
                polyak_update(target, online, cfg.tau_q)
            polyak_update(self.target_encoder_, self.encoder_, cfg.tau_phi)
            if cfg.algorithm == "castro":
                polyak_update(self.target_psi_, self.psi_, cfg.tau_phi)

        if not self.encoder_frozen_:
            out.update(self._representation_update(batch, perm))
        out["alpha"] = self.alpha
        for key, value in out.items():
            if not np.isfinite(value):
                raise NumericalError(f"{key} became {value} at step {step}")
        self.updates_done_ += 1
        return out

    def _representation_update(self, batch, perm):
        cfg = self.cfg_
        out = {}
        if cfg.algorithm == "dbc":
            res, grads = dbc.bisim_loss_and_grads(
                self.encoder_, self.actor_.mean_action, self.dynamics_, self.reward_,
                batch["obs"], perm, cfg.encoder_weight,
            )
            self.encoder_opt_.step([grads])
            out["encoder_loss"] = res.loss
            loss, g_enc, g_dyn = dbc.dynamics_loss_and_grads(
                self.encoder_, self.dynamics_, batch["obs"], batch["action"], batch["next_obs"],
                mse=cfg.dynamics_loss == "mse",
            )
            self.dynamics_opt_.step([g_enc, g_dyn])
            out["dyn_loss"] = loss
            loss, g_enc, g_dyn, g_rew = dbc.reward_loss_and_grads(
                self.encoder_, self.dynamics_, self.reward_, batch["obs"], batch["action"], batch["reward"]
            )
            self.reward_opt_.step([g_enc, g_dyn, g_rew])
            out["rew_loss"] = loss
        elif cfg.algorithm == "castro":
            loss, g_enc, g_psi = dbc.castro_loss_and_grads(
                self.encoder_, self.psi_, self.target_encoder_, self.target_psi_,
                batch["obs"], batch["reward"], batch["next_obs"], perm, cfg.gamma,
            )
            self.psi_opt_.step([g_enc, g_psi])
            out["encoder_loss"] = loss
        elif cfg.algorithm == "reconstruction":
            loss, g_enc, g_dec = dbc.reconstruction_loss_and_grads(self.encoder_, self.decoder_, batch["obs"])
            self.decoder_opt_.step([g_enc, g_dec])
            out["encoder_loss"] = loss
        return out

    # -- training -----------------------------------------------------------

    def fit(self, env=None, y=None, total_steps=None, callback=None, log_path=None):
        """Train on ``env`` (built from ``config.env`` when omitted).

        ``callback(agent, step)`` runs after every ``eval_every``-th and
        ``corr_every``-th step and may return True to stop early. Returns self.
        """
        cfg = self._resolved_config()
        if env is None:
            env = make_env(cfg.env)
        if not hasattr(self, "encoder_"):
            self.build(env.obs_dim, env.action_dim)
        self.env_ = env
        total = cfg.total_steps if total_steps is None else int(total_steps)
        capacity = max(1, min(self.cfg_.buffer_capacity, total))
        self.replay_ = sac.ReplayBuffer(capacity, env.obs_dim, env.action_dim)
        self.train_log_ = []
        self.eval_log_ = []
        log_fh = writer = None
        if log_path is not None:
            log_fh = open(log_path, "w", newline="")
            writer = csv.writer(log_fh, lineterminator="\n")
            writer.writerow(TRAIN_COLUMNS)
        try:
            self._train_loop(env, total, callback, writer)
        finally:
            if log_fh is not None:
                log_fh.close()
        return self

    def _train_loop(self, env, total, callback, writer):
        cfg = self.cfg_
        s = self.streams_
        obs = env.reset(seed=s.env_seed())
        episode, ep_return, ep_losses = 0, 0.0, {}
        checkpoints = {cfg.eval_every, cfg.corr_every} - {0}
        for step in range(total):
            if self.steps_done_ < cfg.init_steps:
                action = s.explore.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                action = sac.act(obs, self.encoder_, self.actor_, deterministic=False, rng=s.explore)
            next_obs, reward, done = env.step(action)
            self.replay_.push(obs, action, reward, next_obs, env.last_terminal)
            ep_return += reward
            self.steps_done_ += 1
            if self.steps_done_ > cfg.init_steps and len(self.replay_) >= cfg.batch_size:
                batch = self.replay_.sample(cfg.batch_size, s.replay)
                for key, value in self.update(batch, self.steps_done_).items():
                    ep_losses.setdefault(key, []).append(value)
            obs = next_obs
            if done:
                row = self._episode_row(episode, ep_return, ep_losses)
                self.train_log_.append(row)
                if writer is not None:
                    writer.writerow([_fmt(row[c]) for c in TRAIN_COLUMNS])
                episode += 1
                ep_return, ep_losses = 0.0, {}
                obs = env.reset(seed=s.env_seed())
            if any(self.steps_done_ % every == 0 for every in checkpoints):
                if cfg.eval_every and self.steps_done_ % cfg.eval_every == 0 and cfg.eval_episodes:
                    self.eval_log_.append((self.steps_done_, self.evaluate(env, cfg.eval_episodes)))
                if callback is not None and callback(self, self.steps_done_):
                    break

    def _episode_row(self, episode, ep_return, losses):
        row = {"step": self.steps_done_, "episode": episode, "return": ep_return}
        for key in ("critic_loss", "actor_loss", "encoder_loss", "dyn_loss", "rew_loss"):
            row[key] = float(np.mean(losses[key])) if key in losses else None
        row["alpha"] = self.alpha
        return row

    def evaluate(self, env, n_episodes, seed=None):
        """Mean return of the deterministic policy; episode seeds come from the eval stream."""
        rng = self.streams_.eval if seed is None else np.random.default_rng(seed)
        env = copy.deepcopy(env)
        returns = []
        for _ in range(n_episodes):
            obs = env.reset(seed=int(rng.integers(2**63)))
            total, done = 0.0, False
            while not done:
                obs, reward, done = env.step(sac.act(obs, self.encoder_, self.actor_, deterministic=True))
                total += reward
            returns.append(total)
        return float(np.mean(returns))

    # -- checkpoints --------------------------------------------------------

    def save(self, path):
        tensors = {}
        for name, module in self.modules().items():
            tensors.update(module_tensors(name, module))
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": self.cfg_.to_dict(),
            "obs_dim": self.obs_dim_,
            "action_dim": self.action_dim_,
            "steps": self.steps_done_,
            "updates": self.updates_done_,
        }
        save_tensors(tensors, path, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_tensors(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not an agent checkpoint")
        agent = cls(ExperimentConfig.from_dict(meta["config"]))
        agent.build(meta["obs_dim"], meta["action_dim"])
        for name, module in agent.modules().items():
            load_module_tensors(name, module, tensors)
        agent.steps_done_ = meta["steps"]
        agent.updates_done_ = meta["updates"]
        return agent

