"""Experiment configuration: defaults, validation and TOML/JSON loading."""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .envs import ENV_FAMILIES

ALGORITHMS = ("dbc", "castro", "reconstruction", "sac_raw")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


def _default_env():
    return {"family": "grid", "size": 4, "n_distractor": 5}


@dataclass
class ExperimentConfig:
    env: dict = field(default_factory=_default_env)
    algorithm: str = "dbc"
    seed: int = 0
    total_steps: int = 50_000
    init_steps: int = 1_000

    # SAC
    buffer_capacity: int = 1_000_000
    batch_size: int = 128
    gamma: float = 0.99
    critic_lr: float = 1e-5
    actor_lr: float = 1e-5
    encoder_lr: float = 1e-5
    model_lr: float = 1e-5
    alpha_lr: float = 1e-4
    alpha_beta1: float = 0.9
    tau_q: float = 0.005
    tau_phi: float = 0.005
    init_alpha: float = 0.1
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    actor_update_freq: int = 2
    critic_target_update_freq: int = 2
    hidden_dim: int = 256
    init_scale: str = "fan_in"
    dtype: str = "float64"

    # representation
    latent_dim: int = 50
    encoder_hidden: list = field(default_factory=list)
    model_hidden: int = 200
    psi_hidden: int = 729
    dynamics_loss: str = "nll"
    std_min: float = 1e-3
    std_max: float = 10.0
    # weight on the W2 term of the encoder loss; None means gamma
    bisim_weight: float = None

    # exact metrics and certificates; c=None means c = gamma
    c: float = None
    epsilons: list = field(default_factory=lambda: [0.01, 0.05, 0.1])
    metric_tol: float = 1e-8
    bound_tol: float = 1e-6

    # evaluation
    eval_every: int = 5_000
    eval_episodes: int = 5
    corr_every: int = 0
    corr_threshold: float = 0.8
    n_pairs: int = 2_000
    checkpoint: str = ""
    transfer_variant: str = "hold_velocity"
    transfer_steps: int = 0
    swap: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def metric_c(self):
        return self.gamma if self.c is None else self.c

    @property
    def encoder_weight(self):
        return self.gamma if self.bisim_weight is None else self.bisim_weight

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.env, dict), "env must be a table")
        need(self.env.get("family") in ENV_FAMILIES, f"env.family must be one of {sorted(ENV_FAMILIES)}")
        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}")
        need(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        for name in ("total_steps", "init_steps", "eval_every", "corr_every", "transfer_steps"):
            value = getattr(self, name)
            need(isinstance(value, int) and not isinstance(value, bool) and value >= 0, f"{name} must be an integer >= 0")
        for name in (
            "buffer_capacity", "batch_size", "actor_update_freq", "critic_target_update_freq",
            "hidden_dim", "latent_dim", "model_hidden", "psi_hidden", "n_pairs",
        ):
            value = getattr(self, name)
            need(isinstance(value, int) and not isinstance(value, bool) and value >= 1, f"{name} must be an integer >= 1")
        need(isinstance(self.eval_episodes, int) and self.eval_episodes >= 0, "eval_episodes must be >= 0")
        need(0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)")
        for name in ("critic_lr", "actor_lr", "encoder_lr", "model_lr", "alpha_lr", "metric_tol", "bound_tol"):
            value = getattr(self, name)
            need(_is_number(value) and value >= 0, f"{name} must be a number >= 0")
        need(_is_number(self.alpha_beta1) and 0 <= self.alpha_beta1 < 1, "alpha_beta1 must lie in [0, 1)")
        for name in ("tau_q", "tau_phi"):
            need(_is_number(getattr(self, name)) and 0 <= getattr(self, name) <= 1, f"{name} must lie in [0, 1]")
        need(_is_number(self.init_alpha) and self.init_alpha > 0, "init_alpha must be positive")
        need(self.log_std_min < self.log_std_max, "log_std_min must be below log_std_max")
        need(0 < self.std_min < self.std_max, "need 0 < std_min < std_max")
        need(self.dynamics_loss in ("nll", "mse"), "dynamics_loss must be 'nll' or 'mse'")
        need(self.init_scale == "fan_in", "init_scale supports only 'fan_in'")
        need(self.dtype in ("float64", "float32"), "dtype must be 'float64' or 'float32'")
        need(
            isinstance(self.encoder_hidden, list) and all(isinstance(w, int) and w >= 1 for w in self.encoder_hidden),
            "encoder_hidden must be a list of positive integers",
        )
        need(self.bisim_weight is None or (_is_number(self.bisim_weight) and self.bisim_weight >= 0), "bisim_weight must be >= 0")
        need(self.c is None or (_is_number(self.c) and 0 <= self.c < 1), "c must lie in [0, 1)")
        need(
            isinstance(self.epsilons, list) and all(_is_number(e) and e >= 0 for e in self.epsilons),
            "epsilons must be a list of numbers >= 0",
        )
        need(_is_number(self.corr_threshold), "corr_threshold must be a number")
        need(isinstance(self.checkpoint, str), "checkpoint must be a path string")
        need(isinstance(self.transfer_variant, str), "transfer_variant must be a string")
        need(isinstance(self.swap, dict), "swap must be a table")

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        data = dict(data)
        for key in ("epsilons", "encoder_hidden"):
            if key in data and isinstance(data[key], tuple):
                data[key] = list(data[key])
        # integral floats from JSON ("1e6") are accepted for integer fields
        for f in dataclasses.fields(cls):
            if f.type is int and isinstance(data.get(f.name), float) and float(data[f.name]).is_integer():
                data[f.name] = int(data[f.name])
        return cls(**data)


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def load_config(path):
    """Read a TOML or JSON config; relative ``checkpoint`` / mdp paths resolve against its directory."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if str(path).endswith(".json"):
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    if isinstance(data, dict):
        if data.get("checkpoint") and not os.path.isabs(data["checkpoint"]):
            data["checkpoint"] = os.path.join(base, data["checkpoint"])
        env = data.get("env")
        if isinstance(env, dict) and env.get("path") and not os.path.isabs(env["path"]):
            data["env"] = {**env, "path": os.path.join(base, env["path"])}
    return ExperimentConfig.from_dict(data)
