"""Experiment drivers behind the command-line subcommands.

Each ``run_*`` function is a pure function of its config (seed included) to
the files it writes in ``out_dir`` and the summary dict it returns.
"""

import copy
import csv
import json
import os
import warnings

import numpy as np

from . import bisim
from .agent import DBCAgent
from .config import ConfigError
from .envs import make_env, reward_variant, to_finite_mdp
from .evaluation import correlation_report, invariance_report, normalized_score, random_policy_return

SCHEMA_VERSION = 1


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _summary(command, cfg, **fields):
    return {"schema": f"bisimkit.{command}", "schema_version": SCHEMA_VERSION, "seed": cfg.seed, **fields}


def _env(cfg, **overrides):
    try:
        return make_env({**cfg.env, **overrides})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _tabular_mdp(cfg, env):
    try:
        return to_finite_mdp(env, None if cfg.env["family"] == "mdp_json" else cfg.gamma)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ----------------------------------------------------------------------------
# exact


def run_exact(cfg, out_dir):
    """Exact metrics, bisimulation partition and value-bound certificates for a tabular env."""
    mdp = _tabular_mdp(cfg, _env(cfg))
    c = cfg.metric_c
    metric = bisim.bisim_metric_max(mdp, c, cfg.metric_tol)
    bisim.write_metric_csv(metric, os.path.join(out_dir, "metric.csv"))
    partition = bisim.bisimulation_partition(mdp)
    bisim.write_partition_csv(partition, os.path.join(out_dir, "partition.csv"))
    on_policy, policy, rounds = bisim.pi_star_bisim_metric(mdp, c, cfg.metric_tol)
    bisim.write_metric_csv(on_policy, os.path.join(out_dir, "metric_onpolicy.csv"))

    eps_reports = []
    for eps in cfg.epsilons:
        agg = bisim.epsilon_aggregate(mdp, metric, eps)
        rep = bisim.check_value_bound(mdp, agg, eps, c, tol=cfg.bound_tol)
        eps_reports.append(
            {"epsilon": eps, "n_clusters": agg.n_clusters, "max_gap": rep.max_gap, "bound": rep.bound, "holds": rep.holds}
        )
    if c >= mdp.gamma:
        lip = bisim.check_lipschitz(mdp, metric, c, tol=cfg.bound_tol)
        lipschitz = {"max_ratio": lip.max_ratio, "max_violation": lip.max_violation, "holds": lip.holds}
    else:
        lipschitz = {"skipped": f"c={c} < gamma={mdp.gamma}"}
    gaps = [r["max_gap"] for r in eps_reports]
    bounds = _summary(
        "exact",
        cfg,
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        gamma=mdp.gamma,
        c=c,
        metric_iterations=metric.n_iter,
        n_bisim_blocks=partition.n_blocks,
        onpolicy_rounds=len(rounds),
        optimal_policy=[int(a) for a in policy.actions],
        epsilon_reports=eps_reports,
        lipschitz=lipschitz,
        max_gap=max(gaps) if gaps else 0.0,
        holds=all(r["holds"] for r in eps_reports) and lipschitz.get("holds", True),
    )
    write_json(bounds, os.path.join(out_dir, "bounds.json"))
    return bounds


# ----------------------------------------------------------------------------
# train


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _f(x):
    return repr(float(x))


def dump_latents(agent, env, n_episodes, seed, path):
    """Latents along deterministic evaluation episodes: ``episode,step,obs_id,z_0..``."""
    rng = np.random.default_rng(seed)
    rows = []
    counter = 0
    for ep in range(n_episodes):
        obs = env.reset(seed=int(rng.integers(2**63)))
        done, t = False, 0
        while True:
            obs_id = env.state if getattr(env, "tabular", False) and hasattr(env, "state") else counter
            z = agent.transform(obs)[0]
            rows.append([ep, t, int(obs_id), *(_f(v) for v in z)])
            counter += 1
            if done:
                break
            obs, _, done = env.step(agent.predict(obs)[0])
            t += 1
    header = ["episode", "step", "obs_id", *(f"z_{i}" for i in range(agent.cfg_.latent_dim))]
    _write_rows(path, header, rows)


def train_agent(cfg, env=None, log_path=None, callback=None):
    env = _env(cfg) if env is None else env
    agent = DBCAgent(cfg)
    agent.build(env.obs_dim, env.action_dim)
    agent.fit(env, log_path=log_path, callback=callback)
    return agent, env


def run_train(cfg, out_dir):
    agent, env = train_agent(cfg, log_path=os.path.join(out_dir, "train.csv"))
    _write_rows(os.path.join(out_dir, "eval.csv"), ["step", "mean_return"], [[s, _f(r)] for s, r in agent.eval_log_])
    n_latent_episodes = 1 if cfg.total_steps > 0 else 0
    dump_latents(agent, env, n_latent_episodes, cfg.seed, os.path.join(out_dir, "latents.csv"))
    agent.save(os.path.join(out_dir, "checkpoint.json"))
    last = agent.train_log_[-1] if agent.train_log_ else {}
    summary = _summary(
        "train",
        cfg,
        algorithm=cfg.algorithm,
        steps=agent.steps_done_,
        updates=agent.updates_done_,
        episodes=len(agent.train_log_),
        final_eval_return=agent.eval_log_[-1][1] if agent.eval_log_ else None,
        last_episode={k: v for k, v in last.items()},
        alpha=agent.alpha,
    )
    write_json(summary, os.path.join(out_dir, "summary.json"))
    return summary


# ----------------------------------------------------------------------------
# evaluations


def load_or_init_agent(cfg, env):
    """Agent from ``cfg.checkpoint``; an untrained agent built from ``cfg`` when it is empty."""
    if cfg.checkpoint:
        try:
            agent = DBCAgent.load(cfg.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint {cfg.checkpoint}: {exc}") from None
        if agent.obs_dim_ != env.obs_dim or agent.action_dim_ != env.action_dim:
            raise ConfigError("checkpoint does not match the environment's observation/action sizes")
        return agent
    return DBCAgent(cfg).build(env.obs_dim, env.action_dim)


def run_eval_corr(cfg, out_dir):
    env = _env(cfg)
    _tabular_mdp(cfg, env)
    agent = load_or_init_agent(cfg, env)
    report = correlation_report(agent, env, cfg.metric_c, cfg.metric_tol, include_max=True)
    summary = _summary("eval-corr", cfg, algorithm=agent.cfg_.algorithm, checkpoint_steps=agent.steps_done_, **report)
    write_json(summary, os.path.join(out_dir, "corr.json"))
    return summary


def run_eval_inv(cfg, out_dir):
    env = _env(cfg)
    agent = load_or_init_agent(cfg, env)
    try:
        report = invariance_report(agent, env, cfg.n_pairs, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    summary = _summary("eval-inv", cfg, algorithm=agent.cfg_.algorithm, checkpoint_steps=agent.steps_done_, **report)
    write_json(summary, os.path.join(out_dir, "inv.json"))
    return summary


def swapped_env(env, swap):
    """Copy of ``env`` with new distractor-process parameters."""
    if not swap:
        return env
    if hasattr(env, "with_distractor_params"):
        unknown = set(swap) - {"rho", "scale", "mean"}
        if unknown:
            raise ConfigError(f"unknown swap keys for {env.family}: {sorted(unknown)}")
        return env.with_distractor_params(**swap)
    if hasattr(env, "with_distractor_seed"):
        if set(swap) != {"chain_seed"}:
            raise ConfigError("grid swap takes exactly one key: chain_seed")
        return env.with_distractor_seed(swap["chain_seed"])
    raise ConfigError(f"{env.family} has no distractor process to swap")


def transfer_runs(source, cfg, env, log_prefix=None):
    """Frozen-encoder SAC versus a from-scratch run on ``cfg.transfer_variant``.

    Both runs use the source agent's architecture and hyperparameters, the
    same seed and the same step budget. The from-scratch run trains the
    source's algorithm end to end. Returns ``(report, frozen_agent, scratch_agent)``.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            target_env = reward_variant(env, cfg.transfer_variant) if cfg.transfer_variant != env.variant else env
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    notes = [str(w.message) for w in caught]
    for note in notes:
        warnings.warn(note, stacklevel=2)
    budget = cfg.transfer_steps or cfg.total_steps
    run_cfg = source.cfg_.replace(
        seed=cfg.seed, total_steps=budget, eval_every=cfg.eval_every, eval_episodes=cfg.eval_episodes, corr_every=0
    )

    frozen = DBCAgent(run_cfg).build(target_env.obs_dim, target_env.action_dim)
    frozen.encoder_.copy_from(source.encoder_)
    frozen.target_encoder_.copy_from(source.encoder_)
    frozen.freeze_encoder()
    frozen.fit(target_env, log_path=None if log_prefix is None else f"{log_prefix}frozen_train.csv")
    scratch = DBCAgent(run_cfg).build(target_env.obs_dim, target_env.action_dim)
    scratch.fit(target_env, log_path=None if log_prefix is None else f"{log_prefix}scratch_train.csv")

    n_final = max(10, cfg.eval_episodes)
    final_seed = cfg.seed + 1
    frozen_final = frozen.evaluate(target_env, n_final, seed=final_seed)
    scratch_final = scratch.evaluate(target_env, n_final, seed=final_seed)
    random_final = random_policy_return(copy.deepcopy(target_env), n_final, final_seed)
    report = {
        "variant": cfg.transfer_variant,
        "budget": budget,
        "frozen_final_return": frozen_final,
        "scratch_final_return": scratch_final,
        "random_return": random_final,
        "normalized_ratio": normalized_score(frozen_final, scratch_final, random_final),
        "warnings": notes,
        "frozen_curve": [[s, r] for s, r in frozen.eval_log_],
        "scratch_curve": [[s, r] for s, r in scratch.eval_log_],
    }
    return report, frozen, scratch


def swap_report(agent, env, swap, n_episodes, seed):
    """Return of ``agent`` on ``env`` before and after a distractor swap."""
    before = agent.evaluate(env, n_episodes, seed=seed)
    after = agent.evaluate(swapped_env(env, swap), n_episodes, seed=seed)
    return {"swap": dict(swap), "return_before": before, "return_after": after, "drop": before - after}


def run_eval_transfer(cfg, out_dir):
    env = _env(cfg)
    if cfg.checkpoint:
        source = load_or_init_agent(cfg, env)
    else:
        source, _ = train_agent(cfg, env)
    report, _, _ = transfer_runs(source, cfg, env)
    _write_rows(os.path.join(out_dir, "frozen_curve.csv"), ["step", "return"], [[s, _f(r)] for s, r in report["frozen_curve"]])
    _write_rows(os.path.join(out_dir, "scratch_curve.csv"), ["step", "return"], [[s, _f(r)] for s, r in report["scratch_curve"]])
    fields = {k: v for k, v in report.items() if not k.endswith("_curve")}
    if cfg.swap:
        fields["swap"] = swap_report(source, env, cfg.swap, max(10, cfg.eval_episodes), cfg.seed + 2)
    summary = _summary("eval-transfer", cfg, algorithm=source.cfg_.algorithm, **fields)
    write_json(summary, os.path.join(out_dir, "transfer.json"))
    return summary
