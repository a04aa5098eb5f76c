import json
import subprocess
import sys

import numpy as np
import pytest

from bisimkit import cli, experiments
from bisimkit.mdp import save_mdp
from bisimkit.validation import NumericalError
from helpers import absorbing_pair, with_duplicate

GRID = '[env]\nfamily = "grid"\nsize = 2\nn_distractor = 2\nepisode_cap = 10\n'
TRAIN = (
    "total_steps = 60\ninit_steps = 20\nbatch_size = 8\nhidden_dim = 8\nlatent_dim = 2\n"
    "model_hidden = 8\npsi_hidden = 8\neval_every = 30\neval_episodes = 1\n"
)


def _config(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _run(command, config, seed, out):
    return cli.main([command, "--config", config, "--seed", str(seed), "--out", str(out)])


def _files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


# Golden schemas: the keys every summary carries.
GOLDEN = {
    "exact": {
        "schema", "schema_version", "seed", "n_states", "n_actions", "gamma", "c", "metric_iterations",
        "n_bisim_blocks", "onpolicy_rounds", "optimal_policy", "epsilon_reports", "lipschitz", "max_gap", "holds",
    },
    "train": {
        "schema", "schema_version", "seed", "algorithm", "steps", "updates", "episodes", "final_eval_return",
        "last_episode", "alpha",
    },
    "eval-corr": {
        "schema", "schema_version", "seed", "algorithm", "checkpoint_steps", "n_pairs", "c", "pearson", "spearman",
        "learning_error", "learning_error_scaled", "policy", "pearson_max_metric", "spearman_max_metric",
    },
    "eval-inv": {
        "schema", "schema_version", "seed", "algorithm", "checkpoint_steps", "distractor_dist_mean",
        "task_dist_mean", "ratio", "n_distractor_pairs", "n_task_pairs",
    },
    "eval-transfer": {
        "schema", "schema_version", "seed", "algorithm", "variant", "budget", "frozen_final_return",
        "scratch_final_return", "random_return", "normalized_ratio", "warnings", "swap",
    },
}
OUTPUTS = {
    "exact": ("bounds.json", {"bounds.json", "metric.csv", "metric_onpolicy.csv", "partition.csv"}),
    "train": ("summary.json", {"summary.json", "train.csv", "eval.csv", "latents.csv", "checkpoint.json"}),
    "eval-corr": ("corr.json", {"corr.json"}),
    "eval-inv": ("inv.json", {"inv.json"}),
    "eval-transfer": ("transfer.json", {"transfer.json", "frozen_curve.csv", "scratch_curve.csv"}),
}
PM = (
    'transfer_variant = "hold_velocity"\n[env]\nfamily = "point_mass"\nn_distractors = 2\nepisode_cap = 10\n'
    '[swap]\nscale = 2.0\n'
)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = _config(tmp, TRAIN + GRID)
    assert _run("train", cfg, 0, tmp / "out") == 0
    return tmp / "out" / "checkpoint.json"


def _command_config(command, tmp_path, trained):
    if command == "exact":
        return _config(tmp_path, "epsilons = [0.05]\n" + GRID)
    if command == "train":
        return _config(tmp_path, TRAIN + GRID)
    if command == "eval-transfer":
        return _config(tmp_path, TRAIN.replace("eval_every = 30", "eval_every = 30\ntransfer_steps = 40") + PM)
    return _config(tmp_path, f'checkpoint = "{trained}"\n' + GRID)


@pytest.mark.parametrize("command", sorted(GOLDEN))
def test_golden_schema_and_byte_identical_reruns(command, tmp_path, trained):
    cfg = _command_config(command, tmp_path, trained)
    assert _run(command, cfg, 7, tmp_path / "a") == 0
    assert _run(command, cfg, 7, tmp_path / "b") == 0
    summary_name, expected_files = OUTPUTS[command]
    files = _files(tmp_path / "a")
    assert set(files) == expected_files
    assert files == _files(tmp_path / "b")
    summary = json.loads(files[summary_name])
    assert set(summary) == GOLDEN[command]
    assert summary["schema"] == f"bisimkit.{command}" and summary["schema_version"] == 1
    assert summary["seed"] == 7


def test_different_seed_changes_training_output(tmp_path):
    cfg = _config(tmp_path, TRAIN + GRID)
    _run("train", cfg, 1, tmp_path / "a")
    _run("train", cfg, 2, tmp_path / "b")
    assert (tmp_path / "a" / "train.csv").read_bytes() != (tmp_path / "b" / "train.csv").read_bytes()


def test_zero_steps_gives_header_only_csvs(tmp_path):
    cfg = _config(tmp_path, TRAIN.replace("total_steps = 60", "total_steps = 0") + GRID)
    assert _run("train", cfg, 0, tmp_path / "out") == 0
    out = tmp_path / "out"
    assert (out / "train.csv").read_text().count("\n") == 1
    assert (out / "eval.csv").read_text() == "step,mean_return\n"
    assert (out / "latents.csv").read_text() == "episode,step,obs_id,z_0,z_1\n"
    from bisimkit import DBCAgent

    assert DBCAgent.load(out / "checkpoint.json").steps_done_ == 0


def test_exact_on_duplicated_state_mdp(tmp_path):
    mdp = with_duplicate(absorbing_pair(gamma=0.9), 0)
    save_mdp(mdp, tmp_path / "m.json")
    cfg = _config(tmp_path, 'gamma = 0.9\nepsilons = [0.0]\n[env]\nfamily = "mdp_json"\npath = "m.json"\n')
    assert _run("exact", cfg, 0, tmp_path / "out") == 0
    bounds = json.loads((tmp_path / "out" / "bounds.json").read_text())
    assert bounds["max_gap"] == 0.0 and bounds["holds"] is True
    assert bounds["n_bisim_blocks"] == 2


def test_latent_dump_columns(tmp_path, trained):
    lines = (trained.parent / "latents.csv").read_text().splitlines()
    assert lines[0] == "episode,step,obs_id,z_0,z_1"
    assert len(lines) == 1 + 11
    assert all(len(line.split(",")) == 5 for line in lines)


@pytest.mark.parametrize(
    "text, message",
    [
        ("gamma = 2.0\n", "gamma"),
        ("bogus = 1\n", "unknown"),
        ('[env]\nfamily = "point_mass"\n', "continuous"),
        ('checkpoint = "missing.json"\n', "cannot load checkpoint"),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, text, message):
    command = "eval-corr" if "checkpoint" in text else "exact"
    assert _run(command, _config(tmp_path, text), 0, tmp_path / "out") == cli.EXIT_CONFIG
    assert message in capsys.readouterr().err


def test_negative_seed_exits_2(tmp_path):
    assert _run("exact", _config(tmp_path, GRID), -1, tmp_path / "out") == cli.EXIT_CONFIG


def test_numerical_abort_exits_3(tmp_path, monkeypatch, capsys):
    def explode(cfg, out_dir):
        raise NumericalError("critic loss became nan at step 5")

    monkeypatch.setattr(experiments, "run_train", explode)
    assert _run("train", _config(tmp_path, GRID), 0, tmp_path / "out") == cli.EXIT_NUMERICAL
    assert "step 5" in capsys.readouterr().err


def test_transfer_to_non_ancestor_variant_warns_and_runs(tmp_path, capsys):
    text = TRAIN.replace("eval_every = 30", "eval_every = 30\ntransfer_steps = 30") + PM.replace(
        "hold_velocity", "track_distractor"
    )
    assert _run("eval-transfer", _config(tmp_path, text), 0, tmp_path / "out") == 0
    assert "not causal" in capsys.readouterr().err
    assert json.loads((tmp_path / "out" / "transfer.json").read_text())["warnings"]


def test_console_script_entry_point(tmp_path):
    cfg = _config(tmp_path, "gamma = 5\n")
    proc = subprocess.run(
        [sys.executable, "-m", "bisimkit.cli", "exact", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "config error" in proc.stderr


def test_exact_metric_csv_round_trip(tmp_path):
    from bisimkit.bisim import read_metric_csv

    cfg = _config(tmp_path, "epsilons = [0.05]\n" + GRID)
    _run("exact", cfg, 0, tmp_path / "out")
    d = read_metric_csv(tmp_path / "out" / "metric.csv")
    assert d.shape == (8, 8) and np.allclose(d, d.T)
