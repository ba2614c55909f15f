import json

import numpy as np
import pytest

from entropylab import cli, runner
from entropylab.config import (ConfigError, ExperimentConfig, env_overrides, list_presets, load_config,
                               parse_config)
from entropylab.env import make_episode

SHORT = {"train.steps": "6", "train.group_size": "4", "diagnostics.every": "2",
         "diagnostics.exact_entropy": "false", "diagnostics.heldout_groups": "2", "run.checkpoint_every": "3"}


@pytest.fixture
def short_config(tmp_path):
    cfg = load_config("micro-exact").with_overrides(SHORT)
    path = tmp_path / "short.conf"
    path.write_text(cfg.to_text())
    return path


# ---------------------------------------------------------------- config

def test_presets_are_shipped_and_parse():
    assert {"micro-exact", "small-dynamics"} <= set(list_presets())
    for name in list_presets():
        cfg = load_config(name)
        assert cfg.architecture().vocab_size == cfg.spec().vocab_size


def test_text_round_trip():
    cfg = load_config("small-dynamics")
    assert parse_config(cfg.to_text()) == cfg


def test_parse_comments_and_types():
    cfg = parse_config("# c\ntrain.learning_rate = 0.25  # inline\nenv.think = yes\nenv.num_fillers = 3\n"
                       "policy.context_window = 8\n")
    assert cfg.train.learning_rate == 0.25 and cfg.env.think is True and cfg.env.num_fillers == 3


@pytest.mark.parametrize("text,needle", [
    ("train.learning_rate = fast", "train.learning_rate"),
    ("nosection = 1", "unknown section"),
    ("train.momentum = 0.9", "unknown field"),
    ("train.steps 5", "line 1"),
    ("train.steps = 1\ntrain.steps = 2", "duplicate"),
    ("train.learning_rate = -1", "learning_rate"),
    ("policy.context_window = 4", "context_window"),
    ("diagnostics.every = 0", "diagnostics.every"),
    ("env.num_fillers = 2", "num_fillers"),
])
def test_config_errors_are_field_level(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_environment_overrides():
    env = {"ELAB_TRAIN__LEARNING_RATE": "0.125", "elab_diagnostics__every": "5", "OTHER": "x"}
    assert env_overrides(env) == {"train.learning_rate": "0.125", "diagnostics.every": "5"}
    cfg = load_config("micro-exact", environ=env, seed=9, out="somewhere")
    assert cfg.train.learning_rate == 0.125 and cfg.diagnostics.every == 5
    assert cfg.train.seed == 9 and cfg.run.out == "somewhere"


def test_unknown_preset():
    with pytest.raises(ConfigError, match="presets"):
        load_config("no-such-preset")


def test_cli_reports_config_errors(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("ELAB_ENV__NUM_KEYS", "lots")
    assert cli.main(["train", "--out", str(tmp_path / "r")]) == 2
    assert "env.num_keys" in capsys.readouterr().err


# ---------------------------------------------------------------- train

def _lines(path):
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]


def test_zero_steps_emit_initial_metrics_only(short_config, tmp_path, monkeypatch):
    monkeypatch.setenv("ELAB_TRAIN__STEPS", "0")
    out = tmp_path / "zero"
    assert cli.main(["train", "--config", str(short_config), "--out", str(out)]) == 0
    recs = _lines(out / "metrics.jsonl")
    assert len(recs) == 1 and recs[0]["step"] == 0
    assert "loss_total" not in recs[0]
    assert (out / "episodes.jsonl").read_text() == ""
    dest = tmp_path / "empty.jsonl"
    assert cli.main(["export-trajectories", str(out), "--out", str(dest)]) == 0
    assert dest.read_text() == ""


def test_run_artifacts_and_schema(short_config, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(short_config), "--out", str(out)]) == 0
    recs = _lines(out / "metrics.jsonl")
    assert [r["step"] for r in recs] == [0, 2, 4, 6]
    for r in recs:
        assert set(r) <= set(runner.METRIC_FIELDS)
        assert all(v is not None for v in r.values())
    assert "trajectory_entropy" not in recs[0]
    names = sorted(p.name for p in (out / "snapshots").iterdir())
    assert names == [f"step_{s:06d}.{ext}" for s in (0, 3, 6) for ext in ("head.npz", "policy")]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "completed" and summary["steps_completed"] == 6


def test_runs_are_deterministic(short_config, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(short_config), "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.jsonl", "episodes.jsonl", "snapshots/step_000006.policy"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seed_changes_the_run(short_config, tmp_path):
    cli.main(["train", "--config", str(short_config), "--out", str(tmp_path / "a")])
    cli.main(["train", "--config", str(short_config), "--seed", "5", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "episodes.jsonl").read_bytes() != (tmp_path / "b" / "episodes.jsonl").read_bytes()


def test_exact_entropy_fields_when_enumerable(tmp_path):
    cfg = load_config("micro-exact").with_overrides(SHORT | {"train.steps": "1", "diagnostics.exact_entropy": "true"})
    runner.train(cfg, tmp_path / "x")
    rec = runner.read_metrics(tmp_path / "x")[0]
    assert 0 < rec["trajectory_entropy"] <= np.log(sum(9 ** k for k in range(6)) + 9 ** 6)
    assert 0 <= rec["p_fmt"] <= 1 and 0 <= rec["p_sem"] <= 1


def test_nonfinite_loss_aborts_and_keeps_partial_artifacts(short_config, tmp_path, capsys):
    out = tmp_path / "bad"
    assert cli.main(["train", "--config", str(short_config), "--out", str(out), "--fault-inject", "nonfinite@3"]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "aborted" and summary["steps_completed"] == 3
    assert len(_lines(out / "episodes.jsonl")) == 3 * 4
    assert "non-finite" in capsys.readouterr().err


# ---------------------------------------------------------------- export

def test_export_round_trip(short_config, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(short_config), "--out", str(out)])
    assert cli.main(["export-trajectories", str(out)]) == 0
    rows = _lines(out / "trajectories.jsonl")
    assert len(rows) == 6 * 4
    spec = load_config(str(short_config)).spec()
    for row in rows:
        assert tuple(row) == tuple(sorted(runner.EPISODE_FIELDS))
        ep = make_episode(spec, row["prompt"], row["response"])
        assert (ep.r_fmt, ep.r_sem, ep.reward) == (row["r_fmt"], row["r_sem"], row["reward"])
        assert abs(sum(row["token_log_probs"]) - row["log_likelihood"]) < 1e-12
    # exporting twice rewrites rather than duplicating
    cli.main(["export-trajectories", str(out)])
    assert len(_lines(out / "trajectories.jsonl")) == 24


def test_export_missing_run(tmp_path):
    assert cli.main(["export-trajectories", str(tmp_path / "nothing")]) == 1


# ---------------------------------------------------------------- compare

def test_compare_cardinality_and_zero_control(short_config, tmp_path):
    cfg = load_config(str(short_config)).with_overrides({"train.steps": "2"})
    rep = runner.compare(cfg, [0.0, 0.5], [0, 1, 2], tmp_path / "cmp")
    assert rep["labels"] == ["0", "0.5"] and len(rep["paired_deltas"]["0.5"]) == 3
    assert len(list((tmp_path / "cmp").glob("alpha_*/seed_*/metrics.jsonl"))) == 6
    ctl = runner.compare(cfg, [0.0, 0.0], [0, 1], tmp_path / "ctl")
    for row in ctl["paired_deltas"]["0_2"]:
        assert all(v == 0.0 for k, v in row.items() if k != "seed" and v is not None)
    with pytest.raises(ValueError):
        runner.compare(cfg, [0.5, 1.0], [0], tmp_path / "no")


def test_compare_cli_rejects_missing_zero(short_config, tmp_path):
    assert cli.main(["compare", "--config", str(short_config), "--alphas", "0.5", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------- check-lemmas

LEMMA_FAST = {"lemmas.seeds": "1", "lemmas.snapshots": "1", "lemmas.corollary_trials": "10"}


def test_check_lemmas_refuses_unenumerable_spec(tmp_path, capsys):
    assert cli.main(["check-lemmas", "--config", "small-dynamics", "--out", str(tmp_path)]) == 2
    assert "exceeds" in capsys.readouterr().err


def test_check_lemmas_fault_injection_names_the_failed_identity(tmp_path, monkeypatch):
    for k, v in LEMMA_FAST.items():
        monkeypatch.setenv("ELAB_" + k.replace(".", "__").upper(), v)
    assert cli.main(["check-lemmas", "--out", str(tmp_path), "--fault-inject", "wblock"]) == 1
    report = json.loads((tmp_path / "lemma_report.json").read_text())
    assert "w_block_token_pair_identity" in report["failed_checks"]
    assert "gradient_vs_finite_differences" not in report["failed_checks"]
