import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pal_loco import cli, nn
from pal_loco.morphology import RobotSet
from pal_loco.ppo import PolicyBundle

TINY_PPO = {"n_env": 4, "steps_per_iter": 16, "iterations_per_round": 25, "checkpoint_every": 0,
            "dim_transitions": 256, "dim_epochs": 1}


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(autouse=True)
def no_metrics_env(monkeypatch):
    monkeypatch.delenv(cli.METRICS_ENV, raising=False)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "policy.npz"
    b = PolicyBundle.create("pal", np.random.default_rng(0))
    nn.save_checkpoint(path, b.modules(), meta={"variant": "pal", "ref_ids": [1],
                                                "learn_std": False})
    return path


# ---------------------------------------------------------------------------
# gen-robots


def test_gen_robots_writes_fifty(tmp_path, capsys):
    out = tmp_path / "robots.json"
    assert run("gen-robots", "--refs", "1", "--count", 50, "--seed", 7, "--out", out) == 0
    rs = RobotSet.from_json(out.read_text())
    assert len(rs) == 50 and {r.params.ref_id for r in rs.robots} == {1}
    report = json.loads((tmp_path / "robots_report.json").read_text())
    assert report["robots"] == 50 and 0 < report["acceptance_rate"] <= 1
    assert "wrote 50 robots" in capsys.readouterr().out
    again = tmp_path / "again.json"
    run("gen-robots", "--refs", "1", "--count", 50, "--seed", 7, "--out", again)
    assert again.read_bytes() == out.read_bytes()


def test_unsupported_reference_is_usage_error(tmp_path, capsys):
    assert run("gen-robots", "--refs", "3", "--out", tmp_path / "r.json") == 2
    assert "reference id 3" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_generation_failure_exits_one(tmp_path, monkeypatch):
    from pal_loco.morphology import GenerationExhausted

    def boom(*a, **k):
        raise GenerationExhausted("no viable robot")

    monkeypatch.setattr(cli, "generate_robot_set", boom)
    assert run("gen-robots", "--refs", "1", "--out", tmp_path / "r.json") == 1


def test_bad_flags_exit_two():
    with pytest.raises(SystemExit) as e:
        run("gen-robots", "--count", "many")
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("fly")
    assert e.value.code == 2


# ---------------------------------------------------------------------------
# train


def write_config(path, **kw):
    doc = {"ppo": dict(TINY_PPO), **kw}
    path.write_text(json.dumps(doc))
    return path


def test_train_smoke_run(tmp_path):
    conf = write_config(tmp_path / "smoke.json", ppo={**TINY_PPO, "iterations": 50})
    out = tmp_path / "run"
    code = run("train", "--variant", "pal", "--ids", "1,2,4,5", "--config", conf,
               "--out-dir", out, "--quiet")
    assert code == 0
    r = rows(out / "train.csv")
    assert len(r) >= 50 and [int(x["iteration"]) for x in r] == list(range(50))
    eff = json.loads((out / "config.json").read_text())
    assert eff["ids"] == [1, 2, 4, 5] and eff["variant"] == "pal"
    assert eff["ppo"]["n_env"] == 4 and eff["ppo"]["gamma"] == 0.9962
    assert (out / "checkpoints" / "policy.npz").exists()
    # two encoder rounds for 50 iterations at 25 per round
    assert {x["round"] for x in rows(out / "dim.csv")} == {"bootstrap", "round1"}


def test_resume_numbers_contiguously(tmp_path):
    conf = write_config(tmp_path / "c.json")
    out = tmp_path / "run"
    assert run("train", "--config", conf, "--iterations", 3, "--out-dir", out, "--quiet") == 0
    assert run("train", "--config", conf, "--iterations", 5, "--out-dir", out, "--resume",
               "--quiet") == 0
    assert [int(x["iteration"]) for x in rows(out / "train.csv")] == [0, 1, 2, 3, 4]


def test_resume_without_checkpoint_fails(tmp_path):
    assert run("train", "--out-dir", tmp_path / "none", "--resume", "--quiet") == 1


def test_moral_variant_checkpoint(tmp_path):
    conf = write_config(tmp_path / "c.json", variant="moral")
    out = tmp_path / "run"
    assert run("train", "--config", conf, "--iterations", 2, "--out-dir", out, "--quiet") == 0
    mods, meta, _ = nn.load_checkpoint(out / "checkpoints" / "policy.npz")
    assert meta["variant"] == "moral" and "moral" in mods and "dim" not in mods
    assert not (out / "dim.csv").exists()


def test_train_rerun_is_byte_identical(tmp_path):
    conf = write_config(tmp_path / "c.json", seed=11)
    for name in ("a", "b"):
        assert run("train", "--config", conf, "--iterations", 2, "--out-dir", tmp_path / name,
                   "--quiet") == 0
    for f in ("train.csv", "dim.csv", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeds": 3}))
    assert run("train", "--config", bad) == 2
    bad.write_text(json.dumps({"ppo": {"gama": 0.9}}))
    assert run("train", "--config", bad) == 2
    bad.write_text("{not json")
    assert run("train", "--config", bad) == 2
    assert run("train", "--config", tmp_path / "missing.json") == 1
    assert run("train", "--robots", tmp_path / "missing.json", "--out-dir", tmp_path / "o",
               "--quiet") == 1


def test_run_config_defaults_documented():
    d = cli.RunConfig()
    assert d.variant == "pal" and d.ids == [1] and d.seed == 0 and d.robots is None
    assert cli.RunConfig.from_dict({"ids": "1,4"}).ids == [1, 4]


def test_smoke_defaults():
    s = cli.SMOKE_PPO
    assert s["n_env"] == 16 and s["iterations"] >= 300


def test_metrics_dir_env_override(tmp_path, monkeypatch):
    conf = write_config(tmp_path / "c.json")
    monkeypatch.setenv(cli.METRICS_ENV, str(tmp_path / "env_dir"))
    assert run("train", "--config", conf, "--iterations", 1, "--out-dir", tmp_path / "flag",
               "--quiet") == 0
    assert (tmp_path / "env_dir" / "train.csv").exists()
    assert not (tmp_path / "flag").exists()


# ---------------------------------------------------------------------------
# eval


def test_friction_sweep_rows(tmp_path, checkpoint, capsys):
    out = tmp_path / "ev"
    code = run("eval", "--checkpoint", checkpoint, "--sweep", "friction", "--grid", "0.2:1.6:8",
               "--n-rollouts", 1, "--out-dir", out)
    assert code == 0
    r = rows(out / "sweep.csv")
    assert len(r) == 8
    assert [float(x["value"]) for x in r] == pytest.approx(list(np.linspace(0.2, 1.6, 8)))
    assert (out / "schema.json").exists()
    assert capsys.readouterr().out.count("SR") == 8


def test_tracking_prints_rmse(tmp_path, checkpoint, capsys):
    out = tmp_path / "ev"
    code = run("eval", "--checkpoint", checkpoint, "--tracking", "--robot", "anymal_c_ref",
               "--n-rollouts", 1, "--out-dir", out)
    assert code == 0
    text = capsys.readouterr().out
    assert "tracking RMSE (anymal_c_ref)" in text and "estimator RMSE" in text
    assert len(rows(out / "tracking.csv")) > 0
    assert [x["axis"] for x in rows(out / "estimator.csv")] == ["x", "y", "z"]


def test_zero_shot_report(tmp_path, checkpoint):
    out = tmp_path / "ev"
    code = run("eval", "--checkpoint", checkpoint, "--checkpoint", checkpoint.parent,
               "--zero-shot", "--robot", "a1_ref", "--robot", "anymal_c_ref",
               "--n-rollouts", 1, "--out-dir", out)
    assert code == 0
    r = rows(out / "report.csv")
    # both checkpoints carry the same (variant, ids) key, so they collapse to one bundle
    assert len(r) == 2 and {x["eval_model"] for x in r} == {"a1_ref", "anymal_c_ref"}


def test_eval_errors(tmp_path, checkpoint):
    assert run("eval", "--checkpoint", tmp_path / "nope.npz", "--tracking") == 1
    assert run("eval", "--checkpoint", checkpoint, "--out-dir", tmp_path / "e") == 2
    assert run("eval", "--checkpoint", checkpoint, "--tracking", "--robot", "spot",
               "--out-dir", tmp_path / "e") == 2


def test_eval_rerun_is_byte_identical(tmp_path, checkpoint):
    for name in ("a", "b"):
        run("eval", "--checkpoint", checkpoint, "--sweep", "latency", "--grid", "0,0.02",
            "--n-rollouts", 2, "--out-dir", tmp_path / name)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


# ---------------------------------------------------------------------------
# inspect-robot and help


def test_inspect_robot(capsys, tmp_path):
    assert run("inspect-robot", "--robot", "a1_ref") == 0
    out = capsys.readouterr().out
    assert "nominal base height r_n" in out and "total mass" in out
    assert run("inspect-robot", "--robot", "spot") == 2
    run("gen-robots", "--refs", "4", "--count", 2, "--seed", 1, "--out", tmp_path / "r.json")
    assert run("inspect-robot", "--robots", tmp_path / "r.json", "--index", 1) == 0
    assert run("inspect-robot", "--robots", tmp_path / "r.json", "--index", 5) == 2


def test_help_lists_every_flag():
    parser = cli.build_parser()
    subs = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(subs.choices) == {"gen-robots", "train", "eval", "inspect-robot"}
    for name, sp in subs.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text
            assert action.help, f"{name} {action.option_strings} lacks help"


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "pal_loco.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("gen-robots", "train", "eval", "inspect-robot"):
        assert cmd in res.stdout
