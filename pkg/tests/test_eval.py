import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pal_loco import eval as ev
from pal_loco import nn
from pal_loco.env import COLLISION, SIM_FAULT, TIMEOUT, LocomotionEnv
from pal_loco.morphology import reference_robot
from pal_loco.ppo import PolicyBundle, load_policy


@pytest.fixture(scope="module")
def pal():
    return PolicyBundle.create("pal", np.random.default_rng(0))


@pytest.fixture(scope="module")
def moral():
    return PolicyBundle.create("moral", np.random.default_rng(1))


def make_log(cmd, meas, v_hat=None, v_true=None):
    cmd = np.asarray(cmd, float)
    meas = np.asarray(meas, float)
    z = np.zeros_like(cmd)
    return ev.TrackingLog(0.01 * np.arange(len(cmd)), cmd, meas,
                          z if v_hat is None else np.asarray(v_hat, float),
                          z if v_true is None else np.asarray(v_true, float))


# ---------------------------------------------------------------------------
# success rate


def test_success_rate_examples():
    assert ev.success_rate([TIMEOUT] * 100) == 1.0
    assert ev.success_rate([COLLISION] * 25 + [TIMEOUT] * 75) == 0.75
    assert ev.success_rate([COLLISION] * 100) == 0.0


def test_empty_outcomes_rejected():
    with pytest.raises(ev.MetricError):
        ev.success_rate([])


@given(st.lists(st.sampled_from([COLLISION, TIMEOUT, "command_end"]), min_size=1, max_size=300))
def test_success_rate_formula(outcomes):
    n_e = outcomes.count(COLLISION)
    assert ev.success_rate(outcomes) == 1.0 - n_e / len(outcomes)


# ---------------------------------------------------------------------------
# RMSE


def test_tracking_rmse_closed_forms():
    cmd = np.tile([0.5, -0.2, 0.3], (40, 1))
    assert ev.tracking_rmse(make_log(cmd, cmd)) == (0.0, 0.0, 0.0)
    bias = cmd + np.array([0.1, 0.0, 0.0])
    rx, ry, rw = ev.tracking_rmse(make_log(cmd, bias))
    assert abs(rx - 0.1) < 1e-12 and ry == 0.0 and rw == 0.0
    alt = np.zeros((40, 3))
    alt[:, 1] = np.where(np.arange(40) % 2 == 0, 0.3, -0.3)
    _, ry, _ = ev.tracking_rmse(make_log(np.zeros((40, 3)), alt))
    assert abs(ry - 0.3) < 1e-12


def test_estimator_rmse_noise_and_bias(rng):
    v = rng.normal(size=(100_000, 3))
    noise = 0.1 * rng.normal(size=v.shape)
    log_ = make_log(np.zeros_like(v), np.zeros_like(v), v + noise, v)
    assert all(abs(r - 0.1) < 0.003 for r in ev.estimator_rmse(log_))
    bias = np.array([0.05, -0.2, 0.0])
    log_ = make_log(np.zeros_like(v), np.zeros_like(v), v + bias + noise, v)
    for r, b in zip(ev.estimator_rmse(log_), bias):
        assert abs(r - math.hypot(b, 0.1)) < 0.003
    assert ev.estimator_rmse(make_log(v, v, v, v)) == (0.0, 0.0, 0.0)


def test_empty_log_rejected():
    with pytest.raises(ev.MetricError):
        ev.tracking_rmse(ev.TrackingLog.empty())
    with pytest.raises(ev.MetricError):
        ev.estimator_rmse(ev.TrackingLog.empty())


def test_metrics_recomputed_from_csv_are_identical(rng, tmp_path):
    log_ = make_log(*(rng.normal(size=(50, 3)) for _ in range(4)))
    log_.write_csv(tmp_path / "tracking.csv")
    back = ev.TrackingLog.read_csv(tmp_path / "tracking.csv")
    assert ev.tracking_rmse(back) == ev.tracking_rmse(log_)
    assert ev.estimator_rmse(back) == ev.estimator_rmse(log_)
    assert np.array_equal(back.t, log_.t)


# ---------------------------------------------------------------------------
# sweeps


def test_grid_parsing():
    g = ev.parse_grid("0.2:1.6:8")
    assert len(g) == 8 and g[0] == 0.2 and g[-1] == 1.6
    assert np.allclose(np.diff(g), 0.2)
    assert ev.parse_grid("0,10,20") == (0.0, 10.0, 20.0)
    with pytest.raises(ValueError):
        ev.parse_grid("0:1:0")


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        ev.RobustnessSweepSpec("gravity", (0.0,))
    with pytest.raises(ValueError):
        ev.RobustnessSweepSpec("friction", (1.0, 0.5))
    with pytest.raises(ValueError):
        ev.RobustnessSweepSpec("friction", (0.5,), n_rollouts=0)
    spec = ev.RobustnessSweepSpec.default("push_force")
    assert spec.n_rollouts == 100 and spec.command_scale == 0.75 and spec.command_hold == 4.0


def test_eval_commands_hold_for_four_seconds():
    cfg = ev.RobustnessSweepSpec("friction", (1.0,)).env_config(1.0)
    assert cfg.command_duration == (4.0, 4.0) and cfg.zero_command_prob == 0.0
    assert cfg.command_scale == 0.75


@pytest.mark.parametrize("delta", [-2.0, 2.5, 8.0])
def test_base_mass_delta_accounting(delta):
    model = reference_robot(1)
    spec = ev.RobustnessSweepSpec("base_mass_delta", (delta,))
    env = LocomotionEnv(model, np.random.default_rng(0), spec.env_config(delta))
    env.reset()
    p = model.params
    assert env.sim.total_mass == math.fsum([p.m_base + delta, *p.link_masses])


def test_friction_and_latency_overrides():
    model = reference_robot(1)
    env = LocomotionEnv(model, np.random.default_rng(0),
                        ev.RobustnessSweepSpec("friction", (0.3,)).env_config(0.3))
    env.reset()
    assert np.all(env.sim.pm.mu == 0.3)
    env = LocomotionEnv(model, np.random.default_rng(0),
                        ev.RobustnessSweepSpec("latency", (0.02,)).env_config(0.02))
    env.reset()
    assert env.sim.latency == 0.02


def test_push_protocol_schedules_windows():
    spec = ev.RobustnessSweepSpec("push_force", (30.0,), episode_steps=450)
    env = LocomotionEnv(reference_robot(1), np.random.default_rng(0), spec.env_config(30.0))
    env.reset()
    seen = {}
    for _ in range(450):
        done = env.step(np.zeros(12)).done
        seen.update(env.sim.pushes)  # expired windows are pruned by the simulator
        if done:
            break
    # one 0.2 s push every 2 s of episode time, 1 ms ticks
    assert sorted(seen) == [(2000, 2200), (4000, 4200)]
    assert all(np.isclose(np.linalg.norm(p.force), 30.0) and p.force[2] == 0.0
               for p in seen.values())


SMALL = dict(n_rollouts=3, episode_steps=60, seed=4)


def test_sweep_is_deterministic(pal):
    spec = ev.RobustnessSweepSpec("friction", (0.4, 1.0), **SMALL)
    a = ev.robustness_sweep(pal, reference_robot(1), spec)
    b = ev.robustness_sweep(pal, reference_robot(1), spec)
    assert a == b
    for p in a.points:
        assert p.sr == 1.0 - p.n_fail / p.n_total
        assert sum(p.causes.values()) == p.n_total + p.n_fault


def test_grid_points_are_independent(pal):
    model = reference_robot(1)
    spec = ev.RobustnessSweepSpec("base_mass_delta", (-2.0, 0.0, 4.0), **SMALL)
    full = ev.robustness_sweep(pal, model, spec).points
    for v in reversed(spec.grid):
        alone = ev.sweep_point(pal, model, spec, v)
        assert alone == next(p for p in full if p.value == v)


def test_sweep_csv(pal, tmp_path):
    spec = ev.RobustnessSweepSpec("latency", (0.0, 0.02), **SMALL)
    res = ev.robustness_sweep(pal, reference_robot(1), spec)
    res.write_csv(tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].split(",") == list(ev.SweepResult.COLUMNS)
    assert len(lines) == 3
    res.write_csv(tmp_path / "sweep.csv", append=True)
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 5


def test_faults_leave_the_denominator(monkeypatch, pal):
    fake = [ev.RolloutOutcome(c, 10, 0.0) for c in (COLLISION, TIMEOUT, SIM_FAULT, TIMEOUT)]
    monkeypatch.setattr(ev, "run_rollouts", lambda *a, **k: fake)
    p = ev.sweep_point(pal, reference_robot(1), ev.RobustnessSweepSpec("friction", (1.0,)), 1.0)
    assert (p.n_total, p.n_fail, p.n_fault) == (3, 1, 1)
    assert p.sr == 1.0 - 1 / 3


def test_evaluation_leaves_checkpoints_alone(pal, tmp_path):
    path = tmp_path / "policy.npz"
    nn.save_checkpoint(path, pal.modules(), meta={"variant": "pal", "learn_std": False})
    before = path.read_bytes()
    bundle = load_policy(path)
    params = [p.copy() for p in bundle.actor.params() + bundle.dim.params()]
    ev.tracking_run(bundle, reference_robot(1), seed=0, n_rollouts=2, episode_steps=40)
    assert path.read_bytes() == before
    after = bundle.actor.params() + bundle.dim.params()
    assert all(np.array_equal(x, y) for x, y in zip(params, after))


# ---------------------------------------------------------------------------
# tracking and zero-shot


def test_batched_rollouts_match_solo_runs(pal):
    model = reference_robot(1)
    cfg = ev.eval_env_config(episode_steps=50)
    seeds = ev.rollout_seeds(9, 3)
    together = ev.run_rollouts(pal, model, cfg, seeds, record=True)
    alone = ev.run_rollouts(pal, model, cfg, seeds[1:2], record=True)[0]
    # random streams are per rollout; only matmul rounding sees the batch size
    assert together[1].steps == alone.steps and together[1].cause == alone.cause
    assert np.array_equal(together[1].log.command, alone.log.command)
    assert abs(together[1].ret - alone.ret) < 1e-9 * abs(alone.ret)
    assert np.allclose(together[1].log.measured, alone.log.measured, atol=1e-9)


def test_tracking_log_timestamps_are_uniform(pal):
    log_, outs = ev.tracking_run(pal, reference_robot(1), seed=1, n_rollouts=1, episode_steps=50)
    assert len(log_) == outs[0].steps
    assert np.allclose(np.diff(log_.t), 0.01)


def test_zero_shot_rows_are_paired(pal, moral, tmp_path):
    bundles = {("pal", "1"): pal, ("moral", "1"): moral, ("pal", "1+4"): pal}
    models = {"a1_ref": reference_robot(1), "anymal_c_ref": reference_robot(5)}
    rows = ev.zero_shot_eval(bundles, models, n_rollouts=2, seed=3, episode_steps=40)
    assert len(rows) == len(bundles) * len(models)
    assert {r.seed for r in rows} == {3}
    # same seeds: identical commands for both variants wherever both are alive
    cfg = ev.eval_env_config(episode_steps=40)
    seeds = ev.rollout_seeds(3, 2)
    a = ev.run_rollouts(pal, models["a1_ref"], cfg, seeds, record=True)
    b = ev.run_rollouts(moral, models["a1_ref"], cfg, seeds, record=True)
    for x, y in zip(a, b):
        k = min(len(x.log), len(y.log))
        assert np.array_equal(x.log.command[:k], y.log.command[:k])
    ev.write_report_csv(rows, tmp_path / "report.csv")
    back = ev.read_report_csv(tmp_path / "report.csv")
    for r, s in zip(rows, back):
        for name in ev.REPORT_COLUMNS:
            u, v = getattr(r, name), getattr(s, name)
            assert u == v or (isinstance(u, float) and math.isnan(u) and math.isnan(v))


def test_schema_documents_every_column(tmp_path):
    ev.write_schema(tmp_path / "schema.json")
    schema = json.loads((tmp_path / "schema.json").read_text())
    documented = {c.strip() for k in schema["sweep.csv"] for c in k.split(",")}
    assert set(ev.SweepResult.COLUMNS) <= documented
    documented = {c.strip() for k in schema["report.csv"] for c in k.split(",")}
    assert set(ev.REPORT_COLUMNS) <= documented
    documented = {c.strip() for k in schema["tracking.csv"] for c in k.split(",")}
    assert set(ev.TrackingLog.COLUMNS) <= documented
