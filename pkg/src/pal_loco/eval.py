"""Success-rate sweeps, tracking and estimator RMSE, zero-shot reports."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .env import COLLISION, SIM_FAULT, EnvConfig, LocomotionEnv
from .morphology import RobotModel

log = logging.getLogger(__name__)

SWEEP_KINDS = ("push_force", "friction", "latency", "base_mass_delta")
DEFAULT_GRIDS = {
    "push_force": (0.0, 20.0, 40.0, 60.0, 80.0, 100.0),
    "friction": tuple(np.linspace(0.2, 1.6, 8).round(10)),
    "latency": (0.0, 0.01, 0.02, 0.03, 0.04),
    "base_mass_delta": (-2.0, 0.0, 2.0, 4.0, 6.0, 8.0),
}


class MetricError(ValueError):
    pass


def success_rate(outcomes: Sequence[str]) -> float:
    """1 - N_e / N_T, where N_e counts prohibited-collision terminations."""
    if len(outcomes) == 0:
        raise MetricError("success rate of zero rollouts")
    n_fail = sum(1 for c in outcomes if c == COLLISION)
    return 1.0 - n_fail / len(outcomes)


# ----------------------------------------------------------------------------
# Logs and RMSE


@dataclass
class TrackingLog:
    """Per control step: command, measured twist, estimated and true velocity."""

    t: np.ndarray  # (T,)
    command: np.ndarray  # (T, 3) v_x, v_y, yaw rate
    measured: np.ndarray  # (T, 3) body-frame v_x, v_y, yaw rate
    v_hat: np.ndarray  # (T, 3)
    v_true: np.ndarray  # (T, 3)

    COLUMNS = ("t", "cmd_vx", "cmd_vy", "cmd_wz", "meas_vx", "meas_vy", "meas_wz",
               "est_vx", "est_vy", "est_vz", "true_vx", "true_vy", "true_vz")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls) -> "TrackingLog":
        z = np.zeros((0, 3))
        return cls(np.zeros(0), z, z.copy(), z.copy(), z.copy())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for i in range(len(self)):
                row = [self.t[i], *self.command[i], *self.measured[i], *self.v_hat[i],
                       *self.v_true[i]]
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def read_csv(cls, path) -> "TrackingLog":
        a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if a.size == 0:
            return cls.empty()
        return cls(a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7:10], a[:, 10:13])


def _rmse(residual: np.ndarray) -> tuple[float, float, float]:
    if len(residual) == 0:
        raise MetricError("RMSE of an empty log")
    return tuple(float(x) for x in np.sqrt(np.mean(np.square(residual), axis=0)))


def tracking_rmse(log_: TrackingLog) -> tuple[float, float, float]:
    """(x, y, yaw-rate) root-mean-square of command minus measured."""
    return _rmse(log_.command - log_.measured)


def estimator_rmse(log_: TrackingLog) -> tuple[float, float, float]:
    return _rmse(log_.v_hat - log_.v_true)


# ----------------------------------------------------------------------------
# Batched evaluation rollouts


@dataclass
class RolloutOutcome:
    cause: str
    steps: int
    ret: float
    log: TrackingLog | None = None


def eval_env_config(command_scale: float = 0.75, command_hold: float = 4.0,
                    episode_steps: int = 600, **overrides) -> EnvConfig:
    return replace(EnvConfig(), command_scale=command_scale,
                   command_duration=(command_hold, command_hold), zero_command_prob=0.0,
                   max_steps=episode_steps, **overrides)


def run_rollouts(bundle, model: RobotModel, env_config: EnvConfig, seeds: Sequence,
                 record: bool = False, deterministic: bool = True,
                 policy_seed: int | None = None) -> list[RolloutOutcome]:
    """One episode per seed, stepped in lockstep so the networks run batched.

    Each env draws its initial state, commands and push directions from its
    own seed; batch composition only reaches the results through the
    rounding of batched matrix products.
    """
    n = len(seeds)
    envs = [LocomotionEnv(model, np.random.default_rng(s), env_config) for s in seeds]
    core = np.stack([e.reset().core for e in envs])
    state = bundle.initial_state(n)
    alive = np.ones(n, bool)
    outcomes: list[RolloutOutcome | None] = [None] * n
    rng = None if deterministic else np.random.default_rng(policy_seed)
    logs = [[] for _ in range(n)] if record else None
    rets = np.zeros(n)
    while alive.any():
        idx = np.flatnonzero(alive)
        sub_state = type(state)(state.h[idx], state.prev_latent[idx])
        act = bundle.act(core[idx], sub_state, rng, deterministic=deterministic)
        done = np.zeros(len(idx), bool)
        for j, i in enumerate(idx):
            env = envs[i]
            cmd = env.cmd.vector.copy()
            r = env.step(act.action[j])
            rets[i] += r.reward.total
            if record and r.cause != SIM_FAULT:
                _, w_b = env.sim.state.body_twist()
                logs[i].append((env.episode.step * env_config.dt, cmd,
                                np.array([r.true_lin_vel[0], r.true_lin_vel[1], w_b[2]]),
                                act.v_hat[j], r.true_lin_vel))
            core[i] = r.obs.core
            if r.done:
                done[j] = True
                alive[i] = False
                outcomes[i] = RolloutOutcome(r.cause, env.episode.step, float(rets[i]))
        nxt = bundle.advance(act, done)
        state.h[idx] = nxt.h
        state.prev_latent[idx] = nxt.prev_latent
    if record:
        for i, rows in enumerate(logs):
            if rows:
                outcomes[i].log = TrackingLog(np.array([r[0] for r in rows]),
                                              np.stack([r[1] for r in rows]),
                                              np.stack([r[2] for r in rows]),
                                              np.stack([r[3] for r in rows]),
                                              np.stack([r[4] for r in rows]))
            else:
                outcomes[i].log = TrackingLog.empty()
    return outcomes


def rollout_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Common random numbers: rollout i uses the same stream at every grid point."""
    return np.random.SeedSequence(seed).spawn(n)


# ----------------------------------------------------------------------------
# Robustness sweeps


@dataclass(frozen=True)
class RobustnessSweepSpec:
    kind: str
    grid: tuple[float, ...]
    n_rollouts: int = 100
    command_scale: float = 0.75
    command_hold: float = 4.0
    episode_steps: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ValueError(f"unknown sweep kind {self.kind!r}; expected one of {SWEEP_KINDS}")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")
        g = tuple(float(x) for x in self.grid)
        if not g or list(g) != sorted(g):
            raise ValueError("sweep grid must be non-empty and sorted")
        object.__setattr__(self, "grid", g)

    @classmethod
    def default(cls, kind: str, **kw) -> "RobustnessSweepSpec":
        return cls(kind, DEFAULT_GRIDS[kind], **kw)

    def env_config(self, value: float) -> EnvConfig:
        over = {
            "push_force": {"push_force": value, "push_period": 2.0, "push_duration": 0.2},
            "friction": {"mu_override": value},
            "latency": {"latency_override": value},
            "base_mass_delta": {"base_mass_delta": value},
        }[self.kind]
        return eval_env_config(self.command_scale, self.command_hold, self.episode_steps, **over)


@dataclass
class SweepPoint:
    value: float
    sr: float
    n_fail: int
    n_total: int
    n_fault: int
    causes: dict[str, int]
    seed: int


@dataclass
class SweepResult:
    kind: str
    points: list[SweepPoint] = field(default_factory=list)

    COLUMNS = ("kind", "value", "SR", "n_fail", "n_total", "n_fault", "seed")

    def write_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(self.COLUMNS)
            for p in self.points:
                w.writerow([self.kind, repr(p.value), repr(p.sr), p.n_fail, p.n_total,
                            p.n_fault, p.seed])

    @property
    def srs(self) -> list[float]:
        return [p.sr for p in self.points]


def sweep_point(bundle, model: RobotModel, spec: RobustnessSweepSpec, value: float) -> SweepPoint:
    outs = run_rollouts(bundle, model, spec.env_config(value),
                        rollout_seeds(spec.seed, spec.n_rollouts))
    causes = Counter(o.cause for o in outs)
    valid = [o.cause for o in outs if o.cause != SIM_FAULT]
    n_fault = len(outs) - len(valid)
    if n_fault:
        log.warning("%d simulator faults at %s=%g excluded from N_T", n_fault, spec.kind, value)
    sr = success_rate(valid) if valid else float("nan")
    return SweepPoint(value, sr, causes.get(COLLISION, 0), len(valid), n_fault,
                      dict(sorted(causes.items())), spec.seed)


def robustness_sweep(bundle, model: RobotModel, spec: RobustnessSweepSpec,
                     progress: Callable[[SweepPoint], None] | None = None) -> SweepResult:
    res = SweepResult(spec.kind)
    for v in spec.grid:
        p = sweep_point(bundle, model, spec, v)
        res.points.append(p)
        if progress is not None:
            progress(p)
    return res


def parse_grid(text: str) -> tuple[float, ...]:
    """``lo:hi:n`` (inclusive linspace) or a comma list."""
    if ":" in text:
        lo, hi, n = text.split(":")
        n = int(n)
        if n < 1:
            raise ValueError("grid point count must be >= 1")
        return tuple(float(x) for x in np.linspace(float(lo), float(hi), n).round(12))
    return tuple(float(x) for x in text.split(","))


# ----------------------------------------------------------------------------
# Tracking and zero-shot


def tracking_run(bundle, model: RobotModel, seed: int = 0, n_rollouts: int = 1,
                 command_scale: float = 0.75, command_hold: float = 4.0,
                 episode_steps: int = 600) -> tuple[TrackingLog, list[RolloutOutcome]]:
    cfg = eval_env_config(command_scale, command_hold, episode_steps)
    outs = run_rollouts(bundle, model, cfg, rollout_seeds(seed, n_rollouts), record=True)
    logs = [o.log for o in outs if o.log is not None and len(o.log)]
    if not logs:
        return TrackingLog.empty(), outs
    cat = TrackingLog(np.concatenate([l.t for l in logs]),
                      np.concatenate([l.command for l in logs]),
                      np.concatenate([l.measured for l in logs]),
                      np.concatenate([l.v_hat for l in logs]),
                      np.concatenate([l.v_true for l in logs]))
    return cat, outs


REPORT_COLUMNS = ("variant", "id_set", "eval_model", "seed", "n_rollouts", "SR",
                  "rmse_vx", "rmse_vy", "rmse_wz", "est_rmse_x", "est_rmse_y", "est_rmse_z",
                  "mean_episode_steps")


@dataclass
class ReportRow:
    variant: str
    id_set: str
    eval_model: str
    seed: int
    n_rollouts: int
    SR: float
    rmse_vx: float
    rmse_vy: float
    rmse_wz: float
    est_rmse_x: float
    est_rmse_y: float
    est_rmse_z: float
    mean_episode_steps: float


def zero_shot_eval(bundles: Mapping[tuple[str, str], object], eval_models: Mapping[str, RobotModel],
                   n_rollouts: int = 100, seed: int = 0, command_scale: float = 0.75,
                   command_hold: float = 4.0, episode_steps: int = 600) -> list[ReportRow]:
    """One row per (variant, id set) bundle and evaluation model.

    Every bundle sees the same rollout seeds on a given model, so rows are
    paired comparisons.
    """
    rows = []
    for (variant, id_set), bundle in bundles.items():
        for name, model in eval_models.items():
            tlog, outs = tracking_run(bundle, model, seed, n_rollouts, command_scale,
                                      command_hold, episode_steps)
            valid = [o.cause for o in outs if o.cause != SIM_FAULT]
            sr = success_rate(valid) if valid else float("nan")
            tr = tracking_rmse(tlog) if len(tlog) else (float("nan"),) * 3
            es = estimator_rmse(tlog) if len(tlog) else (float("nan"),) * 3
            rows.append(ReportRow(variant, id_set, name, seed, len(valid), sr, *tr, *es,
                                  float(np.mean([o.steps for o in outs]))))
    return rows


def write_report_csv(rows: Sequence[ReportRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (getattr(r, c) for c in REPORT_COLUMNS)])


def read_report_csv(path) -> list[ReportRow]:
    out = []
    with open(path, newline="") as f:
        for d in csv.DictReader(f):
            out.append(ReportRow(d["variant"], d["id_set"], d["eval_model"], int(d["seed"]),
                                 int(d["n_rollouts"]),
                                 *[float(d[c]) for c in REPORT_COLUMNS[5:]]))
    return out


SCHEMA = {
    "sweep.csv": {
        "kind": "perturbation kind: push_force | friction | latency | base_mass_delta",
        "value": "grid value (N, unitless friction coefficient, s, kg)",
        "SR": "success rate 1 - n_fail / n_total",
        "n_fail": "rollouts ended by a prohibited collision",
        "n_total": "rollouts counted (simulator faults excluded)",
        "n_fault": "rollouts ended by a simulator fault",
        "seed": "base seed of the rollout streams",
    },
    "tracking.csv": {
        "t": "time since episode start (s)",
        "cmd_vx, cmd_vy, cmd_wz": "commanded body velocity (m/s, m/s, rad/s)",
        "meas_vx, meas_vy, meas_wz": "simulated body-frame velocity and yaw rate",
        "est_vx, est_vy, est_vz": "velocity estimator output (m/s)",
        "true_vx, true_vy, true_vz": "simulated body-frame linear velocity (m/s)",
    },
    "estimator.csv": {
        "axis": "x | y | z",
        "rmse": "root-mean-square of estimate minus truth (m/s)",
    },
    "report.csv": {
        "variant": "pal | moral",
        "id_set": "training reference ids, e.g. 1+2+4+5",
        "eval_model": "evaluation robot name",
        "seed": "evaluation seed (shared across variants)",
        "n_rollouts": "rollouts counted",
        "SR": "success rate",
        "rmse_vx, rmse_vy, rmse_wz": "command tracking RMSE",
        "est_rmse_x, est_rmse_y, est_rmse_z": "velocity estimator RMSE",
        "mean_episode_steps": "mean rollout length in control steps",
    },
}


def write_schema(path) -> None:
    Path(path).write_text(json.dumps(SCHEMA, indent=1, sort_keys=True) + "\n")
