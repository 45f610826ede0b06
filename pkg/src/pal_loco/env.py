"""Velocity-tracking locomotion MDP around one simulated robot.

Observation layout (policy view, 168 entries)::

    0:3     base z-axis in base frame (roll/pitch)
    3:6     base linear velocity, base frame (estimated at deployment)
    6:9     base angular velocity, base frame
    9:21    joint positions
    21:33   joint velocities
    33:45   joint target error q_des - q_n
    45:57   nominal joint positions q_n
    57:60   velocity command (v_x, v_y, w_z)
    60:84   joint positions at t-1, t-2
    84:108  joint velocities at t-1, t-2
    108:132 joint target errors at t-1, t-2
    132:168 latent dynamics

The estimator view (165) drops the linear velocity slot; the dynamics
encoder input (45) is the first 45 entries of the policy view.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import SimConfig, SimulationError, Simulator, StepInfo, collision_query
from .morphology import RobotModel

log = logging.getLogger(__name__)

CMD_LIMITS = np.array([1.0, 0.75, 1.5])
CMD_DURATION = (3.0, 6.0)
EPISODE_STEPS = 600
LATENT_DIM = 36
CORE_DIM = 132
OBS_DIM = CORE_DIM + LATENT_DIM
EST_DIM = OBS_DIM - 3
DIM_INPUT = 45

OBS_LAYOUT: dict[str, slice] = {
    "gravity_axis": slice(0, 3),
    "lin_vel": slice(3, 6),
    "ang_vel": slice(6, 9),
    "joint_pos": slice(9, 21),
    "joint_vel": slice(21, 33),
    "target_error": slice(33, 45),
    "nominal": slice(45, 57),
    "command": slice(57, 60),
    "joint_pos_hist": slice(60, 84),
    "joint_vel_hist": slice(84, 108),
    "target_error_hist": slice(108, 132),
    "latent": slice(132, 168),
}

# Fixed per-term input scales applied by the networks (not by the env).
OBS_SCALE_TERMS = {
    "gravity_axis": 1.0, "lin_vel": 2.0, "ang_vel": 0.25, "joint_pos": 1.0, "joint_vel": 0.05,
    "target_error": 1.0, "nominal": 1.0, "command": 1.0, "joint_pos_hist": 1.0,
    "joint_vel_hist": 0.05, "target_error_hist": 1.0, "latent": 1.0,
}


def obs_scale() -> np.ndarray:
    s = np.empty(OBS_DIM)
    for name, sl in OBS_LAYOUT.items():
        s[sl] = OBS_SCALE_TERMS[name]
    return s


def estimator_scale() -> np.ndarray:
    return estimator_view(obs_scale()[None])[0]


class ObservationError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Commands


@dataclass
class Command:
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0
    remaining: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.wz])

    @property
    def is_zero(self) -> bool:
        return self.vx == 0.0 and self.vy == 0.0 and self.wz == 0.0


def sample_command(rng: np.random.Generator, scale: float = 1.0, zero_prob: float = 0.0,
                   duration: tuple[float, float] = CMD_DURATION) -> Command:
    v = rng.uniform(-1.0, 1.0, 3) * CMD_LIMITS * scale
    hold = float(rng.uniform(*duration))
    if zero_prob > 0.0 and rng.random() < zero_prob:
        v[:] = 0.0
    return Command(float(v[0]), float(v[1]), float(v[2]), hold)


# ----------------------------------------------------------------------------
# Episode bookkeeping


@dataclass
class EpisodeState:
    step: int = 0
    t_swing: np.ndarray = field(default_factory=lambda: np.zeros(4))
    t_stance: np.ndarray = field(default_factory=lambda: np.zeros(4))
    contact: np.ndarray = field(default_factory=lambda: np.zeros(4, bool))
    q_des: np.ndarray = field(default_factory=lambda: np.zeros(12))  # latest target
    q_des_prev: np.ndarray = field(default_factory=lambda: np.zeros(12))
    q_des_prev2: np.ndarray = field(default_factory=lambda: np.zeros(12))
    hist_q: np.ndarray = field(default_factory=lambda: np.zeros((2, 12)))
    hist_qd: np.ndarray = field(default_factory=lambda: np.zeros((2, 12)))
    hist_err: np.ndarray = field(default_factory=lambda: np.zeros((2, 12)))
    done: bool = False
    cause: str = ""
    ret: float = 0.0

    def update_air_time(self, contact: np.ndarray, dt: float) -> None:
        """Timers restart from zero on the step a transition is observed."""
        contact = np.asarray(contact, bool)
        touchdown = contact & ~self.contact
        takeoff = ~contact & self.contact
        self.t_stance = np.where(contact, np.where(touchdown, 0.0, self.t_stance + dt), 0.0)
        self.t_swing = np.where(~contact, np.where(takeoff, 0.0, self.t_swing + dt), 0.0)
        self.contact = contact.copy()


# ----------------------------------------------------------------------------
# Observations


@dataclass
class ObservationBundle:
    core: np.ndarray  # (132,) policy view without the latent, true velocity

    def s_t(self, latent: np.ndarray | None = None, lin_vel: np.ndarray | None = None):
        return policy_view(self.core[None], None if latent is None else latent[None],
                           None if lin_vel is None else lin_vel[None])[0]

    def s_e(self, latent: np.ndarray | None = None) -> np.ndarray:
        return estimator_view(self.s_t(latent)[None])[0]

    def x_t(self, lin_vel: np.ndarray | None = None) -> np.ndarray:
        return dim_input(self.core[None], None if lin_vel is None else lin_vel[None])[0]


def assemble_observation(model: RobotModel, state, cmd: Command, episode: EpisodeState
                         ) -> ObservationBundle:
    qn = model.nominal
    v_b, w_b = state.body_twist()
    qj, qdj = state.q[7:], state.u[6:]
    err = episode.q_des - qn
    core = np.concatenate([
        state.gravity_axis(), v_b, w_b, qj, qdj, err, qn, cmd.vector,
        episode.hist_q.ravel(), episode.hist_qd.ravel(), episode.hist_err.ravel(),
    ])
    if core.shape != (CORE_DIM,):
        raise ObservationError(f"observation core has {core.shape} entries")
    return ObservationBundle(core)


def policy_view(core: np.ndarray, latent: np.ndarray | None = None,
                lin_vel: np.ndarray | None = None) -> np.ndarray:
    """(N, 132) core -> (N, 168) with latent and optional velocity substitution."""
    core = np.asarray(core)
    if core.ndim != 2 or core.shape[1] != CORE_DIM:
        raise ObservationError(f"expected (N, {CORE_DIM}) core, got {core.shape}")
    out = np.zeros((core.shape[0], OBS_DIM))
    out[:, :CORE_DIM] = core
    if lin_vel is not None:
        out[:, 3:6] = lin_vel
    if latent is not None:
        if latent.shape != (core.shape[0], LATENT_DIM):
            raise ObservationError(f"latent must be (N, {LATENT_DIM})")
        out[:, CORE_DIM:] = latent
    return out


def estimator_view(core: np.ndarray) -> np.ndarray:
    """Drop the linear-velocity slot: (N, 132+) -> (N, 129+)."""
    core = np.asarray(core)
    return np.concatenate([core[:, 0:3], core[:, 6:]], axis=1)


def dim_input(core: np.ndarray, lin_vel: np.ndarray | None = None) -> np.ndarray:
    x = np.array(core[:, :DIM_INPUT])
    if lin_vel is not None:
        x[:, 3:6] = lin_vel
    return x


# ----------------------------------------------------------------------------
# Rewards

REWARD_TERMS = ("lin_vel", "ang_vel", "orientation", "height", "base_motion", "joint_pos",
                "joint_vel", "joint_acc", "torque", "smooth1", "smooth2", "foot_slip",
                "air_time", "termination")


@dataclass
class RewardBreakdown:
    terms: dict[str, float]
    total: float

    @classmethod
    def from_terms(cls, terms: dict[str, float]) -> "RewardBreakdown":
        total = 0.0
        for name in REWARD_TERMS:
            total += terms[name]
        return cls(terms, total)

    def __getitem__(self, name: str) -> float:
        return self.terms[name]


def reward_terms(cmd: np.ndarray, lin_vel_b: np.ndarray, ang_vel_b: np.ndarray, tilt: float,
                 base_height: float, nominal_height: float, qj: np.ndarray, qn: np.ndarray,
                 qdj: np.ndarray, qddj: np.ndarray, tau: np.ndarray, q_des: np.ndarray,
                 q_des_prev: np.ndarray, q_des_prev2: np.ndarray, contact: np.ndarray,
                 foot_vel: np.ndarray, t_swing: np.ndarray, termination: float = 0.0
                 ) -> RewardBreakdown:
    """Reward table evaluated on already-extracted quantities."""
    cmd = np.asarray(cmd, float)
    e_xy = cmd[:2] - lin_vel_b[:2]
    e_z = cmd[2] - ang_vel_b[2]
    d1 = q_des - q_des_prev
    d2 = q_des - 2.0 * q_des_prev + q_des_prev2
    slip = np.sqrt(foot_vel[:, 0] ** 2 + foot_vel[:, 1] ** 2)
    zero_cmd = float(cmd @ cmd) == 0.0
    air = -3.0 * (-t_swing if zero_cmd else t_swing - 0.5)
    terms = {
        "lin_vel": 3.0 * (1.0 - math.tanh(4.0 * float(e_xy @ e_xy))),
        "ang_vel": 1.75 * (1.0 - math.tanh(2.0 * e_z * e_z)),
        "orientation": -5.0 * math.tanh(tilt) ** 2,
        "height": -20.0 * math.tanh((base_height - nominal_height) ** 2),
        "base_motion": -0.5 * (lin_vel_b[2] ** 2 + 0.25 * (abs(ang_vel_b[0]) + abs(ang_vel_b[1]))),
        "joint_pos": -0.2 * float(np.sum((qj - qn) ** 2)),
        "joint_vel": -3e-4 * float(qdj @ qdj),
        "joint_acc": -2e-7 * float(qddj @ qddj),
        "torque": -3.5e-5 * float(tau @ tau),
        "smooth1": -0.1 * float(d1 @ d1),
        "smooth2": -0.05 * float(d2 @ d2),
        "foot_slip": float(np.sum(-0.15 * np.asarray(contact, float) * slip)),
        "air_time": float(np.sum(air)),
        "termination": float(termination),
    }
    return RewardBreakdown.from_terms(terms)


def compute_reward(model: RobotModel, state, info: StepInfo, cmd: Command, episode: EpisodeState,
                   termination: float = 0.0) -> RewardBreakdown:
    v_b, w_b = state.body_twist()
    return reward_terms(cmd.vector, v_b, w_b, state.tilt(), state.q[2], model.nominal_base_height,
                        state.q[7:], model.nominal, state.u[6:], info.joint_acc, info.torques,
                        episode.q_des, episode.q_des_prev, episode.q_des_prev2,
                        info.contacts.in_contact, info.contacts.foot_velocity, episode.t_swing,
                        termination)


# ----------------------------------------------------------------------------
# Termination

COLLISION = "collision"
TIMEOUT = "timeout"
SIM_FAULT = "sim_fault"
TERMINATION_PENALTY = -1.0


def check_termination(model: RobotModel, state, collisions, episode: EpisodeState,
                      max_steps: int = EPISODE_STEPS) -> tuple[bool, str, float]:
    if collisions.any:
        return True, COLLISION, TERMINATION_PENALTY
    if episode.step >= max_steps:
        return True, TIMEOUT, 0.0
    return False, "", 0.0


# ----------------------------------------------------------------------------
# Environment


@dataclass(frozen=True)
class EnvConfig:
    sim: SimConfig = SimConfig()
    max_steps: int = EPISODE_STEPS
    zero_command_prob: float = 0.1
    command_scale: float = 1.0
    command_duration: tuple[float, float] = CMD_DURATION
    init_height: float = 0.02
    init_joint_noise: float = 0.05
    # perturbations (evaluation)
    push_force: float = 0.0
    push_period: float = 2.0
    push_duration: float = 0.2
    mu_override: float | None = None
    latency_override: float | None = None
    base_mass_delta: float = 0.0

    @property
    def dt(self) -> float:
        return self.sim.dt


@dataclass
class StepResult:
    obs: ObservationBundle
    reward: RewardBreakdown
    done: bool
    cause: str
    truncated: bool
    true_lin_vel: np.ndarray


class LocomotionEnv:
    """One robot, one simulator, one rng stream."""

    def __init__(self, model: RobotModel, rng: np.random.Generator, config: EnvConfig | None = None,
                 logger: "EpisodeLogger | None" = None):
        self.config = config or EnvConfig()
        self.rng = rng
        self.logger = logger
        self.model = model
        self.sim: Simulator | None = None
        self.cmd = Command()
        self.episode = EpisodeState()
        self.obs: ObservationBundle | None = None

    def _make_sim(self, model: RobotModel) -> Simulator:
        c = self.config
        mu = None if c.mu_override is None else np.full(4, c.mu_override)
        return Simulator(model, c.sim, latency=c.latency_override, mu=mu,
                         base_mass_delta=c.base_mass_delta)

    def reset(self, model: RobotModel | None = None) -> ObservationBundle:
        if model is not None or self.sim is None:
            self.model = model or self.model
            self.sim = self._make_sim(self.model)
        c = self.config
        state = self.sim.reset_nominal(c.init_height, c.init_joint_noise, self.rng)
        qn = self.model.nominal
        ep = EpisodeState()
        ep.q_des = qn.copy()
        ep.q_des_prev = qn.copy()
        ep.q_des_prev2 = qn.copy()
        ep.hist_q[:] = state.q[7:]
        ep.hist_qd[:] = state.u[6:]
        ep.hist_err[:] = 0.0
        self.episode = ep
        self.cmd = self._new_command()
        self._next_push = c.push_period
        self.obs = assemble_observation(self.model, state, self.cmd, ep)
        return self.obs

    def _new_command(self) -> Command:
        c = self.config
        return sample_command(self.rng, c.command_scale, c.zero_command_prob, c.command_duration)

    def _maybe_push(self) -> None:
        c = self.config
        if c.push_force <= 0.0:
            return
        t = self.episode.step * c.dt
        if t + 1e-9 >= self._next_push:
            ang = self.rng.uniform(0.0, 2.0 * math.pi)
            f = c.push_force * np.array([math.cos(ang), math.sin(ang), 0.0])
            self.sim.schedule_push(f, c.push_duration)
            self._next_push += c.push_period

    def step(self, action: np.ndarray) -> StepResult:
        if self.episode.done:
            raise RuntimeError("step() on a finished episode; call reset()")
        c = self.config
        ep = self.episode
        st = self.sim.state
        # shift histories to the observation we are leaving
        ep.hist_q = np.stack([st.q[7:].copy(), ep.hist_q[0]])
        ep.hist_qd = np.stack([st.u[6:].copy(), ep.hist_qd[0]])
        ep.hist_err = np.stack([ep.q_des - self.model.nominal, ep.hist_err[0]])
        ep.q_des_prev2 = ep.q_des_prev
        ep.q_des_prev = ep.q_des
        ep.q_des = self.model.nominal + np.asarray(action, dtype=float)
        self._maybe_push()
        try:
            info = self.sim.step(ep.q_des)
        except SimulationError as e:
            log.warning("simulator fault on %s: %s", self.model.name, e)
            ep.done, ep.cause = True, SIM_FAULT
            zero = RewardBreakdown.from_terms({k: 0.0 for k in REWARD_TERMS})
            return StepResult(self.obs, zero, True, SIM_FAULT, False, np.zeros(3))
        ep.step += 1
        st = self.sim.state
        ep.update_air_time(info.contacts.in_contact > 0.5, c.dt)
        collisions = collision_query(self.model, st, self.sim)
        done, cause, penalty = check_termination(self.model, st, collisions, ep, c.max_steps)
        reward = compute_reward(self.model, st, info, self.cmd, ep, penalty)
        ep.ret += reward.total
        ep.done, ep.cause = done, cause
        self.cmd.remaining -= c.dt
        if self.cmd.remaining <= 1e-9:
            self.cmd = self._new_command()
        self.obs = assemble_observation(self.model, st, self.cmd, ep)
        v_b, _ = st.body_twist()
        if self.logger is not None:
            self.logger.record(self, reward, info, v_b)
        return StepResult(self.obs, reward, done, cause, cause == TIMEOUT, v_b)


def env_step(env: LocomotionEnv, action: np.ndarray) -> StepResult:
    return env.step(action)


class EpisodeLogger:
    """Per-step CSV rows: command, body velocity, reward terms, contacts, cause."""

    HEADER = (["step", "cmd_vx", "cmd_vy", "cmd_wz", "vx", "vy", "wz"] + list(REWARD_TERMS)
              + ["total", "c_FL", "c_FR", "c_HL", "c_HR", "cause"])

    def __init__(self):
        self.rows: list[list] = []

    def record(self, env: LocomotionEnv, reward: RewardBreakdown, info: StepInfo, v_b) -> None:
        _, w_b = env.sim.state.body_twist()
        self.rows.append([env.episode.step, *env.cmd.vector, v_b[0], v_b[1], w_b[2],
                          *[reward.terms[k] for k in REWARD_TERMS], reward.total,
                          *info.contacts.in_contact.astype(int), env.episode.cause])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in r])


# ----------------------------------------------------------------------------
# Vectorized environment


@dataclass
class VecStep:
    core: np.ndarray  # (N, 132) observation after the step (after auto-reset if done)
    reward: np.ndarray  # (N,)
    done: np.ndarray  # (N,) bool
    truncated: np.ndarray  # (N,) bool, time-limit end
    causes: list[str]
    final_core: np.ndarray  # (N, 132) observation before auto-reset
    true_lin_vel: np.ndarray  # (N, 3) body frame, before auto-reset
    episode_returns: list[float]
    episode_lengths: list[int]


class VecEnv:
    """N independent envs; done envs auto-reset with their next robot.

    Env i cycles through robot indices i, i + N, i + 2N, ... (mod set size),
    so assignment depends only on the env's own index and reset count.
    """

    def __init__(self, models: Sequence[RobotModel], n_env: int, seed: int,
                 config: EnvConfig | None = None):
        if not models:
            raise ValueError("empty robot list")
        self.config = config or EnvConfig()
        self.models = list(models)
        seqs = np.random.SeedSequence(seed).spawn(n_env)
        self.envs = [LocomotionEnv(self.models[i % len(self.models)], np.random.default_rng(s),
                                   self.config) for i, s in enumerate(seqs)]
        self.resets = np.zeros(n_env, dtype=int)
        self.robot_index = np.array([i % len(self.models) for i in range(n_env)])

    @property
    def n_env(self) -> int:
        return len(self.envs)

    def set_models(self, models: Sequence[RobotModel]) -> None:
        """Swap the robot pool; envs pick new robots at their next reset."""
        self.models = list(models)

    def _assign(self, i: int) -> RobotModel:
        k = (i + self.resets[i] * self.n_env) % len(self.models)
        self.robot_index[i] = k
        return self.models[k]

    def reset_all(self) -> np.ndarray:
        return np.stack([e.reset(self._assign(i)).core for i, e in enumerate(self.envs)])

    def current_core(self) -> np.ndarray:
        return np.stack([e.obs.core for e in self.envs])

    def step_all(self, actions: np.ndarray) -> VecStep:
        n = self.n_env
        core = np.empty((n, CORE_DIM))
        final = np.empty((n, CORE_DIM))
        rew = np.empty(n)
        done = np.zeros(n, bool)
        trunc = np.zeros(n, bool)
        vel = np.empty((n, 3))
        causes = [""] * n
        rets, lens = [], []
        for i, env in enumerate(self.envs):
            r = env.step(actions[i])
            rew[i] = r.reward.total
            final[i] = r.obs.core
            vel[i] = r.true_lin_vel
            done[i] = r.done
            trunc[i] = r.truncated
            causes[i] = r.cause
            if r.done:
                rets.append(env.episode.ret)
                lens.append(env.episode.step)
                self.resets[i] += 1
                core[i] = env.reset(self._assign(i)).core
            else:
                core[i] = r.obs.core
        return VecStep(core, rew, done, trunc, causes, final, vel, rets, lens)

    def robot_params(self) -> list:
        return [e.model.params for e in self.envs]


def replace_config(config: EnvConfig, **kw) -> EnvConfig:
    return replace(config, **kw)
