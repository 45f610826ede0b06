"""Floating-base quadruped simulator.

The per-substep kernel (kinematics, mass matrix, penalty contact, actuator
and integration) lives in the compiled ``_core`` extension; ``_core_py`` is
a line-for-line numpy fallback. Selection happens at import and can be
forced with ``PAL_LOCO_BACKEND=python|compiled``.
"""

from __future__ import annotations

import csv
import importlib
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from ..morphology import LEG_NAMES, RobotModel, leg_points
from . import _core_py

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


def get_backend(name: str | None = None):
    """Return the physics core module (``"compiled"``, ``"python"`` or ``"auto"``)."""
    name = name or os.environ.get("PAL_LOCO_BACKEND", "auto")
    if name == "python":
        return _core_py
    try:
        return importlib.import_module(".dynamics._core", __package__.rsplit(".", 1)[0])
    except ImportError:
        if name == "compiled":
            raise
        log.warning("compiled physics core unavailable, using the Python fallback")
        return _core_py


BACKEND = get_backend()
BACKEND_NAME = "python" if BACKEND is _core_py else "compiled"


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01  # control period
    dt_sim: float = 0.001
    k_contact: float = 1e5
    d_contact: float = 1e3
    k_tangent: float = 5e4  # viscous regularization of Coulomb friction
    gravity: float = 9.81
    knee_speed: float = 10.0  # derating starts above this joint speed (rad/s)
    derating_slope: float = 0.5
    fixed_base: bool = False
    passive: bool = False  # no actuator torques

    @property
    def substeps(self) -> int:
        n = int(round(self.dt / self.dt_sim))
        if n < 1 or abs(n * self.dt_sim - self.dt) > 1e-12:
            raise ValueError("dt_sim must divide the control period")
        return n


@dataclass
class PackedModel:
    body_mass: np.ndarray
    body_com: np.ndarray
    body_inertia: np.ndarray
    joint_offset: np.ndarray
    joint_axis: np.ndarray
    armature: np.ndarray
    foot_offset: np.ndarray
    mu: np.ndarray
    params: np.ndarray


_MODE_CODE = {"passive": -1.0, "ideal_pd": 0.0, "nonlinear": 1.0}


def pack_model(model: RobotModel, config: SimConfig, actuator_mode: str | None = None,
               mu: np.ndarray | None = None, base_mass_delta: float = 0.0) -> PackedModel:
    p = model.params
    mode = "passive" if config.passive else (actuator_mode or p.actuator_mode)
    masses = np.array([b.mass for b in model.bodies], dtype=float)
    masses[0] += base_mass_delta
    inertia = np.array([b.inertia for b in model.bodies], dtype=float)
    if base_mass_delta:
        inertia[0] *= masses[0] / model.bodies[0].mass
    params = np.array([
        p.kp, p.kd, p.tau_max, _MODE_CODE[mode], config.knee_speed, config.derating_slope,
        config.k_contact, config.d_contact, config.k_tangent, config.gravity,
        model.foot_radius, config.dt_sim,
    ], dtype=float)
    return PackedModel(
        body_mass=masses,
        body_com=np.array([b.com for b in model.bodies], dtype=float),
        body_inertia=inertia,
        joint_offset=np.array(model.joint_offsets, dtype=float),
        joint_axis=np.array(model.joint_axes, dtype=float),
        armature=np.array(model.armature, dtype=float),
        foot_offset=np.array(model.foot_offsets, dtype=float),
        mu=np.array(p.mu_f if mu is None else mu, dtype=float).reshape(4),
        params=params,
    )


# ----------------------------------------------------------------------------
# State


def quat_to_rot(qt: np.ndarray) -> np.ndarray:
    return _core_py.quat_to_rot(qt)


@dataclass
class SimState:
    q: np.ndarray  # r_B (3), q_B (4, w-first), q_j (12)
    u: np.ndarray  # v_B (3, world), w_B (3, world), qdot_j (12)
    tick: int = 0  # substep counter
    dt_sim: float = 0.001

    @property
    def t(self) -> float:
        return self.tick * self.dt_sim

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q[3:7])

    @property
    def base_position(self) -> np.ndarray:
        return self.q[0:3]

    @property
    def joint_pos(self) -> np.ndarray:
        return self.q[7:]

    @property
    def joint_vel(self) -> np.ndarray:
        return self.u[6:]

    def body_twist(self) -> tuple[np.ndarray, np.ndarray]:
        """Base linear and angular velocity in the base frame."""
        Rt = self.rotation.T
        return Rt @ self.u[0:3], Rt @ self.u[3:6]

    def gravity_axis(self) -> np.ndarray:
        """World z axis expressed in the base frame."""
        return self.rotation[2].copy()

    def tilt(self) -> float:
        return math.acos(max(-1.0, min(1.0, self.rotation[2, 2])))

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.u.copy(), self.tick, self.dt_sim)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.u)))


# ----------------------------------------------------------------------------
# Actuation


def pd_torque(kp, kd, q_des, q, qdot, tau_max) -> np.ndarray:
    return np.clip(kp * (np.asarray(q_des) - q) - kd * np.asarray(qdot), -tau_max, tau_max)


def derating(qdot, knee_speed: float, slope: float) -> np.ndarray:
    """Torque-speed derating factor: 1 below the knee, linear falloff above."""
    s = np.abs(np.asarray(qdot, dtype=float))
    return np.where(s > knee_speed, np.clip(1.0 - slope * (s - knee_speed) / knee_speed, 0.0, 1.0),
                    1.0)


class LatencyBuffer:
    """Zero-order hold over timestamped joint targets, in integer substep ticks."""

    def __init__(self, initial: np.ndarray, delay_ticks: int):
        self.delay_ticks = int(delay_ticks)
        self._initial = np.array(initial, dtype=float)
        self._buf: deque[tuple[int, np.ndarray]] = deque()

    @property
    def depth(self) -> int:
        return len(self._buf)

    def push(self, cmd: np.ndarray, tick: int) -> None:
        self._buf.append((int(tick), np.array(cmd, dtype=float)))

    def query(self, tick: int) -> np.ndarray:
        limit = tick - self.delay_ticks
        # drop entries shadowed by a newer one that is already active
        while len(self._buf) > 1 and self._buf[1][0] <= limit:
            self._buf.popleft()
        if self._buf and self._buf[0][0] <= limit:
            return self._buf[0][1]
        return self._initial


@dataclass
class ActuationState:
    buffer: LatencyBuffer
    delay: float
    tau_max: float
    mode: str = "ideal_pd"
    kp: float = 0.0
    kd: float = 0.0
    knee_speed: float = 10.0
    slope: float = 0.5


def latency_apply(act: ActuationState, cmd: np.ndarray, now_tick: int) -> np.ndarray:
    act.buffer.push(cmd, now_tick)
    return act.buffer.query(now_tick)


def nonlinear_actuator(act: ActuationState, q_err, qdot) -> np.ndarray:
    tau = np.clip(act.kp * np.asarray(q_err) - act.kd * np.asarray(qdot), -act.tau_max, act.tau_max)
    return tau * derating(qdot, act.knee_speed, act.slope)


# ----------------------------------------------------------------------------
# Contact (explicit evaluation at a state; the kernel uses the same law)


def normal_force(depth: float, vz: float, k: float, d: float) -> float:
    """Penalty normal force; ``vz`` is the foot's vertical velocity."""
    if depth <= 0.0:
        return 0.0
    return max(0.0, k * depth - d * vz)


def coulomb_clamp(demand: np.ndarray, mu: float, fn: float) -> np.ndarray:
    demand = np.asarray(demand, dtype=float)
    n = float(np.linalg.norm(demand))
    lim = mu * fn
    if n <= lim:
        return demand.copy()
    return demand * (lim / n) if n > 0 else demand * 0.0


@dataclass
class ContactInfo:
    in_contact: np.ndarray  # (4,)
    normal_force: np.ndarray  # (4,)
    tangential_force: np.ndarray  # (4, 3)
    foot_velocity: np.ndarray  # (4, 3) world
    body_ground: dict = field(default_factory=dict)

    @property
    def foot_slip_speed(self) -> np.ndarray:
        return np.linalg.norm(self.foot_velocity[:, :2], axis=1)


def contact_forces(pm: PackedModel, state: SimState, core=None) -> tuple[ContactInfo, np.ndarray]:
    """Contact forces at the current state and their generalized force."""
    core = core or BACKEND
    o, R, axes, feet = core.kinematics(pm, state.q)
    p = pm.params
    kc, dc, kt, rad = p[6], p[7], p[8], p[10]
    gen = np.zeros(18)
    c = np.zeros(4)
    fn = np.zeros(4)
    ft = np.zeros((4, 3))
    vf = np.zeros((4, 3))
    for leg in range(4):
        J = _core_py.point_jacobian(o, axes, 3 + 3 * leg, feet[leg])
        v = J @ state.u
        vf[leg] = v
        depth = rad - feet[leg, 2]
        if depth <= 0.0:
            continue
        c[leg] = 1.0
        fn[leg] = normal_force(depth, v[2], kc, dc)
        ft[leg, :2] = coulomb_clamp(-kt * v[:2], pm.mu[leg], fn[leg])
        gen += J.T @ np.array([ft[leg, 0], ft[leg, 1], fn[leg]])
    return ContactInfo(c, fn, ft, vf), gen


# ----------------------------------------------------------------------------
# Collisions


@dataclass
class CollisionEvents:
    ground: list[str]
    self_pairs: list[tuple[str, str]]

    @property
    def any(self) -> bool:
        return bool(self.ground or self.self_pairs)


_PART_NAMES = ("hip", "thigh", "knee", "shank")
_SPHERE_LEG = np.repeat(np.arange(4), 4)
_CROSS_LEG = np.triu(_SPHERE_LEG[:, None] != _SPHERE_LEG[None, :], 1)
_GROUND_CHECKED = np.tile([True, True, True, False], 4)  # shank midpoints sit near the foot
_BOX_CORNERS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                        dtype=float)


def _sphere_radii(model: RobotModel) -> np.ndarray:
    r = np.empty(16)
    for leg in range(4):
        thigh = model.bodies[2 + 3 * leg].radius
        r[4 * leg:4 * leg + 3] = thigh
        r[4 * leg + 3] = 0.5 * model.bodies[3 + 3 * leg].radius
    return r


def _sphere_name(k: int) -> str:
    return f"{LEG_NAMES[k // 4]}_{_PART_NAMES[k % 4]}"


def collision_query(model: RobotModel, state: SimState, sim: "Simulator | None" = None
                    ) -> CollisionEvents:
    """Non-foot ground contact and coarse self-collision (sphere tests).

    Passing ``sim`` reuses its compiled kinematics.
    """
    R = state.rotation
    r = state.q[0:3]
    if sim is not None:
        o, _, _, feet_w = sim.core.kinematics(sim.pm, state.q)
        joints_w = o[1:]
        feet_b = (feet_w - r) @ R
    else:
        pts = leg_points(model, state.q[7:])
        joints_w = pts["joints"] @ R.T + r
        feet_b = pts["foot"]
        feet_w = feet_b @ R.T + r
    half = model.base_half_extents
    hip = joints_w[1::3]
    knee = joints_w[2::3]
    centers = np.empty((4, 4, 3))
    centers[:, 0] = hip
    centers[:, 1] = 0.5 * (hip + knee)
    centers[:, 2] = knee
    centers[:, 3] = 0.5 * (knee + feet_w)
    centers = centers.reshape(16, 3)
    radii = _sphere_radii(model)

    ground: list[str] = []
    pairs: list[tuple[str, str]] = []
    if np.min((_BOX_CORNERS * half) @ R[2] + r[2]) < 0.0:
        ground.append("base")
    low = _GROUND_CHECKED & (centers[:, 2] - radii < 0.0)
    ground.extend(_sphere_name(k) for k in np.flatnonzero(low))
    d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    hit = _CROSS_LEG & (d2 < (radii[:, None] + radii[None, :]) ** 2)
    pairs.extend((_sphere_name(i), _sphere_name(j)) for i, j in zip(*np.nonzero(hit)))
    inside = np.all(np.abs(feet_b) < half, axis=1)
    pairs.extend(("base", f"{LEG_NAMES[leg]}_foot") for leg in np.flatnonzero(inside))
    return CollisionEvents(ground, pairs)


# ----------------------------------------------------------------------------
# Simulator


@dataclass
class StepInfo:
    contacts: ContactInfo
    torques: np.ndarray
    joint_acc: np.ndarray


@dataclass
class Push:
    start: int
    end: int
    force: np.ndarray


class Simulator:
    """One robot on flat ground; owns its state, latency buffer and pushes."""

    def __init__(self, model: RobotModel, config: SimConfig | None = None, backend=None,
                 latency: float | None = None, actuator_mode: str | None = None,
                 mu: np.ndarray | None = None, base_mass_delta: float = 0.0):
        self.model = model
        self.config = config or SimConfig()
        self.core = backend if backend is not None and not isinstance(backend, str) \
            else get_backend(backend)
        self.pm = pack_model(model, self.config, actuator_mode, mu, base_mass_delta)
        self.latency = model.params.latency if latency is None else float(latency)
        self.n_sub = self.config.substeps
        self.state = SimState(np.zeros(19), np.zeros(18), 0, self.config.dt_sim)
        self.state.q[3] = 1.0
        self.pushes: dict[tuple[int, int], Push] = {}
        self.actuation = self._new_actuation()
        self._diag = (np.zeros(4), np.zeros(4), np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(12))
        self.last: StepInfo | None = None

    def __getstate__(self):
        # modules do not pickle; store the backend by name
        d = dict(self.__dict__)
        d["core"] = "python" if self.core is _core_py else "compiled"
        return d

    def __setstate__(self, d):
        d = dict(d)
        d["core"] = get_backend(d["core"] if d["core"] == "python" else "auto")
        self.__dict__.update(d)

    def _new_actuation(self) -> ActuationState:
        p = self.model.params
        ticks = int(round(self.latency / self.config.dt_sim))
        buf = LatencyBuffer(self.model.nominal, ticks)
        return ActuationState(buf, self.latency, p.tau_max, p.actuator_mode, p.kp, p.kd,
                              self.config.knee_speed, self.config.derating_slope)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.pm.body_mass)

    def reset(self, q: np.ndarray, u: np.ndarray | None = None) -> SimState:
        q = np.array(q, dtype=float)
        q[3:7] /= np.linalg.norm(q[3:7])
        self.state = SimState(q, np.zeros(18) if u is None else np.array(u, dtype=float), 0,
                              self.config.dt_sim)
        self.actuation = self._new_actuation()
        self.pushes = {}
        self.last = None
        return self.state

    def reset_nominal(self, height_offset: float = 0.02, joint_noise: float = 0.0,
                      rng: np.random.Generator | None = None) -> SimState:
        q = np.zeros(19)
        q[2] = self.model.nominal_base_height + height_offset
        q[3] = 1.0
        q[7:] = self.model.nominal
        if joint_noise > 0.0:
            q[7:] += rng.uniform(-joint_noise, joint_noise, 12)
        return self.reset(q)

    def schedule_push(self, force, duration: float, start: float | None = None) -> Push:
        """Add ``force`` (world, N) to the base for ``duration`` seconds.

        Scheduling the same window twice keeps a single push.
        """
        if duration <= 0:
            raise ValueError("push duration must be positive")
        t0 = self.state.tick if start is None else int(round(start / self.config.dt_sim))
        t1 = t0 + int(round(duration / self.config.dt_sim))
        push = Push(t0, t1, np.array(force, dtype=float))
        self.pushes[(t0, t1)] = push
        return push

    def _push_forces(self, t0: int) -> np.ndarray:
        f = np.zeros((self.n_sub, 3))
        for p in self.pushes.values():
            lo, hi = max(p.start, t0), min(p.end, t0 + self.n_sub)
            if lo < hi:
                f[lo - t0:hi - t0] += p.force
        return f

    def step(self, q_des: np.ndarray) -> StepInfo:
        """Advance one control period with joint targets ``q_des``."""
        st = self.state
        t0 = st.tick
        self.actuation.buffer.push(q_des, t0)
        qdes = np.empty((self.n_sub, 12))
        for k in range(self.n_sub):
            qdes[k] = self.actuation.buffer.query(t0 + k)
        fext = self._push_forces(t0)
        qd0 = st.u[6:].copy()
        q = st.q.copy()
        u = st.u.copy()
        contact, fn, ft, vf, tau = self._diag
        status = self.core.simulate(self.pm, q, u, qdes, fext, self.config.fixed_base,
                                    contact, fn, ft, vf, tau)
        if status != 0 or not (np.all(np.isfinite(q)) and np.all(np.isfinite(u))):
            raise SimulationError(f"non-finite state at t={st.t:.3f}s")
        st.q, st.u = q, u
        st.tick = t0 + self.n_sub
        if self.pushes:
            self.pushes = {k: p for k, p in self.pushes.items() if p.end > st.tick}
        info = StepInfo(
            ContactInfo(contact.copy(), fn.copy(), ft.copy(), vf.copy()),
            tau.copy(),
            (u[6:] - qd0) / self.config.dt,
        )
        self.last = info
        return info

    def energy(self) -> float:
        """Kinetic (incl. armature) plus gravitational potential energy."""
        M, _ = self.core.dynamics_terms(self.pm, self.state.q, self.state.u)
        o, R, _, _ = self.core.kinematics(self.pm, self.state.q)
        com = o + np.einsum("bij,bj->bi", R, self.pm.body_com)
        pe = self.config.gravity * float(self.pm.body_mass @ com[:, 2])
        return 0.5 * float(self.state.u @ M @ self.state.u) + pe


def forward_dynamics(model: RobotModel | PackedModel, state: SimState, tau_gen: np.ndarray,
                     config: SimConfig | None = None, fixed_base: bool = False, core=None
                     ) -> np.ndarray:
    """Generalized accelerations (18) under gravity and generalized force ``tau_gen``."""
    core = core or BACKEND
    pm = model if isinstance(model, PackedModel) else pack_model(model, config or SimConfig())
    if not state.is_finite():
        raise SimulationError("non-finite state")
    try:
        return core.forward_dynamics(pm, np.ascontiguousarray(state.q, dtype=float),
                                     np.ascontiguousarray(state.u, dtype=float),
                                     np.ascontiguousarray(tau_gen, dtype=float), fixed_base)
    except np.linalg.LinAlgError as e:
        raise SimulationError(str(e)) from e


def step(sim: Simulator, q_des: np.ndarray) -> SimState:
    sim.step(q_des)
    return sim.state


def apply_external_push(sim: Simulator, force, duration: float, start: float | None = None) -> Push:
    return sim.schedule_push(force, duration, start)


class TrajectoryRecorder:
    """Collects (t, q, u, contacts, torques) rows for debugging dumps."""

    def __init__(self):
        self.rows: list[list[float]] = []

    def record(self, sim: Simulator) -> None:
        info = sim.last
        c = info.contacts.in_contact if info else np.zeros(4)
        tau = info.torques if info else np.zeros(12)
        self.rows.append([sim.state.t, *sim.state.q, *sim.state.u, *c, *tau])

    def write_csv(self, path) -> None:
        header = (["t"] + [f"q{i}" for i in range(19)] + [f"u{i}" for i in range(18)]
                  + [f"contact{i}" for i in range(4)] + [f"tau{i}" for i in range(12)])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(self.rows)


__all__ = [
    "BACKEND", "BACKEND_NAME", "ActuationState", "CollisionEvents", "ContactInfo",
    "LatencyBuffer", "PackedModel", "SimConfig", "SimState", "SimulationError", "Simulator",
    "StepInfo", "TrajectoryRecorder", "apply_external_push", "collision_query",
    "contact_forces", "coulomb_clamp", "derating", "forward_dynamics", "get_backend",
    "latency_apply", "nonlinear_actuator", "normal_force", "pack_model", "pd_torque", "step",
    "replace",
]
