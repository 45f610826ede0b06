"""Procedural quadruped generation.

Reference templates carry uniform sampling bounds for every randomized
kinematic and dynamic parameter. A sampled :class:`MorphologyParams` is
turned into a :class:`RobotModel` (floating base + 4 legs of 3 revolute
joints each + 4 foot frames), screened by a short standing simulation and
collected into a :class:`RobotSet`.

Leg order is FL, FR, HL, HR; joints ``3*leg + k`` with ``k`` = 0 (hip
abduction, about x), 1 (hip flexion, about y), 2 (knee, about y).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUPPORTED_IDS = (1, 2, 4, 5)
LEG_NAMES = ("FL", "FR", "HL", "HR")
# +x front / -x hind, +y left / -y right
LEG_SIGN_X = np.array([1.0, 1.0, -1.0, -1.0])
LEG_SIGN_Y = np.array([1.0, -1.0, 1.0, -1.0])
LATENCY_RANGE = (0.0, 0.020)
ACTUATOR_MODES = ("ideal_pd", "nonlinear")


class UnsupportedReference(ValueError):
    pass


class DegenerateMorphology(ValueError):
    pass


class GenerationExhausted(RuntimeError):
    pass


# Rows shared by all four reference ids.
_COMMON_ROWS = {
    "c_f_z": (-0.025, 0.12),
    "qn_abd": (-0.15, 0.15),
    "qn_X_front_hfe": (0.3, 0.9),
    "qn_X_hind_hfe": (0.3, 0.9),
    "qn_X_kfe": (-1.2, -0.6),
    "qn_A_front_hfe": (0.3, 0.9),
    "qn_A_hind_hfe": (0.3, 0.9),
    "qn_A_kfe": (-1.8, -0.7),
    "Kd": (0.2, 3.0),
    "mu_f": (0.2, 1.1),
}

# id -> per-id rows; order: A1, Aliengo, ANYmal B, ANYmal C
_PER_ID_ROWS: dict[int, dict[str, tuple[float, float]]] = {
    1: {
        "c_q1_x": (0.15, 0.4), "c_q1_y": (0.0, 0.25), "c_q1_z": (-0.1, 0.12),
        "c_q2_x": (-0.1, 0.1), "c_q2_y": (-0.04, 0.13), "c_q2_z": (-0.1, 0.1),
        "c_q3_x": (-0.05, 0.18), "c_q3_y": (-0.05, 0.1), "c_q3_z": (-0.24, -0.12),
        "m_base": (2.0, 28.0), "m_hip": (0.25, 1.0), "m_thigh": (0.5, 4.0),
        "m_shank": (0.08, 0.9), "Kp": (15.0, 80.0), "tau_max": (15.0, 120.0),
    },
    2: {
        "c_q1_x": (0.15, 0.45), "c_q1_y": (0.0, 0.25), "c_q1_z": (-0.1, 0.12),
        "c_q2_x": (-0.1, 0.1), "c_q2_y": (0.04, 0.12), "c_q2_z": (-0.06, 0.1),
        "c_q3_x": (-0.05, 0.15), "c_q3_y": (-0.05, 0.1), "c_q3_z": (-0.28, -0.1),
        "m_base": (4.0, 30.0), "m_hip": (0.25, 2.6), "m_thigh": (0.4, 3.0),
        "m_shank": (0.1, 0.5), "Kp": (15.0, 80.0), "tau_max": (15.0, 50.0),
    },
    4: {
        "c_q1_x": (0.225, 0.45), "c_q1_y": (0.05, 0.23), "c_q1_z": (-0.18, 0.18),
        "c_q2_x": (-0.1, 0.15), "c_q2_y": (0.015, 0.12), "c_q2_z": (-0.07, 0.07),
        "c_q3_x": (-0.1, 0.1), "c_q3_y": (-0.05, 0.16), "c_q3_z": (-0.35, -0.18),
        "m_base": (6.0, 40.0), "m_hip": (0.5, 3.0), "m_thigh": (0.6, 4.5),
        "m_shank": (0.15, 0.6), "Kp": (30.0, 120.0), "tau_max": (40.0, 80.0),
    },
    5: {
        "c_q1_x": (0.18, 0.5), "c_q1_y": (0.05, 0.27), "c_q1_z": (-0.22, 0.15),
        "c_q2_x": (-0.1, 0.2), "c_q2_y": (-0.15, -0.05), "c_q2_z": (-0.1, 0.06),
        "c_q3_x": (-0.1, 0.2), "c_q3_y": (-0.2, 0.15), "c_q3_z": (-0.35, -0.18),
        "m_base": (18.0, 50.0), "m_hip": (1.4, 4.0), "m_thigh": (1.8, 5.0),
        "m_shank": (0.25, 1.0), "Kp": (35.0, 120.0), "tau_max": (40.0, 140.0),
    },
}

_NAMES = {1: "A1", 2: "Aliengo", 4: "ANYmal B", 5: "ANYmal C"}

# Unrandomized stand-ins. Shank length, foot radius and base box height are
# template geometry that the sampling table does not cover.
_DEFAULTS: dict[int, dict] = {
    1: dict(c_q1=(0.183, 0.047, 0.0), c_q2=(0.0, 0.085, 0.0), c_q3=(0.0, 0.0, -0.2),
            c_f_z=0.0, m_base=6.0, m_hip=0.7, m_thigh=1.0, m_shank=0.2,
            qn=(0.0, 0.7, -1.4), config="A", Kp=40.0, Kd=1.0, tau_max=33.5, mu_f=0.8,
            shank_length=0.2, foot_radius=0.02, base_height=0.114, armature=0.01),
    2: dict(c_q1=(0.24, 0.051, 0.0), c_q2=(0.0, 0.083, 0.0), c_q3=(0.0, 0.0, -0.25),
            c_f_z=0.0, m_base=9.0, m_hip=1.99, m_thigh=0.64, m_shank=0.15,
            qn=(0.0, 0.7, -1.4), config="A", Kp=80.0, Kd=2.0, tau_max=44.0, mu_f=0.8,
            shank_length=0.25, foot_radius=0.0265, base_height=0.112, armature=0.01),
    4: dict(c_q1=(0.277, 0.116, 0.0), c_q2=(0.0635, 0.041, 0.0), c_q3=(0.0, 0.1, -0.25),
            c_f_z=0.0, m_base=16.8, m_hip=1.42, m_thigh=1.63, m_shank=0.47,
            qn=(0.0, 0.6, -1.0), config="X", Kp=80.0, Kd=2.0, tau_max=60.0, mu_f=0.8,
            shank_length=0.3, foot_radius=0.03, base_height=0.2, armature=0.02),
    5: dict(c_q1=(0.3, 0.104, 0.0), c_q2=(0.06, -0.05, 0.0), c_q3=(0.0, 0.1, -0.285),
            c_f_z=0.0, m_base=30.0, m_hip=2.0, m_thigh=2.4, m_shank=0.5,
            qn=(0.0, 0.6, -1.0), config="X", Kp=85.0, Kd=2.5, tau_max=80.0, mu_f=0.8,
            shank_length=0.33, foot_radius=0.03, base_height=0.2, armature=0.02),
}


@dataclass(frozen=True)
class ReferenceModel:
    id: int
    name: str
    sampling_table: dict[str, tuple[float, float]]
    defaults: dict = field(repr=False)

    @property
    def shank_length(self) -> float:
        return self.defaults["shank_length"]

    @property
    def foot_radius(self) -> float:
        return self.defaults["foot_radius"]

    @property
    def base_height(self) -> float:
        return self.defaults["base_height"]

    @property
    def armature(self) -> float:
        return self.defaults["armature"]


def load_reference(ref_id: int) -> ReferenceModel:
    if ref_id not in SUPPORTED_IDS:
        raise UnsupportedReference(
            f"reference id {ref_id} is not supported (have {SUPPORTED_IDS})")
    table = dict(_PER_ID_ROWS[ref_id])
    table.update(_COMMON_ROWS)
    for name, (lo, hi) in table.items():
        assert lo <= hi, name
    return ReferenceModel(ref_id, _NAMES[ref_id], table, _DEFAULTS[ref_id])


def parse_ids(text: str | Sequence[int]) -> list[int]:
    if isinstance(text, str):
        ids = [int(t) for t in text.split(",") if t.strip()]
    else:
        ids = [int(t) for t in text]
    for i in ids:
        load_reference(i)
    return ids


@dataclass(frozen=True)
class MorphologyParams:
    """Raw sampled values, in table convention (before leg mirroring).

    ``joint_offsets[j]`` is the offset of joint j from its parent joint
    (the base origin for hip joints). ``link_masses[j]`` is the mass of the
    body driven by joint j.
    """

    ref_id: int
    joint_offsets: np.ndarray  # (12, 3)
    foot_offsets: np.ndarray  # (4,)
    m_base: float
    link_masses: np.ndarray  # (12,)
    nominal: np.ndarray  # (12,)
    leg_configuration: str
    kp: float
    kd: float
    tau_max: float
    mu_f: np.ndarray  # (4,)
    latency: float
    actuator_mode: str = "ideal_pd"

    @property
    def total_mass(self) -> float:
        return float(self.m_base + self.link_masses.sum())

    def to_dict(self) -> dict:
        return {
            "ref_id": self.ref_id,
            "joint_offsets": self.joint_offsets.tolist(),
            "foot_offsets": self.foot_offsets.tolist(),
            "m_base": self.m_base,
            "link_masses": self.link_masses.tolist(),
            "nominal": self.nominal.tolist(),
            "leg_configuration": self.leg_configuration,
            "kp": self.kp,
            "kd": self.kd,
            "tau_max": self.tau_max,
            "mu_f": self.mu_f.tolist(),
            "latency": self.latency,
            "actuator_mode": self.actuator_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MorphologyParams":
        return cls(
            ref_id=int(d["ref_id"]),
            joint_offsets=np.asarray(d["joint_offsets"], dtype=float).reshape(12, 3),
            foot_offsets=np.asarray(d["foot_offsets"], dtype=float),
            m_base=float(d["m_base"]),
            link_masses=np.asarray(d["link_masses"], dtype=float),
            nominal=np.asarray(d["nominal"], dtype=float),
            leg_configuration=d["leg_configuration"],
            kp=float(d["kp"]),
            kd=float(d["kd"]),
            tau_max=float(d["tau_max"]),
            mu_f=np.asarray(d["mu_f"], dtype=float),
            latency=float(d["latency"]),
            actuator_mode=d.get("actuator_mode", "ideal_pd"),
        )


def _nominal_rows(config: str) -> tuple[str, str, str]:
    return (f"qn_{config}_front_hfe", f"qn_{config}_hind_hfe", f"qn_{config}_kfe")


def param_bounds(ref: ReferenceModel, config: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-field elementwise (lo, hi) arrays for a given leg configuration."""
    t = ref.sampling_table
    off_lo = np.empty((12, 3))
    off_hi = np.empty((12, 3))
    for k in range(3):
        for a, axis in enumerate("xyz"):
            lo, hi = t[f"c_q{k + 1}_{axis}"]
            off_lo[k::3, a] = lo
            off_hi[k::3, a] = hi
    mass_lo = np.empty(12)
    mass_hi = np.empty(12)
    for k, name in enumerate(("m_hip", "m_thigh", "m_shank")):
        mass_lo[k::3], mass_hi[k::3] = t[name]
    front, hind, kfe = _nominal_rows(config)
    qn_lo = np.empty(12)
    qn_hi = np.empty(12)
    qn_lo[0::3], qn_hi[0::3] = t["qn_abd"]
    qn_lo[1:6:3], qn_hi[1:6:3] = t[front]
    qn_lo[7::3], qn_hi[7::3] = t[hind]
    qn_lo[2::3], qn_hi[2::3] = t[kfe]
    scal = lambda name, n=1: (np.full(n, t[name][0]), np.full(n, t[name][1]))  # noqa: E731
    return {
        "joint_offsets": (off_lo, off_hi),
        "foot_offsets": scal("c_f_z", 4),
        "m_base": scal("m_base"),
        "link_masses": (mass_lo, mass_hi),
        "nominal": (qn_lo, qn_hi),
        "kp": scal("Kp"),
        "kd": scal("Kd"),
        "tau_max": scal("tau_max"),
        "mu_f": scal("mu_f", 4),
        "latency": (np.array([LATENCY_RANGE[0]]), np.array([LATENCY_RANGE[1]])),
    }


def check_bounds(params: MorphologyParams, ref: ReferenceModel) -> list[str]:
    """Names of fields that fall outside the reference bounds."""
    bad = []
    for name, (lo, hi) in param_bounds(ref, params.leg_configuration).items():
        v = np.atleast_1d(np.asarray(getattr(params, name), dtype=float))
        if v.shape != lo.shape and v.size != lo.size:
            bad.append(name)
            continue
        v = v.reshape(lo.shape)
        if np.any(v < lo) or np.any(v > hi) or not np.all(np.isfinite(v)):
            bad.append(name)
    if params.m_base <= 0 or np.any(params.link_masses <= 0):
        bad.append("masses")
    return bad


def sample_morphology(ref: ReferenceModel, rng: np.random.Generator,
                      latency_range: tuple[float, float] = LATENCY_RANGE,
                      nonlinear_prob: float = 0.5) -> MorphologyParams:
    if ref.id not in SUPPORTED_IDS:
        raise UnsupportedReference(f"reference id {ref.id} is not supported")
    config = "A" if rng.random() < 0.5 else "X"
    b = param_bounds(ref, config)
    # one draw per table row, mirrored to all legs; friction stays per foot
    one = lambda key: rng.uniform(*b[key])  # noqa: E731
    offsets = np.tile(rng.uniform(b["joint_offsets"][0][:3], b["joint_offsets"][1][:3]), (4, 1))
    feet = np.full(4, rng.uniform(b["foot_offsets"][0][0], b["foot_offsets"][1][0]))
    m_base = float(one("m_base")[0])
    masses = np.tile(rng.uniform(b["link_masses"][0][:3], b["link_masses"][1][:3]), 4)
    lo, hi = b["nominal"]
    abd, front, kfe, hind = rng.uniform(lo[[0, 1, 2, 7]], hi[[0, 1, 2, 7]])
    nominal = np.empty(12)
    nominal[0::3] = abd * LEG_SIGN_Y
    nominal[1::3] = np.where(LEG_SIGN_X > 0, front, hind)
    nominal[2::3] = kfe
    kp = float(one("kp")[0])
    kd = float(one("kd")[0])
    tau_max = float(one("tau_max")[0])
    mu = one("mu_f")
    latency = float(rng.uniform(*latency_range))
    mode = ACTUATOR_MODES[1] if rng.random() < nonlinear_prob else ACTUATOR_MODES[0]
    return MorphologyParams(ref.id, offsets, feet, m_base, masses, nominal, config,
                            kp, kd, tau_max, mu, latency, mode)


def reference_params(ref: ReferenceModel) -> MorphologyParams:
    """The unrandomized stand-in for a reference model."""
    d = ref.defaults
    offsets = np.tile(np.concatenate([d["c_q1"], d["c_q2"], d["c_q3"]]), 4).reshape(12, 3)
    masses = np.tile([d["m_hip"], d["m_thigh"], d["m_shank"]], 4).astype(float)
    return MorphologyParams(
        ref.id, offsets, np.full(4, d["c_f_z"]), float(d["m_base"]), masses,
        np.tile(d["qn"], 4).astype(float), d["config"], float(d["Kp"]), float(d["Kd"]),
        float(d["tau_max"]), np.full(4, d["mu_f"]), 0.0, "ideal_pd")


# ----------------------------------------------------------------------------
# Kinematic tree


@dataclass
class Body:
    name: str
    mass: float
    com: np.ndarray  # in body frame
    inertia: np.ndarray  # about com, body frame
    parent: int  # -1 for base
    joint: int  # driving joint index, -1 for base
    radius: float = 0.0  # collision sphere radius (links)


@dataclass
class RobotModel:
    bodies: list[Body]
    joint_offsets: np.ndarray  # (12, 3) signed, in parent frame
    joint_axes: np.ndarray  # (12, 3) unit, in parent frame
    foot_offsets: np.ndarray  # (4, 3) in shank frame
    armature: np.ndarray  # (12,)
    foot_radius: float
    base_half_extents: np.ndarray  # (3,)
    params: MorphologyParams
    nominal_base_height: float = 0.0
    name: str = ""

    @property
    def ref_id(self) -> int:
        return self.params.ref_id

    @property
    def nominal(self) -> np.ndarray:
        return self.params.nominal

    @property
    def total_mass(self) -> float:
        return float(sum(b.mass for b in self.bodies))

    @property
    def n_joints(self) -> int:
        return 12

    @property
    def joint_limits(self) -> tuple[np.ndarray, np.ndarray]:
        span = np.tile([0.8, 1.6, 1.6], 4)
        return self.nominal - span, self.nominal + span

    def foot_positions_base(self, qj: np.ndarray) -> np.ndarray:
        """Foot frame positions in the base frame for joint angles ``qj``."""
        return leg_points(self, qj)["foot"]


def capsule_inertia(mass: float, length: float, radius: float) -> tuple[float, float]:
    """Solid capsule (axial, transverse) moments about the center of mass."""
    r, h = radius, length
    v_cyl = math.pi * r * r * h
    v_caps = 4.0 / 3.0 * math.pi * r ** 3
    m_cyl = mass * v_cyl / (v_cyl + v_caps)
    m_hem = mass - m_cyl  # both hemispheres
    axial = m_cyl * r * r / 2.0 + m_hem * 2.0 * r * r / 5.0
    trans = (m_cyl * (r * r / 4.0 + h * h / 12.0)
             + m_hem * (2.0 * r * r / 5.0 + h * h / 4.0 + 3.0 * h * r / 8.0))
    return axial, trans


def _link_inertia(mass: float, vec: np.ndarray, radius: float) -> np.ndarray:
    length = float(np.linalg.norm(vec))
    axial, trans = capsule_inertia(mass, length, radius)
    if length < 1e-9:
        return np.eye(3) * axial
    d = vec / length
    return trans * (np.eye(3) - np.outer(d, d)) + axial * np.outer(d, d)


def _rot(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def leg_points(model: RobotModel, qj: np.ndarray) -> dict[str, np.ndarray]:
    """Joint and foot positions (base frame) for joint angles ``qj``."""
    joints = np.zeros((12, 3))
    feet = np.zeros((4, 3))
    for leg in range(4):
        R = np.eye(3)
        p = np.zeros(3)
        for k in range(3):
            j = 3 * leg + k
            p = p + R @ model.joint_offsets[j]
            joints[j] = p
            R = R @ _rot(model.joint_axes[j], qj[j])
        feet[leg] = p + R @ model.foot_offsets[leg]
    return {"joints": joints, "foot": feet}


def build_kinematic_tree(params: MorphologyParams, ref: ReferenceModel,
                         strict: bool = True) -> RobotModel:
    """Assemble bodies, signed offsets and axes; compute the nominal height.

    ``strict=False`` skips the sampling-table bounds (hand-built geometry);
    degenerate links are rejected either way.
    """
    if params.ref_id != ref.id:
        raise ValueError("params were sampled from a different reference")
    bad = check_bounds(params, ref) if strict else []
    if bad:
        raise DegenerateMorphology(f"fields outside reference bounds: {bad}")
    raw = params.joint_offsets
    if np.any(np.abs(raw[2::3, 2]) < 0.01):
        raise DegenerateMorphology("thigh-to-knee offset shorter than 1 cm")

    offsets = raw.copy()
    axes = np.zeros((12, 3))
    feet = np.zeros((4, 3))
    x_config = params.leg_configuration == "X"
    for leg in range(4):
        sx, sy = LEG_SIGN_X[leg], LEG_SIGN_Y[leg]
        hind = sx < 0
        j0 = 3 * leg
        offsets[j0, 0] *= sx
        offsets[j0:j0 + 3, 1] *= sy
        offsets[j0 + 1, 0] *= sx
        # X legs: hind legs are sagittal mirrors so their knees face the centre
        flip = -1.0 if (x_config and hind) else 1.0
        offsets[j0 + 2, 0] *= flip
        axes[j0] = (1.0, 0.0, 0.0)
        axes[j0 + 1] = (0.0, flip, 0.0)
        axes[j0 + 2] = (0.0, flip, 0.0)
        feet[leg] = (0.0, 0.0, -(ref.shank_length + params.foot_offsets[leg]))
    if np.any(-feet[:, 2] < 0.05):
        raise DegenerateMorphology("shank shorter than 5 cm")

    hips = offsets[0::3]
    half = np.array([
        max(np.abs(hips[:, 0]).max(), 0.08),
        max(np.abs(hips[:, 1]).max(), 0.05),
        ref.base_height / 2.0,
    ])
    m = params.m_base
    base_inertia = np.diag([
        m * (half[1] ** 2 + half[2] ** 2) / 3.0,
        m * (half[0] ** 2 + half[2] ** 2) / 3.0,
        m * (half[0] ** 2 + half[1] ** 2) / 3.0,
    ])
    bodies = [Body("base", m, np.zeros(3), base_inertia, -1, -1)]
    for leg in range(4):
        for k, part in enumerate(("hip", "thigh", "shank")):
            j = 3 * leg + k
            child = offsets[j + 1] if k < 2 else feet[leg]
            length = float(np.linalg.norm(child))
            radius = 0.015 + 0.08 * length
            mass = float(params.link_masses[j])
            parent = 0 if k == 0 else len(bodies) - 1
            bodies.append(Body(f"{LEG_NAMES[leg]}_{part}", mass, child / 2.0,
                               _link_inertia(mass, child, radius), parent, j, radius))

    model = RobotModel(bodies, offsets, axes, feet, np.full(12, ref.armature),
                       ref.foot_radius, half, params,
                       name=f"{ref.name}")
    pts = leg_points(model, params.nominal)
    depth = -pts["foot"][:, 2]
    model.nominal_base_height = float(depth.mean() + ref.foot_radius)
    return model


def reference_robot(ref_id: int) -> RobotModel:
    ref = load_reference(ref_id)
    return build_kinematic_tree(reference_params(ref), ref)


# ----------------------------------------------------------------------------
# Viability and robot sets


def viability_failure(model: RobotModel, sim_config=None, duration: float = 2.0,
                      max_tilt: float = math.radians(60.0), min_height_frac: float = 0.5
                      ) -> str | None:
    """Drop the robot at its nominal pose and hold q^n with the joint PD.

    Returns None if it stands, otherwise a short reason.
    """
    from .dynamics import SimConfig, SimulationError, Simulator, collision_query

    sim = Simulator(model, sim_config or SimConfig())
    sim.reset_nominal(height_offset=0.02)
    ev = collision_query(model, sim.state)
    if ev.any:
        return f"collision at t=0: {ev.ground + ev.self_pairs}"
    n = int(round(duration / sim.config.dt))
    rn = model.nominal_base_height
    try:
        for i in range(n):
            sim.step(model.nominal)
            ev = collision_query(model, sim.state, sim)
            if ev.any:
                return f"collision at step {i}: {ev.ground + ev.self_pairs}"
            if sim.state.tilt() > max_tilt:
                return f"tilt at step {i}"
            if sim.state.q[2] < min_height_frac * rn:
                return f"height at step {i}"
    except SimulationError as e:
        log.info("viability: simulator fault for %s: %s", model.name, e)
        return "simulator fault"
    return None


def viability_check(model: RobotModel, sim_config=None, duration: float = 2.0,
                    max_tilt: float = math.radians(60.0), min_height_frac: float = 0.5) -> bool:
    return viability_failure(model, sim_config, duration, max_tilt, min_height_frac) is None


@dataclass(frozen=True)
class RobotEntry:
    params: MorphologyParams
    r_n: float

    def build(self) -> RobotModel:
        return build_kinematic_tree(self.params, load_reference(self.params.ref_id))


@dataclass(frozen=True)
class RobotSet:
    robots: tuple[RobotEntry, ...]
    per_reference_count: int
    seed: int
    attempts: int = 0

    def __len__(self) -> int:
        return len(self.robots)

    @property
    def ref_ids(self) -> list[int]:
        return sorted({r.params.ref_id for r in self.robots})

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "per_reference_count": self.per_reference_count,
            "robots": [{"ref_id": r.params.ref_id, "params": r.params.to_dict(), "r_n": r.r_n}
                       for r in self.robots],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RobotSet":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported robots schema {doc.get('schema_version')}")
        robots = tuple(RobotEntry(MorphologyParams.from_dict(r["params"]), float(r["r_n"]))
                       for r in doc["robots"])
        return cls(robots, int(doc.get("per_reference_count", 0)), int(doc["seed"]))


def _sample_viable(ref: ReferenceModel, rng: np.random.Generator, max_attempts: int,
                   sim_config=None) -> tuple[RobotEntry, int]:
    for attempt in range(1, max_attempts + 1):
        params = sample_morphology(ref, rng)
        try:
            model = build_kinematic_tree(params, ref)
        except DegenerateMorphology:
            continue
        if viability_check(model, sim_config):
            return RobotEntry(params, model.nominal_base_height), attempt
    raise GenerationExhausted(
        f"no viable robot for reference {ref.id} after {max_attempts} attempts")


def generate_robot_set(refs: Sequence[ReferenceModel | int], count: int, seed: int,
                       max_attempts: int | None = None, sim_config=None) -> RobotSet:
    if count < 1:
        raise ValueError("count must be >= 1")
    refs = [r if isinstance(r, ReferenceModel) else load_reference(r) for r in refs]
    budget = max_attempts if max_attempts is not None else 1000 * count
    robots = []
    attempts = 0
    for ref in refs:
        # one stream per reference keeps sets comparable across id subsets
        rng = np.random.default_rng([seed, ref.id])
        for _ in range(count):
            entry, n = _sample_viable(ref, rng, budget, sim_config)
            robots.append(entry)
            attempts += n
    return RobotSet(tuple(robots), count, seed, attempts)


def reference_set(ref_ids: Sequence[int], seed: int = 0) -> RobotSet:
    """A set holding only the unrandomized stand-ins."""
    entries = []
    for i in ref_ids:
        ref = load_reference(i)
        model = build_kinematic_tree(reference_params(ref), ref)
        entries.append(RobotEntry(model.params, model.nominal_base_height))
    return RobotSet(tuple(entries), 1, seed)


def resample_fraction(robot_set: RobotSet, fraction: float, rng: np.random.Generator,
                      max_attempts: int | None = None, sim_config=None
                      ) -> tuple[RobotSet, np.ndarray]:
    """Replace ``floor(fraction * n)`` uniformly chosen members.

    Returns the new set and the replaced indices (sorted).
    """
    n = len(robot_set)
    if n == 0:
        raise ValueError("empty robot set")
    k = int(math.floor(fraction * n + 1e-12))
    if k == 0:
        return robot_set, np.zeros(0, dtype=int)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    budget = max_attempts if max_attempts is not None else 1000 * k
    robots = list(robot_set.robots)
    for i in idx:
        ref = load_reference(robots[i].params.ref_id)
        robots[i], _ = _sample_viable(ref, rng, budget, sim_config)
    return replace(robot_set, robots=tuple(robots)), idx
