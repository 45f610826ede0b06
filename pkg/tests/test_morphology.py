import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pal_loco import morphology as mo
from pal_loco.morphology import (
    DegenerateMorphology, GenerationExhausted, RobotEntry, RobotSet, UnsupportedReference,
    build_kinematic_tree, generate_robot_set, leg_points, load_reference, reference_params,
    reference_robot, resample_fraction, sample_morphology, viability_check,
)

# Hand transcription of the robot-generation sampling table, ids (1, 2, 4, 5).
TABLE = {
    "c_q1_x": [(0.15, 0.4), (0.15, 0.45), (0.225, 0.45), (0.18, 0.5)],
    "c_q1_y": [(0, 0.25), (0, 0.25), (0.05, 0.23), (0.05, 0.27)],
    "c_q1_z": [(-0.1, 0.12), (-0.1, 0.12), (-0.18, 0.18), (-0.22, 0.15)],
    "c_q2_x": [(-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.15), (-0.1, 0.2)],
    "c_q2_y": [(-0.04, 0.13), (0.04, 0.12), (0.015, 0.12), (-0.15, -0.05)],
    "c_q2_z": [(-0.1, 0.1), (-0.06, 0.1), (-0.07, 0.07), (-0.1, 0.06)],
    "c_q3_x": [(-0.05, 0.18), (-0.05, 0.15), (-0.1, 0.1), (-0.1, 0.2)],
    "c_q3_y": [(-0.05, 0.1), (-0.05, 0.1), (-0.05, 0.16), (-0.2, 0.15)],
    "c_q3_z": [(-0.24, -0.12), (-0.28, -0.1), (-0.35, -0.18), (-0.35, -0.18)],
    "m_base": [(2, 28), (4, 30), (6, 40), (18, 50)],
    "m_hip": [(0.25, 1), (0.25, 2.6), (0.5, 3), (1.4, 4)],
    "m_thigh": [(0.5, 4), (0.4, 3), (0.6, 4.5), (1.8, 5)],
    "m_shank": [(0.08, 0.9), (0.1, 0.5), (0.15, 0.6), (0.25, 1)],
    "c_f_z": [(-0.025, 0.12)] * 4,
    "qn_abd": [(-0.15, 0.15)] * 4,
    "qn_X_front_hfe": [(0.3, 0.9)] * 4,
    "qn_X_hind_hfe": [(0.3, 0.9)] * 4,
    "qn_X_kfe": [(-1.2, -0.6)] * 4,
    "qn_A_front_hfe": [(0.3, 0.9)] * 4,
    "qn_A_hind_hfe": [(0.3, 0.9)] * 4,
    "qn_A_kfe": [(-1.8, -0.7)] * 4,
    "Kp": [(15, 80), (15, 80), (30, 120), (35, 120)],
    "Kd": [(0.2, 3)] * 4,
    "tau_max": [(15, 120), (15, 50), (40, 80), (40, 140)],
    "mu_f": [(0.2, 1.1)] * 4,
}
IDS = (1, 2, 4, 5)


def row(name, ref_id):
    return TABLE[name][IDS.index(ref_id)]


def assert_params_in_table(p, ref_id):
    """Bounds check written against the transcription, not the package tables."""
    lo_hi = lambda name: row(name, ref_id)  # noqa: E731
    for k in range(3):
        for a, axis in enumerate("xyz"):
            lo, hi = lo_hi(f"c_q{k + 1}_{axis}")
            v = p.joint_offsets[k::3, a]
            assert np.all((lo <= v) & (v <= hi)), (k, axis)
    for k, name in enumerate(("m_hip", "m_thigh", "m_shank")):
        lo, hi = lo_hi(name)
        assert np.all((lo <= p.link_masses[k::3]) & (p.link_masses[k::3] <= hi))
    for name, v in (("m_base", p.m_base), ("Kp", p.kp), ("Kd", p.kd), ("tau_max", p.tau_max),
                    ("c_f_z", p.foot_offsets), ("mu_f", p.mu_f)):
        lo, hi = lo_hi(name)
        assert np.all((lo <= np.asarray(v)) & (np.asarray(v) <= hi)), name
    c = p.leg_configuration
    assert c in ("A", "X")
    assert np.all(np.abs(p.nominal[0::3]) <= 0.15)
    lo, hi = lo_hi(f"qn_{c}_front_hfe")
    assert np.all((lo <= p.nominal[[1, 4]]) & (p.nominal[[1, 4]] <= hi))
    lo, hi = lo_hi(f"qn_{c}_hind_hfe")
    assert np.all((lo <= p.nominal[[7, 10]]) & (p.nominal[[7, 10]] <= hi))
    lo, hi = lo_hi(f"qn_{c}_kfe")
    assert np.all((lo <= p.nominal[2::3]) & (p.nominal[2::3] <= hi))
    assert 0.0 <= p.latency <= 0.020
    assert p.m_base > 0 and np.all(p.link_masses > 0)


@pytest.mark.parametrize("ref_id", IDS)
def test_reference_tables_match_transcription(ref_id):
    ref = load_reference(ref_id)
    assert set(ref.sampling_table) == set(TABLE)
    for name in TABLE:
        assert ref.sampling_table[name] == pytest.approx(row(name, ref_id)), name
        lo, hi = ref.sampling_table[name]
        assert lo <= hi


def test_table_examples():
    assert load_reference(1).sampling_table["m_base"] == (2.0, 28.0)
    assert load_reference(5).sampling_table["Kp"] == (35.0, 120.0)


def test_reference_three_is_rejected():
    with pytest.raises(UnsupportedReference):
        load_reference(3)
    with pytest.raises(UnsupportedReference):
        mo.parse_ids("1,3")
    assert mo.parse_ids("1,2,4,5") == [1, 2, 4, 5]


@pytest.mark.parametrize("ref_id", IDS)
def test_samples_stay_in_table(ref_id):
    ref = load_reference(ref_id)
    rng = np.random.default_rng(ref_id)
    configs = set()
    for _ in range(1000):
        p = sample_morphology(ref, rng)
        assert_params_in_table(p, ref_id)
        configs.add(p.leg_configuration)
    assert configs == {"A", "X"}


def test_sampling_is_deterministic():
    ref = load_reference(1)
    a = sample_morphology(ref, np.random.default_rng(42))
    b = sample_morphology(ref, np.random.default_rng(42))
    assert a.to_dict() == b.to_dict()


def test_params_roundtrip():
    p = sample_morphology(load_reference(4), np.random.default_rng(3))
    assert mo.MorphologyParams.from_dict(p.to_dict()).to_dict() == p.to_dict()


@pytest.mark.parametrize("ref_id", IDS)
def test_tree_topology_and_mass(ref_id):
    model = reference_robot(ref_id)
    assert len(model.bodies) == 13
    assert model.bodies[0].parent == -1
    for leg in range(4):
        hip, thigh, shank = (1 + 3 * leg + k for k in range(3))
        assert model.bodies[hip].parent == 0
        assert model.bodies[thigh].parent == hip
        assert model.bodies[shank].parent == thigh
    assert [b.joint for b in model.bodies[1:]] == list(range(12))
    assert model.foot_offsets.shape == (4, 3)
    assert model.foot_positions_base(model.nominal).shape == (4, 3)
    p = model.params
    assert model.total_mass == pytest.approx(p.m_base + p.link_masses.sum(), abs=1e-12)


@pytest.mark.parametrize("ref_id", IDS)
def test_nominal_height_puts_feet_on_ground(ref_id):
    model = reference_robot(ref_id)
    feet = leg_points(model, model.nominal)["foot"]
    sole = model.nominal_base_height + feet[:, 2] - model.foot_radius
    assert abs(sole.mean()) < 1e-12


def test_straight_leg_nominal_height():
    ref = load_reference(1)
    base = reference_params(ref)
    offsets = base.joint_offsets.copy()
    offsets[0::3, 2] = 0.0
    offsets[1::3] = (0.0, 0.085, 0.0)
    offsets[2::3] = (0.0, 0.0, -0.24)
    cfz = 0.05
    p = dataclasses.replace(base, joint_offsets=offsets, foot_offsets=np.full(4, cfz),
                            nominal=np.zeros(12))
    model = build_kinematic_tree(p, ref, strict=False)
    # straight chain: knee 0.24 below the hip, foot a shank plus c_f,z below the knee
    expected = 0.24 + ref.shank_length + cfz + ref.foot_radius
    assert model.nominal_base_height == pytest.approx(expected, abs=1e-12)


def test_out_of_bounds_params_are_rejected():
    ref = load_reference(1)
    p = dataclasses.replace(reference_params(ref), m_base=100.0)
    with pytest.raises(DegenerateMorphology):
        build_kinematic_tree(p, ref)


def test_short_thigh_is_degenerate():
    ref = load_reference(1)
    base = reference_params(ref)
    offsets = base.joint_offsets.copy()
    offsets[2::3, 2] = -0.005
    with pytest.raises(DegenerateMorphology):
        build_kinematic_tree(dataclasses.replace(base, joint_offsets=offsets), ref, strict=False)


@pytest.mark.parametrize("ref_id", IDS)
def test_reference_stand_ins_are_viable(ref_id):
    assert viability_check(reference_robot(ref_id))


def test_heavy_weak_robot_outcome_is_deterministic():
    ref = load_reference(1)
    base = reference_params(ref)
    p = dataclasses.replace(base, link_masses=np.tile([1.0, 4.0, 0.9], 4), kp=15.0,
                            tau_max=15.0)
    model = build_kinematic_tree(p, ref)
    first = mo.viability_failure(model)
    assert mo.viability_failure(model) == first


def test_feet_inside_base_fail_viability():
    # knee folded fully back so a short shank points up into the base box
    ref = load_reference(1)
    base = reference_params(ref)
    offsets = base.joint_offsets.copy()
    offsets[0::3] = (0.05, 0.01, 0.0)
    offsets[1::3] = (0.0, 0.0, 0.0)
    offsets[2::3] = (0.0, 0.0, -0.03)
    p = dataclasses.replace(base, joint_offsets=offsets, foot_offsets=np.full(4, -0.12),
                            nominal=np.tile([0.0, 0.0, -np.pi], 4))
    model = build_kinematic_tree(p, ref, strict=False)
    assert np.all(np.abs(leg_points(model, p.nominal)["foot"]) < model.base_half_extents)
    reason = mo.viability_failure(model)
    assert reason is not None and "foot" in reason


def test_generation_is_deterministic_and_viable():
    a = generate_robot_set([1, 4], 2, seed=7)
    b = generate_robot_set([1, 4], 2, seed=7)
    assert a.to_json() == b.to_json()
    assert len(a) == 4 and a.ref_ids == [1, 4]
    for entry in a.robots:
        model = entry.build()
        assert model.nominal_base_height == entry.r_n
        assert viability_check(model)


def test_reference_streams_are_independent_of_the_id_set():
    solo = generate_robot_set([4], 1, seed=3)
    pair = generate_robot_set([1, 4], 1, seed=3)
    assert solo.robots[0].params.to_dict() == pair.robots[1].params.to_dict()


def test_generation_rejects_unknown_ids_and_bad_counts():
    with pytest.raises(UnsupportedReference):
        generate_robot_set([3], 1, seed=0)
    with pytest.raises(ValueError):
        generate_robot_set([1], 0, seed=0)


def test_generation_exhaustion(monkeypatch):
    monkeypatch.setattr(mo, "viability_check", lambda *a, **k: False)
    with pytest.raises(GenerationExhausted):
        generate_robot_set([1], 1, seed=0, max_attempts=5)


def test_json_roundtrip():
    s = generate_robot_set([2], 1, seed=1)
    back = RobotSet.from_json(s.to_json())
    assert back.to_json() == s.to_json()
    with pytest.raises(ValueError):
        RobotSet.from_json(s.to_json().replace('"schema_version": 1', '"schema_version": 9'))


@pytest.fixture(scope="module")
def fifty():
    model = reference_robot(1)
    entry = RobotEntry(model.params, model.nominal_base_height)
    return RobotSet(tuple([entry] * 50), 50, 0)


def test_resample_replaces_twenty_percent(fifty):
    new, idx = resample_fraction(fifty, 0.2, np.random.default_rng(5))
    assert len(idx) == 10 and len(set(idx.tolist())) == 10
    same = [a is b for a, b in zip(fifty.robots, new.robots)]
    assert sum(same) == 40
    assert all(not same[i] for i in idx)
    assert all(r.params.ref_id == 1 for r in new.robots)
    _, again = resample_fraction(fifty, 0.2, np.random.default_rng(5))
    assert np.array_equal(idx, again)


def test_resample_zero_fraction_is_identity(fifty):
    new, idx = resample_fraction(fifty, 0.0, np.random.default_rng(0))
    assert new is fifty and idx.size == 0


@settings(max_examples=30)
@given(st.integers(1, 120), st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
def test_resample_count_is_floor(n, fraction, seed):
    model = reference_robot(1)
    old = RobotEntry(model.params, model.nominal_base_height)
    fresh = RobotEntry(model.params, -1.0)
    robots = RobotSet(tuple([old] * n), n, 0)
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(mo, "_sample_viable", lambda *a, **k: (fresh, 1))
        new, idx = resample_fraction(robots, fraction, np.random.default_rng(seed))
    k = int(np.floor(fraction * n + 1e-12))
    assert idx.size == k and len(set(idx.tolist())) == k
    assert sum(r is fresh for r in new.robots) == k
