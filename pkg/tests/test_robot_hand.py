import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import interior
from oracles import central_diff, clamp_loop, fk_points, rel_err
from xdex import kernels
from xdex.robot_hand import (KinematicLoopError, URDFError, UnsupportedJointError, clamp, fk,
                             jacobian, load_hand, load_urdf, points, points_and_jacobian,
                             fixture_path, randomize_mount)

TIP_CONFIG = {"palm_link": "base", "fingertips": [{"link": "tip", "finger_tag": "index"}]}


def single_joint_urdf(jtype="revolute", axis="0 0 1", L=0.1, extra=""):
    return f"""<robot name="one">
  <link name="base"/><link name="f1"/><link name="tip"/>{extra}
  <joint name="j1" type="{jtype}">
    <parent link="base"/><child link="f1"/>
    <axis xyz="{axis}"/><limit lower="-2" upper="2"/>
  </joint>
  <joint name="tip_fixed" type="fixed">
    <parent link="f1"/><child link="tip"/><origin xyz="{L} 0 0"/>
  </joint>
</robot>"""


def test_minimal_hand():
    model = load_urdf(single_joint_urdf(), TIP_CONFIG)
    assert (model.m, model.n) == (1, 1)


@pytest.mark.parametrize("jtype", ["continuous", "floating", "planar"])
def test_unsupported_joint_named(jtype):
    with pytest.raises(UnsupportedJointError, match="j1") as exc:
        load_urdf(single_joint_urdf(jtype), TIP_CONFIG)
    assert exc.value.joint == "j1"


def test_malformed_xml():
    with pytest.raises(URDFError):
        load_urdf("<robot><link", TIP_CONFIG)


def test_kinematic_loop():
    loop = single_joint_urdf().replace("</robot>", """
  <joint name="back" type="fixed"><parent link="tip"/><child link="base"/></joint></robot>""")
    with pytest.raises(KinematicLoopError):
        load_urdf(loop, TIP_CONFIG)


def test_missing_link_in_config():
    with pytest.raises(URDFError, match="nowhere"):
        load_urdf(single_joint_urdf(), {**TIP_CONFIG, "palm_link": "nowhere"})


def test_four_finger_fixture(four):
    assert (four.m, four.n) == (8, 4)
    assert four.finger_tags == ("thumb", "index", "middle", "ring")
    assert four.actuated_order == tuple(f"{f}_j{i}" for f in four.finger_tags for i in (0, 1))
    expected = {"thumb_j0": (-0.5, 0.8), "thumb_j1": (0.0, 1.4)}
    for f in ("index", "middle", "ring"):
        expected[f"{f}_j0"] = (-0.2, 1.6)
        expected[f"{f}_j1"] = (0.0, 1.7)
    got = dict(zip(four.actuated_order, zip(four.lower.tolist(), four.upper.tolist())))
    assert got == expected


def test_five_finger_mimic_excluded(five):
    assert (five.m, five.n) == (10, 5)
    assert not any(name.endswith("_j2") for name in five.actuated_order)


def test_zero_q_manual_chain(four):
    # palm = mount origin; thumb tip = palm + Ry(0.1) (o_j0 + Rz(0.9) (0.05 + 0.045, 0, 0))
    c, s = math.cos(0.1), math.sin(0.1)
    Ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    cz, sz = math.cos(0.9), math.sin(0.9)
    local = np.array([0.035, 0.045, -0.015]) + 0.095 * np.array([cz, sz, 0.0])
    frames = fk(four, np.zeros(8))
    assert np.allclose(frames.palm, [0, 0, 0.03], atol=1e-15)
    assert np.allclose(frames.tips[0], frames.palm + Ry @ local, atol=1e-12)


def test_fk_matches_scipy_chain(hand, rng):
    for _ in range(50):
        q = rng.uniform(hand.lower, hand.upper)
        assert np.allclose(points(hand, q), fk_points(hand, q), atol=1e-12)


def test_single_revolute_closed_form():
    L = 0.1
    model = load_urdf(single_joint_urdf(L=L), TIP_CONFIG)
    assert np.allclose(fk(model, [np.pi / 2]).tips[0], [0, L, 0], atol=1e-10)
    J = jacobian(model, [0.0])
    assert np.allclose(J[3:, 0], [0, L, 0], atol=1e-15)
    assert np.all(J[:3] == 0)


def test_prismatic_joint():
    model = load_urdf(single_joint_urdf("prismatic", axis="0 1 0"), TIP_CONFIG)
    assert np.allclose(fk(model, [0.3]).tips[0], [0.1, 0.3, 0], atol=1e-15)
    assert np.allclose(jacobian(model, [0.3])[3:, 0], [0, 1, 0])


def test_limits_are_total_and_unclamped(hand):
    for q in (hand.lower, hand.upper):
        assert np.all(np.isfinite(points(hand, q)))
    beyond = hand.upper + 0.3
    assert not np.allclose(points(hand, beyond), points(hand, hand.upper))


def test_jacobian_finite_difference(hand, rng):
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(hand.lower, hand.upper)
        fd = central_diff(lambda x: points(hand, x), q, 1e-6)
        worst = max(worst, rel_err(jacobian(hand, q), fd))
    assert worst < 1e-5


def test_off_chain_blocks_zero(four, rng):
    J = jacobian(four, rng.uniform(four.lower, four.upper)).reshape(5, 3, 8)
    assert np.all(J[0] == 0)  # palm moves with no finger joint
    for f in range(4):
        for col, name in enumerate(four.actuated_order):
            if not name.startswith(four.finger_tags[f]):
                assert np.all(J[1 + f, :, col] == 0)


def test_dimension_mismatch(four):
    for fn in (fk, jacobian):
        with pytest.raises(ValueError):
            fn(four, np.zeros(7))


def test_numba_and_numpy_kernels_agree(hand, rng):
    a = hand._arrays
    for _ in range(20):
        q = rng.uniform(hand.lower, hand.upper)
        args = (q, *hand.kernel_args(), a["point_links"], a["ancestor"])
        p1, j1 = kernels.points_jacobian_numba(*args)
        p2, j2 = kernels.points_jacobian_numpy(*args)
        assert np.allclose(p1, p2, atol=1e-15) and np.allclose(j1, j2, atol=1e-15)


# clamp


def test_clamp_in_range_unchanged(four, rng):
    q = interior(four, rng)
    assert np.array_equal(clamp(four, q), q)


def test_clamp_below(four):
    assert np.array_equal(clamp(four, four.lower - 5), four.lower)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-3, 3)))
def test_clamp_matches_loop(q):
    model = _four()
    assert clamp(model, q).tolist() == clamp_loop(q, model.lower, model.upper)


@functools.lru_cache(maxsize=None)
def _four():
    # hypothesis tests cannot take function-scoped fixtures
    return load_hand(fixture_path("four_finger"))


# mount randomization


def test_mount_sigma_zero_bit_identical(four, rng):
    same = randomize_mount(four, 0.0, seed=5)
    assert same.joints == four.joints
    q = rng.uniform(four.lower, four.upper)
    assert np.array_equal(points(same, q), points(four, q))


def test_mount_shift_is_constant_translation(hand, rng):
    moved = randomize_mount(hand, 0.02, seed=11)
    shifts = []
    for _ in range(20):
        q = rng.uniform(hand.lower, hand.upper)
        shifts.append(points(moved, q) - points(hand, q))
    shifts = np.concatenate(shifts)
    assert np.linalg.norm(shifts[0]) > 1e-4
    assert np.allclose(shifts, shifts[0], atol=1e-12)


def test_mount_noise_mean(four):
    sigma = 0.01
    base = np.array(four.joint("mount").xyz)
    offsets = np.array([np.subtract(randomize_mount(four, sigma, s).joint("mount").xyz, base)
                        for s in range(10_000)])
    assert np.all(np.abs(offsets.mean(axis=0)) <= 3 * sigma / 100)


def test_mount_not_declared():
    model = load_urdf(single_joint_urdf(), TIP_CONFIG)
    with pytest.raises(URDFError):
        randomize_mount(model, 0.01, 0)


def test_points_and_jacobian_consistent(five, rng):
    q = rng.uniform(five.lower, five.upper)
    pts, J = points_and_jacobian(five, q)
    assert np.array_equal(pts, points(five, q))
    assert J.shape == (18, 10)
