"""Tests for the PI servo loop, pose oracle and trajectory exports."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tactile_pose import poses, sensor, servo
from tactile_pose.poses import EdgePose, RigidTransform, SurfacePose, pose_to_transform
from tactile_pose.sensor import ContactObject, small_profile_simulator
from tactile_pose.servo import ServoConfig, ServoState, oracle_pose, pi_step


@pytest.fixture(scope="module")
def sim():
    return small_profile_simulator()


@pytest.fixture(scope="module")
def plane():
    return ContactObject.plane()


class TestPiStep:
    def test_zero_error_zero_output(self):
        config = ServoConfig(object_type="surface")
        delta, state = pi_step(np.zeros(3), ServoState.initial(config), config)
        np.testing.assert_array_equal(delta, 0.0)
        np.testing.assert_array_equal(state.integral, 0.0)

    def test_first_step_translation_gain(self):
        # 1 mm depth error, first step: 0.5 * 1 + 0.3 * 1 = 0.8 mm.
        config = ServoConfig(object_type="surface")
        e = np.array([1.0, 0.0, 0.0])
        delta, _ = pi_step(e, ServoState.initial(config), config)
        assert delta[0] == pytest.approx(0.8, abs=1e-15)

    def test_first_step_rotation_gain(self):
        # 1 deg roll error, first step: 0.5 + 0.1 = 0.6 deg.
        config = ServoConfig(object_type="surface")
        e = np.array([0.0, 1.0, 0.0])
        delta, _ = pi_step(e, ServoState.initial(config), config)
        assert delta[1] == pytest.approx(0.6, abs=1e-15)

    def test_constant_error_accumulates(self):
        # After n+1 identical steps: delta = (Kp + (n+1) Ki) e.
        config = ServoConfig(object_type="surface")
        e = np.array([1.0, 2.0, -1.0])
        state = ServoState.initial(config)
        for n in range(6):
            delta, state = pi_step(e, state, config)
        expected = (config.kp_vector() + 6 * config.ki_vector()) * e
        np.testing.assert_allclose(delta, expected, atol=1e-12)

    def test_edge_gain_layout(self):
        config = ServoConfig(object_type="edge")
        np.testing.assert_array_equal(config.ki_vector(), [0.3, 0.3, 0.1, 0.1, 0.1])
        delta, _ = pi_step(np.array([1.0, 1.0, 1.0, 1.0, 1.0]),
                           ServoState.initial(config), config)
        np.testing.assert_allclose(delta, [0.8, 0.8, 0.6, 0.6, 0.6], atol=1e-15)

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=50, deadline=None)
    def test_linearity_with_fresh_accumulators(self, a, b, e1x, e2x):
        config = ServoConfig(object_type="surface")
        e1 = np.array([e1x, 0.5, -0.25])
        e2 = np.array([e2x, -1.0, 0.75])
        d1, _ = pi_step(e1, ServoState.initial(config), config)
        d2, _ = pi_step(e2, ServoState.initial(config), config)
        dc, _ = pi_step(a * e1 + b * e2, ServoState.initial(config), config)
        np.testing.assert_allclose(dc, a * d1 + b * d2, atol=1e-9)

    def test_non_finite_error_rejected(self):
        config = ServoConfig(object_type="surface")
        with pytest.raises(ValueError):
            pi_step(np.array([np.nan, 0.0, 0.0]), ServoState.initial(config), config)


class TestOraclePose:
    def test_plane_normal_press(self, plane):
        est = oracle_pose(plane, RigidTransform(np.array([0.0, 0.0, -3.0])))
        np.testing.assert_allclose(est, [-3.0, 0.0, 0.0], atol=1e-12)

    def test_tilted_plane_reads_roll(self):
        # A plane tilted 10 deg about x seen by a world-upright sensor:
        # roll magnitude 10 deg. Oracle: rotation-matrix decomposition.
        # Model it as the equivalent sensor rotated -10 deg over a flat plane.
        plane = ContactObject.plane()
        tf = pose_to_transform(SurfacePose(-3.0, -10.0, 0.0))
        est = oracle_pose(plane, tf)
        assert est[1] == pytest.approx(-10.0, abs=1e-9)
        assert abs(est[2]) < 1e-9

    def test_inverts_surface_labels(self, plane):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = SurfacePose(rng.uniform(-5, -1), rng.uniform(-15, 15),
                               rng.uniform(-15, 15))
            est = oracle_pose(plane, pose_to_transform(pose))
            np.testing.assert_allclose(est, pose.as_array(), atol=1e-9)

    def test_inverts_edge_labels(self):
        edge = ContactObject.half_plane_edge()
        rng = np.random.default_rng(1)
        for _ in range(50):
            pose = EdgePose(rng.uniform(-5, 5), rng.uniform(-5, -1),
                            rng.uniform(-15, 15), rng.uniform(-15, 15),
                            rng.uniform(-45, 45))
            est = oracle_pose(edge, pose_to_transform(pose))
            np.testing.assert_allclose(est, pose.as_array(), atol=1e-9)

    def test_straight_edge_offset(self):
        edge = ContactObject.half_plane_edge()
        est = oracle_pose(edge, RigidTransform(np.array([2.0, 7.0, -3.0])))
        np.testing.assert_allclose(est, [2.0, -3.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_sphere_top(self):
        sph = ContactObject.sphere(60.0, center=(0.0, 0.0, -60.0))
        est = oracle_pose(sph, RigidTransform(np.array([0.0, 0.0, -3.0])))
        np.testing.assert_allclose(est, [-3.0, 0.0, 0.0], atol=1e-12)

    def test_no_contact_raises(self, plane):
        with pytest.raises(servo.NoContactError):
            oracle_pose(plane, RigidTransform(np.array([0.0, 0.0, 5.0])))


class TestExplore:
    def test_plane_equilibrium_error_stays_zero(self, sim, plane):
        config = ServoConfig(object_type="surface", max_steps=500)
        est = servo.make_oracle_estimator(plane)
        start = RigidTransform(np.array([0.0, 0.0, -3.0]))
        traj = servo.explore(est, plane, config, sim, start)
        assert traj.status == "completed"
        assert len(traj) == 500
        np.testing.assert_allclose(traj.errors(), 0.0, atol=1e-12)
        # Straight 1 mm/step line in +x.
        pos = traj.positions()
        np.testing.assert_allclose(np.diff(pos[:, 0]), 1.0, atol=1e-12)
        np.testing.assert_allclose(pos[:, 2], -3.0, atol=1e-12)

    def test_sphere_alignment_after_transient(self, sim):
        sph = ContactObject.sphere(60.0, center=(0.0, 0.0, -60.0))
        config = ServoConfig(object_type="surface", max_steps=200)
        est = servo.make_oracle_estimator(sph)
        traj = servo.explore(est, sph, config, sim,
                             RigidTransform(np.array([0.0, 0.0, -3.0])))
        assert traj.status == "completed" and len(traj) == 200
        errs = traj.errors()
        align = np.abs(errs[10:, 1:]).max()
        assert align < 2.0
        # The path hugs the offset sphere: |p - c| ~ radius + reference depth.
        pos = traj.positions()
        radii = np.linalg.norm(pos - np.array([0.0, 0.0, -60.0]), axis=1)
        np.testing.assert_allclose(radii[10:], 57.0, atol=0.5)

    def test_sphere_boundedness_500_steps(self, sim):
        sph = ContactObject.sphere(60.0, center=(0.0, 0.0, -60.0))
        config = ServoConfig(object_type="surface", max_steps=500)
        est = servo.make_oracle_estimator(sph)
        traj = servo.explore(est, sph, config, sim,
                             RigidTransform(np.array([0.0, 0.0, -3.0])))
        assert traj.status == "completed"
        norms = np.linalg.norm(traj.errors(), axis=1)
        assert norms.max() < 5.0

    def test_transient_converges_from_offset_start(self, sim, plane):
        config = ServoConfig(object_type="surface", max_steps=60)
        est = servo.make_oracle_estimator(plane)
        start = pose_to_transform(SurfacePose(-1.5, 8.0, -6.0))
        traj = servo.explore(est, plane, config, sim, start)
        errs = traj.errors()
        assert np.abs(errs[-1]).max() < 0.05
        assert np.abs(errs[0]).max() > 1.0

    def test_straight_edge_follow(self, sim):
        edge = ContactObject.half_plane_edge()
        config = ServoConfig(object_type="edge", max_steps=100)
        est = servo.make_oracle_estimator(edge)
        traj = servo.explore(est, edge, config, sim,
                             RigidTransform(np.array([2.0, 0.0, -3.0])))
        assert traj.status == "completed"
        errs = traj.errors()
        assert np.abs(errs[20:, 0]).max() < 0.1  # x centred on the edge
        pos = traj.positions()
        assert pos[-1, 1] > 90.0  # travelled along the edge

    def test_rounded_rect_contour_follow(self, sim):
        rect = ContactObject.rounded_rect_edge(half_w=40.0, half_h=35.0, corner_r=12.0)
        config = ServoConfig(object_type="edge", max_steps=300)
        est = servo.make_oracle_estimator(rect)
        traj = servo.explore(est, rect, config, sim,
                             RigidTransform(np.array([40.0, 0.0, -3.0])))
        assert traj.status == "completed"
        errs = traj.errors()
        assert np.abs(errs[20:, 0]).max() < 0.5
        pos = traj.positions()
        # Circumnavigates: touches all four sides of the plate.
        assert pos[:, 0].max() > 39 and pos[:, 0].min() < -39
        assert pos[:, 1].max() > 34 and pos[:, 1].min() < -34

    def test_contact_loss_flagged(self, sim, plane):
        # An estimator that always reports "too deep" drives the sensor up
        # and off the surface.
        def liar(image, tf):
            return np.array([-6.0, 0.0, 0.0])

        config = ServoConfig(object_type="surface", max_steps=50)
        traj = servo.explore(liar, plane, config, sim,
                             RigidTransform(np.array([0.0, 0.0, -2.0])))
        assert traj.status == "contact_lost"
        assert len(traj) < 50

    def test_no_teleportation(self, sim):
        sph = ContactObject.sphere(60.0, center=(0.0, 0.0, -60.0))
        config = ServoConfig(object_type="surface", max_steps=100)
        est = servo.make_oracle_estimator(sph)
        traj = servo.explore(est, sph, config, sim,
                             RigidTransform(np.array([0.0, 0.0, -2.0])))
        pos = traj.positions()
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        for k, s in enumerate(steps):
            dt = np.linalg.norm(traj.steps[k].delta[:1])  # translation part
            assert s <= config.step_mm + dt + 0.75  # rotation lever arm slack


@pytest.fixture(scope="module")
def trajectory(sim, plane):
    config = ServoConfig(object_type="surface", max_steps=40)
    est = servo.make_oracle_estimator(plane)
    return servo.explore(est, plane, config, sim,
                         RigidTransform(np.array([0.0, 0.0, -3.0])))


class TestExports:

    def test_csv_columns_and_rows(self, trajectory, tmp_path):
        path = tmp_path / "traj.csv"
        servo.save_trajectory_csv(trajectory, path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == servo.trajectory_columns("surface")
        assert len(lines) == 1 + len(trajectory)
        assert lines[1].endswith("completed")

    def test_svg_written(self, trajectory, tmp_path):
        path = tmp_path / "traj.svg"
        servo.save_trajectory_svg(trajectory, path)
        content = path.read_text()
        assert content.lstrip().startswith("<?xml")
        assert "svg" in content[:400]
