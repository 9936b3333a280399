"""Closed-loop PI tactile servoing over synthetic objects.

Each step renders a tactile image at the current world pose (with shear
memory from the previous step's motion), estimates the local contact pose,
applies a discrete PI correction in the sensor frame, then advances 1 mm
tangentially (fixed heading for surfaces, along the estimated edge
direction for edges).

Pose conventions match the training labels: for surfaces, roll/pitch encode
the surface normal expressed in sensor coordinates; for edges the local
frame is (across-edge, along-edge, normal) built from the boundary geometry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .poses import RigidTransform, components_to_transform, matrix_to_euler
from .sensor import ContactObject, Simulator

SURFACE_KINDS = ("plane", "sphere", "heightfield")
EDGE_KINDS = ("half_plane_edge", "rounded_rect_edge")

# The oracle refuses to report a pose when the sensor is hovering this far
# above the surface; the servo regime keeps the pole well below it.
ORACLE_CONTACT_MARGIN_MM = 2.0


class NoContactError(RuntimeError):
    """Sensor is out of contact range of the object."""


@dataclass(frozen=True)
class ServoConfig:
    """PI gains and loop parameters.

    Error vectors are (depth, roll, pitch) for surfaces and (x_horizontal,
    depth, roll, pitch, yaw) for edges; integral gains differ between
    translation and rotation components.
    """

    object_type: str = "surface"
    kp: float = 0.5
    ki_translation: float = 0.3
    ki_rotation: float = 0.1
    step_mm: float = 1.0
    reference_depth: float = -3.0
    max_steps: int = 200

    def __post_init__(self) -> None:
        if self.object_type not in ("surface", "edge"):
            raise ValueError(f"unknown object type {self.object_type!r}")
        if self.kp < 0 or self.ki_translation < 0 or self.ki_rotation < 0:
            raise ValueError("gains must be >= 0")
        if self.step_mm <= 0:
            raise ValueError("step_mm must be > 0")

    @property
    def n_components(self) -> int:
        return 3 if self.object_type == "surface" else 5

    def reference(self) -> np.ndarray:
        if self.object_type == "surface":
            return np.array([self.reference_depth, 0.0, 0.0])
        return np.array([0.0, self.reference_depth, 0.0, 0.0, 0.0])

    def kp_vector(self) -> np.ndarray:
        return np.full(self.n_components, self.kp)

    def ki_vector(self) -> np.ndarray:
        if self.object_type == "surface":
            return np.array([self.ki_translation, self.ki_rotation, self.ki_rotation])
        return np.array([self.ki_translation, self.ki_translation,
                         self.ki_rotation, self.ki_rotation, self.ki_rotation])


@dataclass(frozen=True)
class ServoState:
    """Integral accumulator and step counter."""

    integral: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, config: ServoConfig) -> "ServoState":
        return cls(integral=np.zeros(config.n_components), t=0)


def pi_step(error: np.ndarray, state: ServoState,
            config: ServoConfig) -> tuple[np.ndarray, ServoState]:
    """Discrete PI law: delta = Kp e(t) + Ki sum_{t'<=t} e(t')."""
    error = np.asarray(error, dtype=float)
    if error.shape != (config.n_components,):
        raise ValueError(f"error must have shape ({config.n_components},)")
    if not np.all(np.isfinite(error)):
        raise ValueError("error must be finite")
    integral = state.integral + error
    delta = config.kp_vector() * error + config.ki_vector() * integral
    return delta, ServoState(integral=integral, t=state.t + 1)


# -- geometric pose oracle ----------------------------------------------------

def _surface_foot_point(obj: ContactObject, p: np.ndarray):
    """Nearest surface point and outward normal under the sensor pole."""
    if obj.kind == "plane" or obj.kind in EDGE_KINDS:
        return np.array([p[0], p[1], 0.0]), np.array([0.0, 0.0, 1.0])
    if obj.kind == "sphere":
        c = np.asarray(obj.center)
        d = p - c
        r = np.linalg.norm(d)
        if r < 1e-9:
            raise NoContactError("sensor pole at the sphere centre")
        n = d / r
        return c + n * obj.radius, n
    if obj.kind == "heightfield":
        q = np.array([p[0], p[1], 0.0])
        for _ in range(12):
            z, n = obj._heightfield_eval(q[:1], q[1:2])
            q[2] = z[0]
            delta = p - q
            tang = delta - np.dot(delta, n[0]) * n[0]
            if np.linalg.norm(tang[:2]) < 1e-10:
                break
            q[0] += tang[0]
            q[1] += tang[1]
        z, n = obj._heightfield_eval(q[:1], q[1:2])
        q[2] = z[0]
        return q, n[0]
    raise ValueError(f"oracle does not support object kind {obj.kind!r}")


def _edge_frame(obj: ContactObject, p: np.ndarray):
    """(across-edge distance, across direction, along direction) at the pole."""
    sd, g = obj.boundary_sd(p[0], p[1])
    across = np.array([g[0], g[1], 0.0])
    along = np.array([-g[1], g[0], 0.0])  # counter-clockwise travel
    return sd, across, along


def oracle_pose(obj: ContactObject, tf: RigidTransform) -> np.ndarray:
    """Exact local pose of the sensor relative to the tangent plane or edge.

    Surfaces return (depth, roll, pitch); edges (x_horizontal, depth, roll,
    pitch, yaw). Raises NoContactError if the pole hovers more than
    ORACLE_CONTACT_MARGIN_MM above the surface.
    """
    p = tf.translation
    rot = tf.rotation_matrix()
    if obj.kind in EDGE_KINDS:
        x_h, across, along = _edge_frame(obj, p)
        depth = p[2]
        if depth > ORACLE_CONTACT_MARGIN_MM:
            raise NoContactError(f"pole {depth:.2f} mm above the surface")
        normal = np.array([0.0, 0.0, 1.0])
        frame = np.column_stack([across, along, normal])
        roll, pitch, yaw = matrix_to_euler(frame.T @ rot)
        return np.array([x_h, depth, roll, pitch, yaw])

    q, n = _surface_foot_point(obj, p)
    depth = float(np.dot(n, p - q))
    if depth > ORACLE_CONTACT_MARGIN_MM:
        raise NoContactError(f"pole {depth:.2f} mm above the surface")
    # Normal in sensor coordinates; invert labels (roll about x then pitch
    # about y) from it. Heading-free, so it matches training labels exactly.
    n_s = rot.T @ n
    roll = math.asin(np.clip(n_s[1], -1.0, 1.0))
    cr = math.cos(roll)
    if abs(cr) < 1e-9:
        raise NoContactError("degenerate orientation: normal in the sensor x-plane")
    pitch = math.asin(np.clip(-n_s[0] / cr, -1.0, 1.0))
    return np.array([depth, math.degrees(roll), math.degrees(pitch)])


def make_oracle_estimator(obj: ContactObject) -> Callable:
    """Estimator that ignores the image and reads the exact geometric pose."""

    def estimator(image: np.ndarray, tf: RigidTransform) -> np.ndarray:
        return oracle_pose(obj, tf)

    return estimator


# -- the exploration loop -------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryStep:
    t: int
    world: RigidTransform
    estimate: np.ndarray
    error: np.ndarray
    delta: np.ndarray


@dataclass
class Trajectory:
    object_type: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    status: str = "completed"

    def __len__(self) -> int:
        return len(self.steps)

    def positions(self) -> np.ndarray:
        return np.array([s.world.translation for s in self.steps])

    def normals(self) -> np.ndarray:
        """Sensor z axis per step (the direction the controller aligns)."""
        return np.array([s.world.rotation_matrix()[:, 2] for s in self.steps])

    def errors(self) -> np.ndarray:
        return np.array([s.error for s in self.steps])


def _delta_transform(delta: np.ndarray, object_type: str) -> RigidTransform:
    if object_type == "surface":
        dz, droll, dpitch = delta
        return components_to_transform(np.array([0.0, 0.0, dz, droll, dpitch, 0.0]))
    dx, dz, droll, dpitch, dyaw = delta
    return components_to_transform(np.array([dx, 0.0, dz, droll, dpitch, dyaw]))


def _advance_transform(config: ServoConfig, estimate: np.ndarray) -> RigidTransform:
    if config.object_type == "surface":
        return RigidTransform(np.array([config.step_mm, 0.0, 0.0]))
    yaw = math.radians(float(estimate[4]))
    # The edge runs along the sensor y axis when yaw = 0; a yawed sensor sees
    # it rotated the opposite way.
    direction = np.array([math.sin(yaw), math.cos(yaw), 0.0])
    return RigidTransform(config.step_mm * direction)


def explore(
    estimator: Callable,
    obj: ContactObject,
    config: ServoConfig,
    sim: Simulator,
    initial: RigidTransform,
) -> Trajectory:
    """Run the servo loop from an initial world pose.

    estimator(image, world_tf) -> local pose array. The previous step's
    motion feeds the simulator as the shear perturbation of the next render.
    Terminates after max_steps or at contact loss (flagged in status).
    """
    reference = config.reference()
    state = ServoState.initial(config)
    tf = initial
    prev_tf: Optional[RigidTransform] = None
    trajectory = Trajectory(object_type=config.object_type)
    for t in range(config.max_steps):
        pins = sim.contact_at(obj, tf, prev_tf)
        if pins.contact_count == 0:
            trajectory.status = "contact_lost"
            break
        image = sim.render(pins)
        estimate = np.asarray(estimator(image, tf), dtype=float)
        error = reference - estimate
        delta, state = pi_step(error, state, config)
        trajectory.steps.append(
            TrajectoryStep(t=t, world=tf, estimate=estimate, error=error, delta=delta)
        )
        step_tf = _delta_transform(delta, config.object_type).compose(
            _advance_transform(config, estimate)
        )
        prev_tf = tf
        tf = tf.compose(step_tf)
    return trajectory


# -- exports ---------------------------------------------------------------------

def trajectory_columns(object_type: str) -> list[str]:
    comps = (
        ["depth", "roll", "pitch"]
        if object_type == "surface"
        else ["x_horizontal", "depth", "roll", "pitch", "yaw"]
    )
    cols = ["t", "x", "y", "z", "axis_x", "axis_y", "axis_z", "angle_deg"]
    cols += [f"est_{c}" for c in comps]
    cols += [f"err_{c}" for c in comps]
    cols += [f"ds_{c}" for c in comps]
    cols.append("status")
    return cols


def save_trajectory_csv(trajectory: Trajectory, path: str | Path) -> None:
    """One row per step; the status column repeats the trajectory status."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(trajectory_columns(trajectory.object_type))
        for s in trajectory.steps:
            row = [s.t]
            row += [repr(float(v)) for v in s.world.translation]
            row += [repr(float(v)) for v in s.world.axis]
            row.append(repr(float(s.world.angle_deg)))
            row += [repr(float(v)) for v in s.estimate]
            row += [repr(float(v)) for v in s.error]
            row += [repr(float(v)) for v in s.delta]
            row.append(trajectory.status)
            writer.writerow(row)


def save_trajectory_svg(trajectory: Trajectory, path: str | Path,
                        glyph_every: int = 10) -> None:
    """Top (x-y) and side (x-z) projections with sensor-normal glyphs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos = trajectory.positions()
    normals = trajectory.normals()
    fig, (ax_top, ax_side) = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, (i, j), name in ((ax_top, (0, 1), "top view (x-y)"),
                             (ax_side, (0, 2), "side view (x-z)")):
        ax.plot(pos[:, i], pos[:, j], "-", lw=1.2, color="tab:blue")
        k = slice(None, None, max(1, glyph_every))
        ax.quiver(pos[k, i], pos[k, j], normals[k, i], normals[k, j],
                  color="tab:red", width=0.004, scale=12)
        ax.set_xlabel("xyz"[i] + " [mm]")
        ax.set_ylabel("xyz"[j] + " [mm]")
        ax.set_title(name)
        ax.set_aspect("equal", adjustable="datalim")
    fig.suptitle(f"servo trajectory ({trajectory.object_type}, {trajectory.status})")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
