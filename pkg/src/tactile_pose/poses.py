"""Contact pose types, uniform sampling, loss weighting and rigid transforms.

Units are millimetres for translations and degrees for angles throughout;
angles are converted to radians only inside trig calls.

Euler convention: roll about x, then pitch about y, then yaw about z,
applied intrinsically in the sensor frame, i.e. R = Rx(roll) @ Ry(pitch) @ Rz(yaw).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

# Canonical component order; every range map and weight vector follows it.
COMPONENT_ORDER = ("x_horizontal", "y_horizontal", "depth", "roll", "pitch", "yaw")

SURFACE_COMPONENTS = ("depth", "roll", "pitch")
EDGE_COMPONENTS = ("x_horizontal", "depth", "roll", "pitch", "yaw")

MM_COMPONENTS = frozenset({"x_horizontal", "y_horizontal", "depth"})


class PoseRangeError(ValueError):
    """A range map is malformed or missing a required component."""


@dataclass(frozen=True)
class PoseRanges:
    """Closed per-component intervals, keyed by component name.

    Component names come from COMPONENT_ORDER; mm for the horizontal/depth
    components, degrees for roll/pitch/yaw.
    """

    intervals: Mapping[str, tuple[float, float]]

    def __post_init__(self) -> None:
        for name, (lo, hi) in self.intervals.items():
            if name not in COMPONENT_ORDER:
                raise PoseRangeError(f"unknown pose component {name!r}")
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise PoseRangeError(f"non-finite interval for {name!r}")
            if lo > hi:
                raise PoseRangeError(f"interval for {name!r} has lower {lo} > upper {hi}")

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(c for c in COMPONENT_ORDER if c in self.intervals)

    def require(self, components: tuple[str, ...]) -> None:
        missing = [c for c in components if c not in self.intervals]
        if missing:
            raise PoseRangeError(f"ranges missing components: {missing}")

    def interval(self, name: str) -> tuple[float, float]:
        try:
            return self.intervals[name]
        except KeyError:
            raise PoseRangeError(f"ranges missing component {name!r}") from None

    def max_abs(self, name: str) -> float:
        lo, hi = self.interval(name)
        return max(abs(lo), abs(hi))

    def contains(self, name: str, value: float, tol: float = 1e-9) -> bool:
        lo, hi = self.interval(name)
        return lo - tol <= value <= hi + tol

    def to_dict(self) -> dict[str, list[float]]:
        return {name: [lo, hi] for name, (lo, hi) in sorted(self.intervals.items())}

    @classmethod
    def from_dict(cls, d: Mapping[str, list[float] | tuple[float, float]]) -> "PoseRanges":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})

    @classmethod
    def surface_labels(cls) -> "PoseRanges":
        """Label ranges for a flat surface: depth, roll, pitch."""
        return cls({"depth": (-5.0, -1.0), "roll": (-15.0, 15.0), "pitch": (-15.0, 15.0)})

    @classmethod
    def edge_labels(cls) -> "PoseRanges":
        """Label ranges for a straight edge: x-horizontal, depth, roll, pitch, yaw."""
        return cls({
            "x_horizontal": (-5.0, 5.0),
            "depth": (-5.0, -1.0),
            "roll": (-15.0, 15.0),
            "pitch": (-15.0, 15.0),
            "yaw": (-45.0, 45.0),
        })

    @classmethod
    def perturbations(cls) -> "PoseRanges":
        """Unlabelled shear perturbation ranges; depth is pinned to zero."""
        return cls({
            "x_horizontal": (-5.0, 5.0),
            "y_horizontal": (-5.0, 5.0),
            "depth": (0.0, 0.0),
            "roll": (-5.0, 5.0),
            "pitch": (-5.0, 5.0),
            "yaw": (-5.0, 5.0),
        })


@dataclass(frozen=True)
class SurfacePose:
    """Pose of the sensor relative to a surface tangent plane."""

    depth: float
    roll: float
    pitch: float

    components = SURFACE_COMPONENTS

    def as_array(self) -> np.ndarray:
        return np.array([self.depth, self.roll, self.pitch], dtype=float)

    @classmethod
    def from_array(cls, a) -> "SurfacePose":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class EdgePose:
    """Pose of the sensor relative to a straight edge tangent line."""

    x_horizontal: float
    depth: float
    roll: float
    pitch: float
    yaw: float

    components = EDGE_COMPONENTS

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x_horizontal, self.depth, self.roll, self.pitch, self.yaw], dtype=float
        )

    @classmethod
    def from_array(cls, a) -> "EdgePose":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4]))


@dataclass(frozen=True)
class Perturbation:
    """Unlabelled shear motion applied before image capture. d_depth is always 0."""

    dx: float = 0.0
    dy: float = 0.0
    d_depth: float = 0.0
    d_roll: float = 0.0
    d_pitch: float = 0.0
    d_yaw: float = 0.0

    def __post_init__(self) -> None:
        if self.d_depth != 0.0:
            raise ValueError(f"perturbation d_depth must be 0, got {self.d_depth}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.dx, self.dy, self.d_depth, self.d_roll, self.d_pitch, self.d_yaw],
            dtype=float,
        )

    @classmethod
    def zero(cls) -> "Perturbation":
        return cls()


def sample_pose(ranges: PoseRanges, rng: np.random.Generator) -> SurfacePose | EdgePose:
    """Draw a pose with each component uniform over its interval.

    The object type is inferred from the components present: exactly
    {depth, roll, pitch} gives a SurfacePose, the five edge components give
    an EdgePose. Components are drawn in canonical order so a fixed seed
    reproduces the same pose.
    """
    present = set(ranges.components)
    if present == set(SURFACE_COMPONENTS):
        cls, order = SurfacePose, SURFACE_COMPONENTS
    elif present == set(EDGE_COMPONENTS):
        cls, order = EdgePose, EDGE_COMPONENTS
    else:
        raise PoseRangeError(
            f"ranges components {sorted(present)} match neither the surface set "
            f"{sorted(SURFACE_COMPONENTS)} nor the edge set {sorted(EDGE_COMPONENTS)}"
        )
    values = {}
    for name in COMPONENT_ORDER:
        if name not in present:
            continue
        lo, hi = ranges.interval(name)
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else lo
    return cls(*(values[name] for name in order))


def sample_perturbation(ranges: PoseRanges, rng: np.random.Generator) -> Perturbation:
    """Draw an unlabelled perturbation; the depth interval must be [0, 0]."""
    ranges.require(COMPONENT_ORDER)
    if ranges.interval("depth") != (0.0, 0.0):
        raise PoseRangeError("perturbation depth interval must be exactly [0, 0]")
    values = []
    for name in COMPONENT_ORDER:
        lo, hi = ranges.interval(name)
        values.append(float(rng.uniform(lo, hi)) if hi > lo else lo)
    dx, dy, dd, dr, dp, dyw = values
    return Perturbation(dx=dx, dy=dy, d_depth=dd, d_roll=dr, d_pitch=dp, d_yaw=dyw)


def loss_weights(ranges: PoseRanges) -> np.ndarray:
    """Per-component weights 1 / max(|bound|)^2 in the ranges' component order.

    With these weights a pose error equal to the range maximum contributes a
    squared loss of exactly one per component.
    """
    weights = []
    for name in ranges.components:
        m = ranges.max_abs(name)
        if m == 0.0:
            raise PoseRangeError(f"component {name!r} has zero max bound; weight undefined")
        weights.append(1.0 / (m * m))
    return np.array(weights, dtype=float)


# ---------------------------------------------------------------------------
# Rigid transforms (axis-angle rotation, angle in degrees)
# ---------------------------------------------------------------------------

_CANONICAL_AXIS = np.array([0.0, 0.0, 1.0])


def _rotation_from_axis_angle(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    theta = math.radians(angle_deg)
    if theta == 0.0:
        return np.eye(3)
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def _axis_angle_from_rotation(rot: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of Rodrigues; returns angle in [0, 180] deg, axis (0,0,1) at angle 0."""
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    s = np.linalg.norm(w) / 2.0
    c = (np.trace(rot) - 1.0) / 2.0
    # atan2 keeps the extraction well conditioned near 0 where acos is not.
    theta = math.atan2(s, c)
    if theta < 1e-12:
        return _CANONICAL_AXIS.copy(), 0.0
    if math.pi - theta < 1e-6:
        # Near 180 deg the off-diagonal formula degenerates; use the symmetric part.
        a = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(a), 0.0))
        i = int(np.argmax(axis))
        axis = a[:, i] / axis[i]
        axis = axis / np.linalg.norm(axis)
        return axis, math.degrees(theta)
    axis = w / (2.0 * s)
    axis = axis / np.linalg.norm(axis)
    return axis, math.degrees(theta)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion: translation tau in mm plus axis-angle rotation (unit axis, deg)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: _CANONICAL_AXIS.copy())
    angle_deg: float = 0.0

    def __post_init__(self) -> None:
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)
        if self.angle_deg == 0.0:
            object.__setattr__(self, "axis", _CANONICAL_AXIS.copy())
        else:
            a = np.asarray(self.axis, dtype=float).reshape(3)
            n = np.linalg.norm(a)
            if n == 0.0:
                raise ValueError("rotation axis must be nonzero when angle != 0")
            object.__setattr__(self, "axis", a / n)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rotation(cls, rot: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis, angle = _axis_angle_from_rotation(np.asarray(rot, dtype=float))
        return cls(np.asarray(translation, dtype=float), axis, angle)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls.from_rotation(m[:3, :3], m[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return _rotation_from_axis_angle(self.axis, self.angle_deg)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from the local frame into the parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation_matrix().T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self then other applied in self's local frame: result = self @ other."""
        r1 = self.rotation_matrix()
        r2 = other.rotation_matrix()
        return RigidTransform.from_rotation(r1 @ r2, r1 @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        r = self.rotation_matrix()
        return RigidTransform.from_rotation(r.T, -(r.T @ self.translation))

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        if np.max(np.abs(self.translation - other.translation)) > tol:
            return False
        return bool(np.max(np.abs(self.rotation_matrix() - other.rotation_matrix())) <= tol)


def compose(pose_transform: RigidTransform, delta: RigidTransform) -> RigidTransform:
    """Standard rigid composition pose_transform @ delta."""
    return pose_transform.compose(delta)


def euler_to_matrix(roll_deg: float, pitch_deg: float, yaw_deg: float) -> np.ndarray:
    """Intrinsic x-y-z rotation: R = Rx(roll) @ Ry(pitch) @ Rz(yaw)."""
    r, p, y = (math.radians(a) for a in (roll_deg, pitch_deg, yaw_deg))
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rx @ ry @ rz


def matrix_to_euler(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of euler_to_matrix; returns (roll, pitch, yaw) in degrees.

    Valid for pitch in (-90, 90) deg; the pipeline never leaves that band.
    """
    rot = np.asarray(rot, dtype=float)
    sp = np.clip(rot[0, 2], -1.0, 1.0)
    pitch = math.asin(sp)
    cp = math.cos(pitch)
    if cp < 1e-12:
        # Gimbal lock: split arbitrarily, put everything in roll.
        roll = math.atan2(rot[2, 1], rot[1, 1])
        yaw = 0.0
    else:
        roll = math.atan2(-rot[1, 2], rot[2, 2])
        yaw = math.atan2(-rot[0, 1], rot[0, 0])
    return math.degrees(roll), math.degrees(pitch), math.degrees(yaw)


def pose_to_components(pose: SurfacePose | EdgePose) -> np.ndarray:
    """Full 6-dof component vector (x, y, depth, roll, pitch, yaw); absent components are 0."""
    if isinstance(pose, SurfacePose):
        return np.array([0.0, 0.0, pose.depth, pose.roll, pose.pitch, 0.0])
    if isinstance(pose, EdgePose):
        return np.array([pose.x_horizontal, 0.0, pose.depth, pose.roll, pose.pitch, pose.yaw])
    raise TypeError(f"not a pose: {pose!r}")


def components_to_transform(c: np.ndarray) -> RigidTransform:
    """Transform for a 6-dof component vector (x, y, depth, roll, pitch, yaw)."""
    rot = euler_to_matrix(c[3], c[4], c[5])
    return RigidTransform.from_rotation(rot, (c[0], c[1], c[2]))


def pose_to_transform(pose: SurfacePose | EdgePose) -> RigidTransform:
    """World transform of the sensor for a labelled pose over the canonical object frame."""
    return components_to_transform(pose_to_components(pose))


def perturbed_components(pose: SurfacePose | EdgePose, perturbation: Perturbation) -> np.ndarray:
    """6-dof components of (pose - perturbation), the contact pose before the final move."""
    return pose_to_components(pose) - perturbation.as_array()
