"""Synthetic pin-array optical tactile sensor.

The sensor is a compliant dome carrying a hexagonal grid of pins; contact
with an object displaces the pin tips and an internal camera views them from
above, producing a binary marker image. The contact model is quasi-static:

  * pins whose rest position penetrates the object are projected back onto
    the surface along the local contact normal;
  * contacting pins spread away from the contact centroid in proportion to
    their penetration (dome flattening), which makes indentation depth
    visible in the orthographic marker image;
  * contacting pins are dragged by the tangential component of the net
    sensor motion since the previous contact (stick shear), attenuated by
    exp(-r/lambda) with r the distance from the contact centroid;
  * non-contacting pins relax toward rest under a membrane coupling to the
    displaced contact pins.

Sensor frame: z up into the sensor body, pole of the dome at the origin,
so an upright sensor at world height z presses its pole to depth z < 0
against a plane at z = 0.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .poses import (
    EdgePose,
    Perturbation,
    RigidTransform,
    SurfacePose,
    components_to_transform,
    perturbed_components,
    pose_to_components,
)

NON_PENETRATION_TOL = 1e-6


class SensorConfigError(ValueError):
    """Sensor geometry violates a structural invariant."""


class ContactDepthError(ValueError):
    """Requested indentation exceeds the sensor compliance limit."""


class RenderBoundsError(ValueError):
    """A displaced pin projects outside the image footprint."""


def _hex_lattice(spacing: float, radius: float) -> np.ndarray:
    """Hexagonal lattice points within a disc; symmetric under 180 deg rotation."""
    row_h = spacing * math.sqrt(3.0) / 2.0
    pts = []
    jmax = int(radius / row_h) + 1
    imax = int(radius / spacing) + 1
    for j in range(-jmax, jmax + 1):
        y = j * row_h
        x_off = 0.5 * spacing if (j % 2) else 0.0
        for i in range(-imax, imax + 1):
            x = i * spacing + x_off
            if x * x + y * y <= radius * radius + 1e-9:
                pts.append((x, y))
    return np.array(sorted(pts), dtype=float)


@dataclass(frozen=True)
class SensorGeometry:
    """Dome and imaging geometry. Lengths in mm, marker radius in pixels."""

    tip_diameter: float = 40.0
    pin_spacing: float = 4.0
    dome_radius: float = 40.0
    image_size: int = 128
    marker_radius: float = 2.0
    view_margin: float = 1.35

    def __post_init__(self) -> None:
        if self.dome_radius < self.tip_diameter / 2.0:
            raise SensorConfigError("dome_radius must be at least the tip radius")
        n = len(self.pin_positions())
        if n <= 30:
            raise SensorConfigError(f"pin count {n} too small (need > 30)")
        # Rest marker discs must not overlap in the rendered image.
        spacing_px = self.pin_spacing / (2.0 * self.view_halfwidth) * self.image_size
        if spacing_px <= 2.0 * self.marker_radius:
            raise SensorConfigError(
                f"marker radius {self.marker_radius}px overlaps at pin spacing "
                f"{spacing_px:.2f}px"
            )

    @property
    def tip_radius(self) -> float:
        return self.tip_diameter / 2.0

    @property
    def view_halfwidth(self) -> float:
        return self.tip_radius * self.view_margin

    def pin_positions(self) -> np.ndarray:
        """Rest pin tip positions (N, 3) on the spherical cap, sensor frame."""
        xy = _hex_lattice(self.pin_spacing, self.tip_radius)
        r2 = np.sum(xy**2, axis=1)
        z = self.dome_radius - np.sqrt(self.dome_radius**2 - r2)
        return np.column_stack([xy, z])

    def to_dict(self) -> dict:
        return {
            "tip_diameter": self.tip_diameter,
            "pin_spacing": self.pin_spacing,
            "dome_radius": self.dome_radius,
            "image_size": self.image_size,
            "marker_radius": self.marker_radius,
            "view_margin": self.view_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorGeometry":
        return cls(**{k: (int(v) if k == "image_size" else float(v)) for k, v in d.items()})


@dataclass(frozen=True)
class ContactParams:
    """Contact-model coefficients (calibration knobs, not physical constants)."""

    stick_coeff: float = 0.7        # mu_s, fraction of tangential motion transferred
    shear_decay_mm: float = 10.0    # lambda, attenuation length from contact centroid
    bulge_coeff: float = 0.8        # lateral spread per mm of penetration
    membrane_decay_mm: float = 6.0  # coupling length pulling free pins along
    max_depth_mm: float = 6.0       # compliance limit

    def to_dict(self) -> dict:
        return {
            "stick_coeff": self.stick_coeff,
            "shear_decay_mm": self.shear_decay_mm,
            "bulge_coeff": self.bulge_coeff,
            "membrane_decay_mm": self.membrane_decay_mm,
            "max_depth_mm": self.max_depth_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContactParams":
        return cls(**{k: float(v) for k, v in d.items()})


def rounded_rect_sd(half_w: float, half_h: float, corner_r: float,
                    x: float, y: float) -> tuple[float, tuple[float, float]]:
    """2-d signed distance to a rounded-rectangle boundary (positive outside)
    and its outward gradient."""
    bx, by = half_w - corner_r, half_h - corner_r
    dx, dy = abs(x) - bx, abs(y) - by
    ox, oy = max(dx, 0.0), max(dy, 0.0)
    outside = math.hypot(ox, oy)
    sd = outside + min(max(dx, dy), 0.0) - corner_r
    if outside > 1e-12:
        g = (ox * math.copysign(1.0, x) / outside, oy * math.copysign(1.0, y) / outside)
    elif dx > dy:
        g = (math.copysign(1.0, x), 0.0)
    else:
        g = (0.0, math.copysign(1.0, y))
    return sd, g


@dataclass(frozen=True)
class ContactObject:
    """Rigid object touched by the sensor.

    Kinds: "plane" (z = 0), "half_plane_edge" (z = 0 for x <= 0, void beyond
    the boundary line along y), "heightfield" (bilinear grid z = h(x, y)),
    "sphere" (analytic ball) and "rounded_rect_edge" (flat plate bounded by
    a rounded rectangle); the last two serve the servo demos.
    """

    kind: str
    heights: Optional[np.ndarray] = None
    grid_spacing: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def plane(cls) -> "ContactObject":
        return cls(kind="plane")

    @classmethod
    def half_plane_edge(cls) -> "ContactObject":
        return cls(kind="half_plane_edge")

    @classmethod
    def heightfield(cls, heights, grid_spacing: float, origin=(0.0, 0.0)) -> "ContactObject":
        h = np.asarray(heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise ValueError("heightfield needs a 2-d grid with at least 2x2 entries")
        if not np.all(np.isfinite(h)):
            raise ValueError("heightfield grid must be finite")
        return cls(kind="heightfield", heights=h, grid_spacing=float(grid_spacing),
                   origin=(float(origin[0]), float(origin[1])))

    @classmethod
    def sphere(cls, radius: float, center=(0.0, 0.0, 0.0)) -> "ContactObject":
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        return cls(kind="sphere", radius=float(radius),
                   center=(float(center[0]), float(center[1]), float(center[2])))

    @classmethod
    def rounded_rect_edge(cls, half_w: float = 30.0, half_h: float = 25.0,
                          corner_r: float = 10.0) -> "ContactObject":
        """Flat plate bounded by a rounded rectangle, material inside."""
        if not 0 < corner_r <= min(half_w, half_h):
            raise ValueError("need 0 < corner_r <= min(half_w, half_h)")
        return cls(kind="rounded_rect_edge", origin=(float(half_w), float(half_h)),
                   radius=float(corner_r))

    def boundary_sd(self, x: float, y: float) -> tuple[float, tuple[float, float]]:
        """In-plane signed distance to the material boundary for edge kinds."""
        if self.kind == "half_plane_edge":
            return x, (1.0, 0.0)
        if self.kind == "rounded_rect_edge":
            return rounded_rect_sd(self.origin[0], self.origin[1], self.radius, x, y)
        raise ValueError(f"not an edge object: {self.kind!r}")

    # -- surface queries ----------------------------------------------------

    def _heightfield_eval(self, x: np.ndarray, y: np.ndarray):
        """Bilinear height and upward unit normal at (x, y); clamped outside."""
        h = self.heights
        ny, nx = h.shape
        gx = np.clip((x - self.origin[0]) / self.grid_spacing, 0.0, nx - 1 - 1e-9)
        gy = np.clip((y - self.origin[1]) / self.grid_spacing, 0.0, ny - 1 - 1e-9)
        i = gx.astype(int)
        j = gy.astype(int)
        fx = gx - i
        fy = gy - j
        h00 = h[j, i]
        h10 = h[j, i + 1]
        h01 = h[j + 1, i]
        h11 = h[j + 1, i + 1]
        z = h00 * (1 - fx) * (1 - fy) + h10 * fx * (1 - fy) + h01 * (1 - fx) * fy + h11 * fx * fy
        dzdx = ((h10 - h00) * (1 - fy) + (h11 - h01) * fy) / self.grid_spacing
        dzdy = ((h01 - h00) * (1 - fx) + (h11 - h10) * fx) / self.grid_spacing
        n = np.stack([-dzdx, -dzdy, np.ones_like(z)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        return z, n

    def signed_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Signed distance (negative inside) and outward unit normal per point.

        Points over the void of a half-plane edge get +inf distance.
        """
        p = np.asarray(points, dtype=float)
        up = np.tile(np.array([0.0, 0.0, 1.0]), (len(p), 1))
        if self.kind == "plane":
            return p[:, 2].copy(), up
        if self.kind == "half_plane_edge":
            sd = np.where(p[:, 0] <= 0.0, p[:, 2], np.inf)
            return sd, up
        if self.kind == "rounded_rect_edge":
            inside = np.array([self.boundary_sd(x, y)[0] <= 0.0 for x, y in p[:, :2]])
            sd = np.where(inside, p[:, 2], np.inf)
            return sd, up
        if self.kind == "heightfield":
            z, n = self._heightfield_eval(p[:, 0], p[:, 1])
            # Distance along the local normal to the tangent plane at the foot point.
            return (p[:, 2] - z) * n[:, 2], n
        if self.kind == "sphere":
            d = p - np.asarray(self.center)
            r = np.linalg.norm(d, axis=1)
            safe = np.maximum(r, 1e-12)
            return r - self.radius, d / safe[:, None]
        raise ValueError(f"unknown object kind {self.kind!r}")

    def project_to_surface(self, points: np.ndarray) -> np.ndarray:
        """Move penetrating points onto the surface along the local normal."""
        p = np.array(points, dtype=float)
        if self.kind in ("plane", "half_plane_edge", "rounded_rect_edge"):
            if self.kind == "plane":
                mask = np.ones(len(p), bool)
            elif self.kind == "half_plane_edge":
                mask = p[:, 0] <= 0.0
            else:
                mask = np.array([self.boundary_sd(x, y)[0] <= 0.0 for x, y in p[:, :2]])
            p[mask, 2] = np.maximum(p[mask, 2], 0.0)
            return p
        if self.kind == "sphere":
            c = np.asarray(self.center)
            d = p - c
            r = np.linalg.norm(d, axis=1)
            inside = r < self.radius
            safe = np.maximum(r, 1e-12)
            p[inside] = c + d[inside] / safe[inside, None] * self.radius
            return p
        # Heightfield: a few normal-direction steps, then a vertical lift.
        for _ in range(3):
            sd, n = self.signed_distance(p)
            pen = np.minimum(sd, 0.0)
            p -= pen[:, None] * n
        z, _ = self._heightfield_eval(p[:, 0], p[:, 1])
        p[:, 2] = np.maximum(p[:, 2], z)
        return p

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "heightfield":
            d["grid_spacing"] = self.grid_spacing
            d["origin"] = list(self.origin)
            d["heights"] = np.asarray(self.heights).tolist()
        elif self.kind == "sphere":
            d["radius"] = self.radius
            d["center"] = list(self.center)
        elif self.kind == "rounded_rect_edge":
            d["half_w"], d["half_h"] = self.origin
            d["corner_r"] = self.radius
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContactObject":
        kind = d["kind"]
        if kind == "plane":
            return cls.plane()
        if kind == "half_plane_edge":
            return cls.half_plane_edge()
        if kind == "heightfield":
            return cls.heightfield(d["heights"], d["grid_spacing"], tuple(d["origin"]))
        if kind == "sphere":
            return cls.sphere(d["radius"], tuple(d["center"]))
        if kind == "rounded_rect_edge":
            return cls.rounded_rect_edge(d["half_w"], d["half_h"], d["corner_r"])
        raise ValueError(f"unknown object kind {kind!r}")


def radial_bump(amplitude: float = 8.0, sigma: float = 30.0, extent: float = 160.0,
                spacing: float = 2.0) -> ContactObject:
    """Smooth Gaussian bump heightfield centred on the origin."""
    n = int(extent / spacing) + 1
    ax = np.linspace(-extent / 2.0, extent / 2.0, n)
    xx, yy = np.meshgrid(ax, ax)
    h = amplitude * np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return ContactObject.heightfield(h, ax[1] - ax[0], origin=(ax[0], ax[0]))


@dataclass(frozen=True)
class PinState:
    """Per-pin rest and displaced tip positions.

    rest and displaced are in the sensor frame (what the camera sees);
    displaced_world is kept for contact diagnostics.
    """

    rest: np.ndarray
    displaced: np.ndarray
    displaced_world: np.ndarray
    in_contact: np.ndarray

    @property
    def contact_count(self) -> int:
        return int(np.count_nonzero(self.in_contact))


def _tangential(vectors: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return vectors - np.sum(vectors * normals, axis=1, keepdims=True) * normals


@dataclass(frozen=True)
class Simulator:
    """Sensor geometry plus contact model; all methods are pure."""

    geometry: SensorGeometry = field(default_factory=SensorGeometry)
    params: ContactParams = field(default_factory=ContactParams)

    def contact(self, obj: ContactObject, pose: SurfacePose | EdgePose,
                perturbation: Perturbation = Perturbation.zero()) -> PinState:
        """Contact at a labelled pose reached from (pose - perturbation)."""
        if -pose.depth > self.params.max_depth_mm:
            raise ContactDepthError(
                f"depth {pose.depth} mm exceeds compliance limit "
                f"{self.params.max_depth_mm} mm"
            )
        tf = components_to_transform(pose_to_components(pose))
        prev = components_to_transform(perturbed_components(pose, perturbation))
        return self.contact_at(obj, tf, prev)

    def contact_at(self, obj: ContactObject, tf: RigidTransform,
                   prev_tf: Optional[RigidTransform] = None) -> PinState:
        """Contact at an arbitrary world transform; prev_tf supplies shear memory."""
        pole_sd, _ = obj.signed_distance(tf.translation[None, :])
        if -float(pole_sd[0]) > self.params.max_depth_mm:
            raise ContactDepthError(
                f"pole indentation {-float(pole_sd[0]):.2f} mm exceeds compliance "
                f"limit {self.params.max_depth_mm} mm"
            )
        rest = self.geometry.pin_positions()
        world = tf.apply(rest)
        sd, normals = obj.signed_distance(world)
        contact = sd < 0.0
        pen = np.where(contact, -sd, 0.0)

        displaced = world.copy()
        if np.any(contact):
            proj = obj.project_to_surface(world)
            centroid = proj[contact].mean(axis=0)
            radial = proj - centroid
            radial_t = _tangential(radial, normals)
            norms = np.linalg.norm(radial_t, axis=1, keepdims=True)
            radial_dir = np.where(norms > 1e-12, radial_t / np.maximum(norms, 1e-12), 0.0)
            offsets = self.params.bulge_coeff * pen[:, None] * radial_dir

            if prev_tf is not None:
                motion = world - prev_tf.apply(rest)
                motion_t = _tangential(motion, normals)
                r = np.linalg.norm(proj - centroid, axis=1)
                gain = self.params.stick_coeff * np.exp(-r / self.params.shear_decay_mm)
                offsets = offsets + gain[:, None] * motion_t

            moved = obj.project_to_surface(proj + offsets)
            displaced[contact] = moved[contact]

            # Membrane coupling: free pins follow a decaying average of the
            # contact-pin displacements, falling back to rest far away.
            free = ~contact
            if np.any(free):
                disp_c = displaced[contact] - world[contact]
                d = np.linalg.norm(world[free][:, None, :] - world[contact][None, :, :], axis=2)
                w = np.exp(-d / self.params.membrane_decay_mm)
                pulled = (w @ disp_c) / (w.sum(axis=1, keepdims=True) + 1.0)
                displaced[free] = obj.project_to_surface(world[free] + pulled)

        sd_after, _ = obj.signed_distance(displaced)
        finite = np.isfinite(sd_after)
        if np.any(sd_after[finite] < -NON_PENETRATION_TOL):
            raise RuntimeError("contact model left a pin inside the object")

        inv = tf.inverse()
        return PinState(
            rest=rest,
            displaced=inv.apply(displaced),
            displaced_world=displaced,
            in_contact=contact,
        )

    def rest_state(self) -> PinState:
        rest = self.geometry.pin_positions()
        return PinState(rest=rest, displaced=rest.copy(), displaced_world=rest.copy(),
                        in_contact=np.zeros(len(rest), dtype=bool))

    def render(self, pins: PinState) -> np.ndarray:
        """Orthographic binary marker image, uint8 values in {0, 1}."""
        g = self.geometry
        s = g.image_size
        v = g.view_halfwidth
        scale = s / (2.0 * v)
        u = (pins.displaced[:, 0] + v) * scale
        w = (v - pins.displaced[:, 1]) * scale
        if np.any(u < 0) or np.any(u >= s) or np.any(w < 0) or np.any(w >= s):
            raise RenderBoundsError("a pin projects outside the image footprint")
        img = np.zeros((s, s), dtype=np.uint8)
        r = g.marker_radius
        ri = int(math.ceil(r)) + 1
        for uc, wc in zip(u, w):
            c0, c1 = max(0, int(uc - ri)), min(s, int(uc + ri) + 1)
            r0, r1 = max(0, int(wc - ri)), min(s, int(wc + ri) + 1)
            cols = np.arange(c0, c1) + 0.5
            rows = np.arange(r0, r1) + 0.5
            mask = (cols[None, :] - uc) ** 2 + (rows[:, None] - wc) ** 2 <= r * r
            img[r0:r1, c0:c1][mask] = 1
        return img

    def capture(self, obj: ContactObject, pose: SurfacePose | EdgePose,
                perturbation: Perturbation = Perturbation.zero()) -> np.ndarray:
        return self.render(self.contact(obj, pose, perturbation))

    def rest_image(self) -> np.ndarray:
        return self.render(self.rest_state())

    def to_dict(self) -> dict:
        return {"geometry": self.geometry.to_dict(), "contact": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Simulator":
        return cls(SensorGeometry.from_dict(d["geometry"]),
                   ContactParams.from_dict(d["contact"]))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("ascii")
        return hashlib.sha256(blob).hexdigest()

    def save_config(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_config(cls, path: str | Path) -> "Simulator":
        return cls.from_dict(json.loads(Path(path).read_text()))


def small_profile_simulator() -> Simulator:
    """64x64 imaging variant used by the quick profile and CI."""
    return Simulator(geometry=SensorGeometry(image_size=64, marker_radius=1.3))
