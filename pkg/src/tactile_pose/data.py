"""Dataset collection, on-disk persistence and label normalization.

On-disk layout (one directory per dataset):

    meta.json          object type, split tag, seed, ranges, image size,
                       simulator config and its hash
    index.csv          one row per sample:
                       id, <label components>, dx, dy, d_depth, d_roll,
                       d_pitch, d_yaw, image, sha256
    images/NNNNNN.pgm  binary P5, 8-bit, values 0/255

Label components follow the canonical order: surface (depth, roll, pitch),
edge (x_horizontal, depth, roll, pitch, yaw). Floats are written with repr()
so a save/load round trip is exact.

Each sample draws from its own random stream seeded by (dataset seed, id),
so generation order cannot change the data.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import pgm
from .poses import (
    EDGE_COMPONENTS,
    SURFACE_COMPONENTS,
    EdgePose,
    Perturbation,
    PoseRanges,
    SurfacePose,
    sample_perturbation,
    sample_pose,
)
from .sensor import ContactObject, Simulator

FORMAT_VERSION = 1

PERTURBATION_FIELDS = ("dx", "dy", "d_depth", "d_roll", "d_pitch", "d_yaw")


class DatasetError(Exception):
    """Base class for dataset persistence problems."""


class BadIndexRow(DatasetError):
    """index.csv row is malformed or holds an out-of-range value."""


class MissingImage(DatasetError):
    """An image file referenced by index.csv does not exist or is unreadable."""


class ChecksumMismatch(DatasetError):
    """Stored sha256 does not match the image file on disk."""


def label_components(object_type: str) -> tuple[str, ...]:
    if object_type == "surface":
        return SURFACE_COMPONENTS
    if object_type == "edge":
        return EDGE_COMPONENTS
    raise ValueError(f"unknown object type {object_type!r}")


def canonical_object(object_type: str) -> ContactObject:
    """The training stimulus: a flat plane or a straight half-plane edge."""
    if object_type == "surface":
        return ContactObject.plane()
    if object_type == "edge":
        return ContactObject.half_plane_edge()
    raise ValueError(f"unknown object type {object_type!r}")


@dataclass(frozen=True)
class Sample:
    """One contact: binary image, labelled pose, audit-only perturbation."""

    id: int
    image: np.ndarray
    label: SurfacePose | EdgePose
    perturbation: Perturbation

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and self.id == other.id
            and self.label == other.label
            and self.perturbation == other.perturbation
            and np.array_equal(self.image, other.image)
        )


@dataclass(frozen=True)
class Dataset:
    object_type: str
    samples: tuple[Sample, ...]
    split_tag: str
    seed: int
    label_ranges: PoseRanges
    perturbation_ranges: PoseRanges
    sim_config: dict

    def __post_init__(self) -> None:
        if len(self.samples) < 1:
            raise ValueError("dataset needs at least one sample")

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.object_type == other.object_type
            and self.split_tag == other.split_tag
            and self.seed == other.seed
            and dict(self.label_ranges.intervals) == dict(other.label_ranges.intervals)
            and dict(self.perturbation_ranges.intervals)
            == dict(other.perturbation_ranges.intervals)
            and self.sim_config == other.sim_config
            and self.samples == other.samples
        )

    def images(self) -> np.ndarray:
        """Stacked (N, S, S) uint8 image array; the only training input."""
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        """Stacked (N, k) label array in physical units."""
        return np.stack([s.label.as_array() for s in self.samples])


def collect(
    object_type: str,
    n: int,
    label_ranges: PoseRanges,
    perturbation_ranges: PoseRanges,
    seed: int,
    sim: Simulator,
    split_tag: str = "train",
) -> Dataset:
    """Generate n contacts against the canonical object for object_type.

    Each contact samples a labelled pose and an unlabelled perturbation,
    places the sensor at (pose - perturbation), moves it to the pose and
    captures the image. Deterministic given the seed; sample i uses the
    (seed, i) random stream, so any evaluation order gives the same data.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    expected = label_components(object_type)
    label_ranges.require(expected)
    obj = canonical_object(object_type)
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        pose = sample_pose(label_ranges, rng)
        pert = sample_perturbation(perturbation_ranges, rng)
        try:
            image = sim.capture(obj, pose, pert)
        except Exception as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc
        samples.append(Sample(id=i, image=image, label=pose, perturbation=pert))
    return Dataset(
        object_type=object_type,
        samples=tuple(samples),
        split_tag=split_tag,
        seed=seed,
        label_ranges=label_ranges,
        perturbation_ranges=perturbation_ranges,
        sim_config=sim.to_dict(),
    )


def _image_name(sample_id: int) -> str:
    return f"{sample_id:06d}.pgm"


def save(dataset: Dataset, directory: str | Path) -> None:
    """Write meta.json, index.csv and one PGM per sample."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    sim = Simulator.from_dict(dataset.sim_config)
    meta = {
        "format_version": FORMAT_VERSION,
        "object_type": dataset.object_type,
        "split_tag": dataset.split_tag,
        "seed": dataset.seed,
        "n": len(dataset),
        "image_size": int(dataset.samples[0].image.shape[0]),
        "label_ranges": dataset.label_ranges.to_dict(),
        "perturbation_ranges": dataset.perturbation_ranges.to_dict(),
        "sim_config": dataset.sim_config,
        "sim_config_hash": sim.config_hash(),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    comps = label_components(dataset.object_type)
    header = ["id", *comps, *PERTURBATION_FIELDS, "image", "sha256"]
    with open(root / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for s in dataset.samples:
            name = _image_name(s.id)
            pgm.write_pgm(root / "images" / name, s.image)
            digest = hashlib.sha256((root / "images" / name).read_bytes()).hexdigest()
            row = [s.id]
            row += [repr(float(v)) for v in s.label.as_array()]
            row += [repr(float(v)) for v in s.perturbation.as_array()]
            row += [f"images/{name}", digest]
            writer.writerow(row)


def load(directory: str | Path) -> Dataset:
    """Read a dataset written by save, validating structure and checksums."""
    root = Path(directory)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{root}: missing meta.json") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"{root}: unsupported format version {meta.get('format_version')}"
        )
    object_type = meta["object_type"]
    comps = label_components(object_type)
    label_ranges = PoseRanges.from_dict(meta["label_ranges"])
    perturbation_ranges = PoseRanges.from_dict(meta["perturbation_ranges"])
    pose_cls = SurfacePose if object_type == "surface" else EdgePose

    samples = []
    index_path = root / "index.csv"
    if not index_path.exists():
        raise DatasetError(f"{root}: missing index.csv")
    with open(index_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = ["id", *comps, *PERTURBATION_FIELDS, "image", "sha256"]
        if header != expected:
            raise BadIndexRow(f"{index_path}: header {header} != {expected}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise BadIndexRow(f"{index_path}:{lineno}: expected {len(expected)} fields")
            try:
                sample_id = int(row[0])
                label_vals = [float(v) for v in row[1 : 1 + len(comps)]]
                pert_vals = [float(v) for v in row[1 + len(comps) : 7 + len(comps)]]
            except ValueError as exc:
                raise BadIndexRow(f"{index_path}:{lineno}: {exc}") from exc
            for name, value in zip(comps, label_vals):
                if not label_ranges.contains(name, value):
                    raise BadIndexRow(
                        f"sample {sample_id}: {name} {value} outside declared range "
                        f"{label_ranges.interval(name)}"
                    )
            image_rel, digest = row[-2], row[-1]
            image_path = root / image_rel
            if not image_path.exists():
                raise MissingImage(f"sample {sample_id}: missing image {image_path}")
            blob = image_path.read_bytes()
            if hashlib.sha256(blob).hexdigest() != digest:
                raise ChecksumMismatch(f"sample {sample_id}: checksum mismatch {image_path}")
            try:
                image = pgm.read_pgm(image_path)
            except pgm.PgmError as exc:
                raise MissingImage(f"sample {sample_id}: {exc}") from exc
            pert = Perturbation(*pert_vals)
            samples.append(
                Sample(
                    id=sample_id,
                    image=image,
                    label=pose_cls.from_array(label_vals),
                    perturbation=pert,
                )
            )
    return Dataset(
        object_type=object_type,
        samples=tuple(samples),
        split_tag=meta["split_tag"],
        seed=meta["seed"],
        label_ranges=label_ranges,
        perturbation_ranges=perturbation_ranges,
        sim_config=meta["sim_config"],
    )


@dataclass(frozen=True)
class LabelScaler:
    """Component-wise scaling by 1 / max|bound| and its inverse.

    MSE on scaled labels equals the 1/max^2-weighted MSE on raw labels.
    """

    component_names: tuple[str, ...]
    scales: np.ndarray  # multiplied onto raw labels

    @classmethod
    def from_ranges(cls, ranges: PoseRanges) -> "LabelScaler":
        names = ranges.components
        maxima = np.array([ranges.max_abs(c) for c in names])
        if np.any(maxima == 0.0):
            zero = names[int(np.argmin(maxima))]
            raise ValueError(f"component {zero!r} has zero max bound; cannot scale")
        return cls(component_names=names, scales=1.0 / maxima)

    def scale(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels, dtype=float) * self.scales

    def unscale(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled, dtype=float) / self.scales


def normalize_labels(dataset: Dataset) -> tuple[np.ndarray, LabelScaler]:
    """Scaled label array in [-1, 1] plus the scaler that inverts it."""
    scaler = LabelScaler.from_ranges(dataset.label_ranges)
    return scaler.scale(dataset.labels()), scaler


def training_arrays(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, LabelScaler]:
    """(images, scaled labels, scaler): the only view training code consumes.

    Perturbations are deliberately absent so no training path can touch them.
    """
    x = dataset.images().astype(float)[:, None, :, :]
    y, scaler = normalize_labels(dataset)
    return x, y, scaler
