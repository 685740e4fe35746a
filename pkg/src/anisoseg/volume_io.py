"""Anisotropic volumes: data model, on-disk case format, synthetic cases, preprocessing."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import (
    DataError,
    DegenerateInputError,
    HeaderError,
    InvalidSpecError,
    PayloadSizeError,
    ShapeError,
    UnsupportedDtypeError,
)

Triple = Tuple[float, float, float]

HEADER_NAME = "header.json"
IMAGE_NAME = "image.raw"
LABEL_NAME = "label.raw"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")

# voxels kept free between the ellipsoid and the array border, per axis
MARGIN_VOXELS = 2


def _check_spacing(spacing) -> Triple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ShapeError(f"spacing must be three positive reals, got {spacing}")
    return spacing


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing_mm: Triple
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume must be 3D with non-empty extents, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    data: np.ndarray
    spacing_mm: Triple
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"label must be 3D with non-empty extents, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise DataError("label values must be exactly 0 or 1")
        object.__setattr__(self, "data", _freeze(data.astype(np.uint8)))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def shape(self):
        return self.data.shape

    def check_pairs_with(self, volume: Volume) -> None:
        if self.shape != volume.shape or self.spacing_mm != volume.spacing_mm:
            raise ShapeError(
                f"label {self.shape}/{self.spacing_mm} does not match volume "
                f"{volume.shape}/{volume.spacing_mm}"
            )


@dataclass(frozen=True)
class SegmentationTarget:
    """One-hot ground truth (channel 0 background, channel 1 foreground)."""

    onehot: np.ndarray
    foreground: LabelVolume

    @classmethod
    def from_label(cls, label: LabelVolume, n_classes: int = 2) -> "SegmentationTarget":
        if n_classes != 2:
            raise ShapeError("only the binary (C=2) convention is supported")
        fg = label.data.astype(np.float32)
        return cls(onehot=_freeze(np.stack([1.0 - fg, fg])), foreground=label)


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    shape: Tuple[int, int, int] = (32, 128, 128)
    spacing_mm: Tuple[float, float, float] = (1.5, 0.4, 0.4)
    ellipsoid_radii_mm: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]] = (
        (3.5, 10.0),
        (3.5, 10.0),
        (3.5, 10.0),
    )
    background_level: float = 0.0
    contrast_delta: float = 1.0
    noise_sigma: float = Field(default=0.6, ge=0.0)
    n_distractor_edges: int = Field(default=3, ge=0)
    edge_intensity: float = 1.5
    edge_radius_mm: Tuple[float, float] = (6.0, 14.0)
    edge_thickness_mm: float = Field(default=0.6, gt=0.0)

    @field_validator("shape")
    @classmethod
    def _positive_shape(cls, v):
        if min(v) < 1:
            raise ValueError("shape extents must be >= 1")
        return v

    @field_validator("spacing_mm")
    @classmethod
    def _positive_spacing(cls, v):
        if min(v) <= 0:
            raise ValueError("spacing components must be > 0")
        return v

    @model_validator(mode="after")
    def _ranges_ordered(self):
        for lo, hi in (*self.ellipsoid_radii_mm, self.edge_radius_mm):
            if not 0 < lo <= hi:
                raise ValueError(f"radius range ({lo}, {hi}) must satisfy 0 < lo <= hi")
        return self


def _center_bounds(spec: SyntheticSpec, radii) -> List[Tuple[int, int]]:
    """Admissible voxel-index range of the ellipsoid centre along each axis."""
    bounds = []
    for n, sp, r in zip(spec.shape, spec.spacing_mm, radii):
        reach = int(np.floor(r / sp + 1e-9))
        lo, hi = MARGIN_VOXELS + reach, n - 1 - MARGIN_VOXELS - reach
        bounds.append((lo, hi))
    return bounds


def validate_spec(spec: SyntheticSpec) -> None:
    worst = [hi for _, hi in spec.ellipsoid_radii_mm]
    for axis, (lo, hi) in enumerate(_center_bounds(spec, worst)):
        if lo > hi:
            raise InvalidSpecError(
                f"ellipsoid with radius {worst[axis]} mm does not fit along axis {axis} "
                f"({spec.shape[axis]} voxels of {spec.spacing_mm[axis]} mm, "
                f"margin {MARGIN_VOXELS} voxels)"
            )


def _grid_mm(spec: SyntheticSpec):
    axes = [np.arange(n) * sp for n, sp in zip(spec.shape, spec.spacing_mm)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def generate_case(spec: SyntheticSpec) -> Tuple[Volume, LabelVolume]:
    """Render one synthetic case: a low-contrast ellipsoid among bright curved sheets.

    The ellipsoid centre sits on a voxel centre, so very small radii give a
    single labelled voxel. Everything drawn comes from one generator seeded
    by ``spec.seed``.
    """
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    radii = np.array([rng.uniform(lo, hi) for lo, hi in spec.ellipsoid_radii_mm])
    center_idx = [int(rng.integers(lo, hi + 1)) for lo, hi in _center_bounds(spec, radii)]
    center = np.array(center_idx) * np.array(spec.spacing_mm)

    z, y, x = _grid_mm(spec)
    rho = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + (
        (x - center[2]) / radii[2]
    ) ** 2
    label = (rho <= 1.0).astype(np.uint8)

    image = np.full(spec.shape, spec.background_level, dtype=np.float64)
    image[label == 1] += spec.contrast_delta

    extent = np.array(spec.shape) * np.array(spec.spacing_mm)
    # sheets keep clear of a 1.5x inflated ellipsoid
    keep_out = rho <= 2.25
    for _ in range(spec.n_distractor_edges):
        sheet_center = rng.uniform(-0.25, 1.25, size=3) * extent
        sheet_radius = rng.uniform(*spec.edge_radius_mm)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        cos_cap = np.cos(rng.uniform(np.pi / 6, np.pi / 3))
        dz, dy, dx = z - sheet_center[0], y - sheet_center[1], x - sheet_center[2]
        dist = np.sqrt(dz**2 + dy**2 + dx**2)
        cosang = (dz * direction[0] + dy * direction[1] + dx * direction[2]) / np.maximum(dist, 1e-9)
        sheet = (np.abs(dist - sheet_radius) <= spec.edge_thickness_mm / 2) & (cosang >= cos_cap)
        sheet &= ~keep_out
        image[sheet] = spec.background_level + spec.edge_intensity

    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=spec.shape)

    case_id = f"case_{spec.seed}"
    return (
        Volume(image.astype(np.float32), spec.spacing_mm, case_id),
        LabelVolume(label, spec.spacing_mm, case_id),
    )


def normalize(volume: Volume) -> Volume:
    data = volume.data.astype(np.float64)
    mean, std = data.mean(), data.std()
    if data.size < 2 or not std > 0:
        raise DegenerateInputError(f"cannot standardize constant-intensity volume {volume.id!r}")
    return Volume(((data - mean) / std).astype(np.float32), volume.spacing_mm, volume.id)


def write_case(path, volume: Volume, label: LabelVolume) -> None:
    label.check_pairs_with(volume)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "id": volume.id,
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "image_dtype": "float32",
        "label_dtype": "uint8",
        "byte_order": "little-endian",
        "layout": "row-major DHW",
    }
    (path / HEADER_NAME).write_text(json.dumps(header, indent=2) + "\n")
    (path / IMAGE_NAME).write_bytes(volume.data.astype("<f4").tobytes(order="C"))
    (path / LABEL_NAME).write_bytes(label.data.astype("u1").tobytes(order="C"))


_DTYPES = {"float32": "<f4", "uint8": "u1"}
_EXPECTED = {"image_dtype": "float32", "label_dtype": "uint8"}


def _read_header(path: Path) -> dict:
    try:
        header = json.loads((path / HEADER_NAME).read_text())
    except FileNotFoundError as exc:
        raise HeaderError(f"missing {HEADER_NAME} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise HeaderError(f"{path / HEADER_NAME} is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    missing = {"shape", "spacing_mm", "image_dtype", "label_dtype", "byte_order", "layout"} - set(header)
    if missing:
        raise HeaderError(f"header missing keys: {sorted(missing)}")
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n >= 1 for n in shape)):
        raise HeaderError(f"header shape must be three positive integers, got {shape!r}")
    spacing = header["spacing_mm"]
    if not (
        isinstance(spacing, list)
        and len(spacing) == 3
        and all(isinstance(s, (int, float)) and s > 0 for s in spacing)
    ):
        raise HeaderError(f"header spacing_mm must be three positive reals, got {spacing!r}")
    for key, expected in _EXPECTED.items():
        if header[key] != expected:
            raise UnsupportedDtypeError(f"{key}={header[key]!r} is not supported (expected {expected!r})")
    if header["byte_order"] != "little-endian":
        raise UnsupportedDtypeError(f"byte_order={header['byte_order']!r} is not supported")
    if header["layout"] != "row-major DHW":
        raise HeaderError(f"layout={header['layout']!r} is not supported")
    return header


def _read_payload(file: Path, dtype: str, shape) -> np.ndarray:
    try:
        raw = file.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing payload {file}") from exc
    itemsize = np.dtype(dtype).itemsize
    expected = int(np.prod(shape)) * itemsize
    if len(raw) != expected:
        raise PayloadSizeError(
            f"{file.name}: {len(raw)} bytes on disk, header shape {list(shape)} needs {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_case(path) -> Tuple[Volume, LabelVolume]:
    path = Path(path)
    header = _read_header(path)
    shape = tuple(header["shape"])
    spacing = tuple(float(s) for s in header["spacing_mm"])
    case_id = str(header.get("id") or path.name)
    image = _read_payload(path / IMAGE_NAME, _DTYPES[header["image_dtype"]], shape)
    label = _read_payload(path / LABEL_NAME, _DTYPES[header["label_dtype"]], shape)
    return Volume(image.astype(np.float32), spacing, case_id), LabelVolume(label, spacing, case_id)


def make_dataset(spec_base: SyntheticSpec, n_train: int, n_val: int, n_test: int, root_path) -> Dict[str, List[str]]:
    """Write ``n_train + n_val + n_test`` cases under ``root_path`` plus a manifest.

    Case ``k`` (counting train, then val, then test) uses seed
    ``spec_base.seed + k``. Manifest paths are relative to the manifest file.
    """
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split, n in counts.items():
        if not isinstance(n, int) or n < 1:
            raise ValueError(f"n_{split} must be an integer >= 1, got {n!r}")
    validate_spec(spec_base)
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, List[str]] = {}
    index = 0
    for split in SPLITS:
        entries = []
        for _ in range(counts[split]):
            seed = spec_base.seed + index
            volume, label = generate_case(spec_base.model_copy(update={"seed": seed}))
            rel = f"cases/case_{index:04d}"
            write_case(root / rel, volume, label)
            entries.append(rel)
            index += 1
        manifest[split] = entries
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


@dataclass
class Manifest:
    """A dataset manifest resolved against the directory that holds it."""

    root: Path
    splits: Dict[str, List[str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            splits = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        if not isinstance(splits, dict) or set(splits) != set(SPLITS):
            raise DataError(f"manifest must have exactly the keys {list(SPLITS)}")
        seen = set()
        for split in SPLITS:
            for entry in splits[split]:
                if entry in seen:
                    raise DataError(f"case {entry!r} listed more than once in manifest")
                seen.add(entry)
        return cls(root=path.parent, splits=splits)

    def case_paths(self, split: str) -> List[Path]:
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        return [Path(os.path.join(self.root, entry)) for entry in self.splits[split]]

    def load_split(self, split: str):
        return [read_case(p) for p in self.case_paths(split)]
