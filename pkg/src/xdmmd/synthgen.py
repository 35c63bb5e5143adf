"""dSprites-style binary shape images with ground-truth masks.

Pixel ``(r, c)`` is sampled at its center ``(c + 0.5, r + 0.5)`` in continuous
(x, y) coordinates, rotated into the shape's local frame and tested for
inclusion. Rendering is binary: no anti-aliasing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from xdmmd import netpbm
from xdmmd.errors import BoundsError, ConfigError, FormatError, IoError
from xdmmd.rng import mix, stream

MIN_HALF_EXTENT = 4.0


class ShapeKind(str, Enum):
    SQUARE = "square"
    ELLIPSE = "ellipse"


@dataclass(frozen=True)
class ShapeSpec:
    kind: ShapeKind
    center_x: float
    center_y: float
    half_extent_a: float
    half_extent_b: float
    rotation: float = 0.0

    @property
    def circumradius(self) -> float:
        if self.kind is ShapeKind.SQUARE:
            return math.hypot(self.half_extent_a, self.half_extent_b)
        return max(self.half_extent_a, self.half_extent_b)

    def validate(self, height: int, width: int) -> None:
        a, b = self.half_extent_a, self.half_extent_b
        if a < MIN_HALF_EXTENT or b < MIN_HALF_EXTENT:
            raise BoundsError(f"half extents ({a}, {b}) below {MIN_HALF_EXTENT} pixels")
        if self.kind is ShapeKind.SQUARE and a != b:
            raise BoundsError(f"square needs equal half extents, got ({a}, {b})")
        limit = math.pi / 2 if self.kind is ShapeKind.SQUARE else math.pi
        if not 0.0 <= self.rotation < limit:
            raise BoundsError(f"rotation {self.rotation} outside [0, {limit})")
        r = self.circumradius
        if (
            self.center_x - r < 0
            or self.center_x + r > width
            or self.center_y - r < 0
            or self.center_y + r > height
        ):
            raise BoundsError(
                f"{self.kind.value} at ({self.center_x}, {self.center_y}) with radius {r:.3f}"
                f" leaves the {height}x{width} canvas"
            )


@dataclass(frozen=True)
class ShapeGeometry:
    """Size rule shared by all kinds: one uniform scale factor per sample.

    At scale ``s`` a square has half side ``square_half * s`` and an ellipse
    semi-axes ``(ellipse_axes[0] * s, ellipse_axes[1] * s)``; by default the
    square's side equals the ellipse's minor axis and the ellipse is
    elongated 2:1.
    """

    scale_range: tuple[float, float] = (0.5, 1.0)
    square_half: float = 10.0
    ellipse_axes: tuple[float, float] = (20.0, 10.0)

    def half_extents(self, kind: ShapeKind, scale: float) -> tuple[float, float]:
        if kind is ShapeKind.SQUARE:
            return self.square_half * scale, self.square_half * scale
        return self.ellipse_axes[0] * scale, self.ellipse_axes[1] * scale


DEFAULT_GEOMETRY = ShapeGeometry()


@dataclass
class SampleImage:
    pixels: np.ndarray  # H x W float64, values in {0, 1}
    mask: np.ndarray  # H x W bool
    spec: ShapeSpec
    id: str


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    group: str
    subgroup: str
    path: str


@dataclass
class GroupManifest:
    entries: list[ManifestEntry]
    seed: int | None = None
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest ids must be unique")
        counts: dict[tuple[str, str], int] = {}
        for e in self.entries:
            counts[(e.group, e.subgroup)] = counts.get((e.group, e.subgroup), 0) + 1
        self.counts = counts

    def __len__(self) -> int:
        return len(self.entries)

    def __add__(self, other: "GroupManifest") -> "GroupManifest":
        return GroupManifest(self.entries + other.entries, self.seed)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "group", "subgroup", "path"])
            for e in self.entries:
                w.writerow([e.id, e.group, e.subgroup, e.path])

    @classmethod
    def read_csv(cls, path: str | Path) -> "GroupManifest":
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        if not rows or rows[0] != ["id", "group", "subgroup", "path"]:
            raise FormatError(f"{path}: expected header id,group,subgroup,path")
        return cls([ManifestEntry(*r) for r in rows[1:] if r])


def render_shape(spec: ShapeSpec, height: int = 64, width: int = 64, id: str = "") -> SampleImage:
    spec.validate(height, width)
    ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
    dx = xs - spec.center_x
    dy = ys - spec.center_y
    cos, sin = math.cos(spec.rotation), math.sin(spec.rotation)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    a, b = spec.half_extent_a, spec.half_extent_b
    if spec.kind is ShapeKind.SQUARE:
        mask = (np.abs(u) <= a) & (np.abs(v) <= b)
    else:
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return SampleImage(pixels=mask.astype(np.float64), mask=mask, spec=spec, id=id)


def sample_spec(
    kind: ShapeKind,
    rng: np.random.Generator,
    height: int = 64,
    width: int = 64,
    geometry: ShapeGeometry = DEFAULT_GEOMETRY,
) -> ShapeSpec:
    """Draw scale, rotation and a center obeying the margin rule, uniformly."""
    scale = float(rng.uniform(*geometry.scale_range))
    a, b = geometry.half_extents(kind, scale)
    if kind is ShapeKind.SQUARE:
        rotation = float(rng.uniform(0.0, math.pi / 2))
        radius = math.hypot(a, b)
    else:
        rotation = float(rng.uniform(0.0, math.pi))
        radius = max(a, b)
    if min(a, b) < MIN_HALF_EXTENT:
        raise ConfigError(f"geometry {geometry} yields half extents below {MIN_HALF_EXTENT}")
    # circumscribing circle stays at least one pixel inside the border
    margin = radius + 1.0
    if 2 * margin > min(height, width):
        raise ConfigError(f"geometry {geometry} does not fit a {height}x{width} canvas")
    cx = float(rng.uniform(margin, width - margin))
    cy = float(rng.uniform(margin, height - margin))
    return ShapeSpec(kind, cx, cy, a, b, rotation)


def generate_group(
    count: int,
    kind_distribution: Mapping[str, int],
    seed: int,
    group: str = "X",
    height: int = 64,
    width: int = 64,
    geometry: ShapeGeometry = DEFAULT_GEOMETRY,
) -> tuple[list[SampleImage], GroupManifest]:
    """Generate ``count`` images split by subgroup, in the mapping's order.

    Sample ``i`` draws from ``stream(seed, i)`` alone, so any subset can be
    regenerated independently.
    """
    if any(c < 0 for c in kind_distribution.values()):
        raise ConfigError(f"negative subgroup count in {dict(kind_distribution)}")
    if sum(kind_distribution.values()) != count:
        raise ConfigError(
            f"subgroup counts {dict(kind_distribution)} sum to"
            f" {sum(kind_distribution.values())}, expected {count}"
        )
    kinds: list[ShapeKind] = []
    for name, c in kind_distribution.items():
        try:
            kinds.extend([ShapeKind(name)] * c)
        except ValueError:
            raise ConfigError(f"unknown shape kind {name!r}") from None

    images, entries = [], []
    for i, kind in enumerate(kinds):
        spec = sample_spec(kind, stream(seed, i), height, width, geometry)
        sid = f"{group}{i:04d}"
        images.append(render_shape(spec, height, width, id=sid))
        entries.append(ManifestEntry(sid, group, kind.value, f"{sid}.pgm"))
    return images, GroupManifest(entries, seed)


def generate_two_groups(
    x_counts: Mapping[str, int],
    y_counts: Mapping[str, int],
    seed: int,
    geometry: ShapeGeometry = DEFAULT_GEOMETRY,
) -> tuple[list[SampleImage], GroupManifest]:
    """Both groups in one manifest; group X draws from ``mix(seed, 1)``, Y from ``mix(seed, 2)``."""
    xi, xm = generate_group(sum(x_counts.values()), x_counts, mix(seed, 1), "X", geometry=geometry)
    yi, ym = generate_group(sum(y_counts.values()), y_counts, mix(seed, 2), "Y", geometry=geometry)
    manifest = xm + ym
    manifest.seed = seed
    return xi + yi, manifest


def write_images(images: list[SampleImage], manifest: GroupManifest, directory: str | Path) -> None:
    """Write each image as ``<directory>/<entry.path>`` (PGM, foreground 255)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for img, entry in zip(images, manifest.entries):
        netpbm.write_pgm(directory / entry.path, img.mask.astype(np.uint8) * 255)


def parse_composition(text: str) -> dict[str, int]:
    """Parse ``"square:40,ellipse:160"`` into an ordered mapping."""
    out: dict[str, int] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, num = part.partition(":")
        if not sep:
            raise ConfigError(f"bad composition item {part!r}; expected kind:count")
        try:
            out[name.strip()] = int(num)
        except ValueError:
            raise ConfigError(f"bad count in {part!r}") from None
    return out
