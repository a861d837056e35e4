"""Domain types shared by the codecs and metrics.

Point clouds are stored as ``(N, 3)`` float64 arrays rather than lists of
point objects; :class:`Point3` is used only for single coordinates such as
box corners and sensor origins.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from roadpcc.errors import EmptyCloud, InvalidPoint, InvalidSensor


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered point set with optional per-point intensity in [0, 1].

    Construction copies the inputs to float64 and rejects NaN/Inf, so a
    ``PointCloud`` is always finite and immutable. An empty cloud is a valid
    value; codecs reject it.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    frame_id: int = 0
    timestamp_ns: int = 0

    def __post_init__(self) -> None:
        xyz = np.array(self.xyz, dtype=np.float64, copy=True)
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise InvalidPoint(f"expected (N, 3) coordinates, got shape {xyz.shape}")
        if not np.isfinite(xyz).all():
            raise InvalidPoint("non-finite coordinate in point cloud")
        object.__setattr__(self, "xyz", _frozen(xyz))
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64, copy=True).reshape(-1)
            if inten.shape[0] != xyz.shape[0]:
                raise InvalidPoint(
                    f"intensity length {inten.shape[0]} != point count {xyz.shape[0]}"
                )
            if not np.isfinite(inten).all() or (inten < 0).any() or (inten > 1).any():
                raise InvalidPoint("intensity values must lie in [0, 1]")
            object.__setattr__(self, "intensity", _frozen(inten))
        if self.frame_id < 0 or self.timestamp_ns < 0:
            raise InvalidPoint("frame_id and timestamp_ns must be non-negative")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.intensity is None) != (other.intensity is None):
            return False
        same_i = self.intensity is None or np.array_equal(self.intensity, other.intensity)
        return (
            self.frame_id == other.frame_id
            and self.timestamp_ns == other.timestamp_ns
            and np.array_equal(self.xyz, other.xyz)
            and same_i
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Aabb:
    min: Point3
    max: Point3

    def __post_init__(self) -> None:
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"box min {self.min} exceeds max {self.max}")

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max, dtype=np.float64) - np.asarray(self.min, dtype=np.float64)

    def diagonal(self) -> float:
        return diagonal(self)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min)
        hi = np.asarray(self.max)
        return np.all((xyz >= lo) & (xyz <= hi), axis=-1)


def bounding_box(cloud: PointCloud) -> Aabb:
    if len(cloud) == 0:
        raise EmptyCloud("bounding box of an empty cloud")
    lo = cloud.xyz.min(axis=0)
    hi = cloud.xyz.max(axis=0)
    return Aabb(Point3(*map(float, lo)), Point3(*map(float, hi)))


def diagonal(box: Aabb) -> float:
    return math.sqrt(sum((hi - lo) ** 2 for lo, hi in zip(box.min, box.max)))


# -- sensor ---------------------------------------------------------------

DEFAULT_BEAMS = 64
DEFAULT_COLUMNS = 2048


@dataclass(frozen=True)
class SensorModel:
    """Beam calibration of a spinning LiDAR.

    Row ``i`` of a range image belongs to ``elevation_deg[i]``; rows are
    ordered from the lowest elevation upwards. Column ``j`` is centred on
    azimuth ``(j + 0.5) * 360 / n_cols`` degrees, to which the per-beam
    ``azimuth_offset_deg`` is added.
    """

    n_beams: int
    n_cols: int
    elevation_deg: tuple[float, ...]
    azimuth_offset_deg: tuple[float, ...]
    range_min_m: float = 0.5
    range_max_m: float = 200.0
    origin: Point3 = field(default_factory=lambda: Point3(0.0, 0.0, 0.0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "elevation_deg", tuple(float(e) for e in self.elevation_deg))
        object.__setattr__(
            self, "azimuth_offset_deg", tuple(float(a) for a in self.azimuth_offset_deg)
        )
        object.__setattr__(self, "origin", Point3(*map(float, self.origin)))
        self.validate()

    def validate(self) -> None:
        if self.n_beams < 1 or self.n_cols < 1:
            raise InvalidSensor("sensor needs at least one beam and one column")
        if len(self.elevation_deg) != self.n_beams:
            raise InvalidSensor("elevation table length must equal n_beams")
        if len(self.azimuth_offset_deg) != self.n_beams:
            raise InvalidSensor("azimuth offset table length must equal n_beams")
        el = self.elevation_deg
        if any(b <= a for a, b in zip(el, el[1:])):
            raise InvalidSensor("elevation angles must be strictly ascending")
        if any(not -90.0 < e < 90.0 for e in el):
            raise InvalidSensor("elevation angles must lie strictly inside (-90, 90)")
        if not 0.0 < self.range_min_m < self.range_max_m:
            raise InvalidSensor("require 0 < range_min_m < range_max_m")
        if not all(math.isfinite(v) for v in (*el, *self.azimuth_offset_deg, *self.origin)):
            raise InvalidSensor("non-finite calibration value")

    @property
    def n_pixels(self) -> int:
        return self.n_beams * self.n_cols

    @property
    def column_step_rad(self) -> float:
        return 2.0 * math.pi / self.n_cols

    def column_centers_rad(self) -> np.ndarray:
        return (np.arange(self.n_cols, dtype=np.float64) + 0.5) * self.column_step_rad

    def to_text(self) -> str:
        """Serialize as ``key = value`` lines (see README for the grammar)."""
        lines = [
            f"n_beams = {self.n_beams}",
            f"n_cols = {self.n_cols}",
            f"range_min_m = {self.range_min_m!r}",
            f"range_max_m = {self.range_max_m!r}",
            "origin = " + " ".join(repr(v) for v in self.origin),
            "elevation_deg = " + " ".join(repr(v) for v in self.elevation_deg),
            "azimuth_offset_deg = " + " ".join(repr(v) for v in self.azimuth_offset_deg),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> SensorModel:
        kv = parse_key_values(text)
        try:
            return cls(
                n_beams=int(kv["n_beams"]),
                n_cols=int(kv["n_cols"]),
                elevation_deg=tuple(float(v) for v in kv["elevation_deg"].split()),
                azimuth_offset_deg=tuple(float(v) for v in kv["azimuth_offset_deg"].split()),
                range_min_m=float(kv["range_min_m"]),
                range_max_m=float(kv["range_max_m"]),
                origin=Point3(*(float(v) for v in kv["origin"].split())),
            )
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, InvalidSensor):
                raise
            raise InvalidSensor(f"bad sensor description: {exc}") from exc

    def fingerprint(self) -> int:
        """64-bit hash of the calibration, stored in range-codec payloads."""
        digest = hashlib.sha256(self.to_text().encode("ascii")).digest()
        return int.from_bytes(digest[:8], "little")


def default_sensor(
    n_beams: int = DEFAULT_BEAMS,
    n_cols: int = DEFAULT_COLUMNS,
    lowest_deg: float = -22.5,
    highest_deg: float = -0.35,
    range_max_m: float = 200.0,
) -> SensorModel:
    """Roadside sensor with evenly spaced below-horizon beams."""
    el = np.linspace(lowest_deg, highest_deg, n_beams) if n_beams > 1 else np.array([lowest_deg])
    return SensorModel(
        n_beams=n_beams,
        n_cols=n_cols,
        elevation_deg=tuple(float(e) for e in el),
        azimuth_offset_deg=(0.0,) * n_beams,
        range_max_m=range_max_m,
    )


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines skip."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
