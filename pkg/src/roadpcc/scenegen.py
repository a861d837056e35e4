"""Synthetic roadside scenes and a ray-cast spinning-LiDAR simulator.

Randomness comes from SplitMix64 used as a counter-based generator: the
``k``-th 64-bit draw for key ``s`` is ``mix(s + (k + 1) * 0x9E3779B97F4A7C15)``
with::

    mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
            return z ^ (z >> 31)            (all arithmetic mod 2**64)

A uniform double is ``(draw >> 11) * 2**-53``. Scenes are therefore
reproducible in any language with 64-bit unsigned arithmetic.

Scene text format, one record per line, ``#`` comments allowed::

    ground_z = <float> | none
    object = box_vehicle <cx> <cy> <cz> <length> <width> <height> <yaw_rad>
    object = cylinder_pedestrian <cx> <cy> <cz> <radius> <height> <yaw_rad>

Floats are written with Python ``repr`` (shortest round-trip form).
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from roadpcc.core import Point3, PointCloud, SensorModel, default_sensor
from roadpcc.rangeimage import RangeImageSet, ray_directions, unproject

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_M64 = (1 << 64) - 1

BOX_VEHICLE = "box_vehicle"
CYLINDER_PEDESTRIAN = "cylinder_pedestrian"
INTENSITY = {"ground": 0.2, BOX_VEHICLE: 0.7, CYLINDER_PEDESTRIAN: 0.45}
DEFAULT_GROUND_Z = -5.0
# objects are kept this far (m, horizontally) from the sensor mast
_MAST_CLEARANCE = 4.0


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & _M64
    z = ((z ^ (z >> 27)) * MIX2) & _M64
    return z ^ (z >> 31)


class SplitMix64:
    """Counter-based SplitMix64 stream keyed by ``seed``."""

    def __init__(self, seed: int) -> None:
        self.seed = seed & _M64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64((self.seed + self.counter * GOLDEN) & _M64)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)


def splitmix_array(seed: int, start: int, n: int) -> np.ndarray:
    """Draws ``start+1 .. start+n`` of the stream keyed by ``seed``."""
    k = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    z = np.uint64(seed & _M64) + k * np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def gaussian_array(seed: int, n: int) -> np.ndarray:
    """``n`` standard normals by Box-Muller over draw pairs ``(2i+1, 2i+2)``."""
    draws = splitmix_array(seed, 0, 2 * n).reshape(n, 2)
    u1 = ((draws[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (draws[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


@dataclass(frozen=True)
class SceneObject:
    kind: str
    center: Point3
    dims: tuple[float, ...]
    yaw_rad: float = 0.0

    def __post_init__(self) -> None:
        want = {BOX_VEHICLE: 3, CYLINDER_PEDESTRIAN: 2}.get(self.kind)
        if want is None:
            raise ValueError(f"unknown object kind {self.kind!r}")
        if len(self.dims) != want or any(d <= 0 for d in self.dims):
            raise ValueError(f"{self.kind} needs {want} positive dims, got {self.dims}")
        object.__setattr__(self, "center", Point3(*map(float, self.center)))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))

    @property
    def height(self) -> float:
        return self.dims[-1]


@dataclass(frozen=True)
class Scene:
    ground_z: float | None = DEFAULT_GROUND_Z
    objects: tuple[SceneObject, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.ground_z is not None:
            for o in self.objects:
                if o.center.z - o.height / 2 < self.ground_z - 1e-9:
                    raise ValueError(f"object below ground: {o}")

    def to_text(self) -> str:
        lines = ["# roadpcc scene v1"]
        lines.append(f"ground_z = {'none' if self.ground_z is None else repr(self.ground_z)}")
        for o in self.objects:
            nums = (*o.center, *o.dims, o.yaw_rad)
            lines.append(f"object = {o.kind} " + " ".join(repr(v) for v in nums))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Scene:
        ground: float | None = DEFAULT_GROUND_Z
        objects = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            if key == "ground_z":
                v = value.strip()
                ground = None if v == "none" else float(v)
            elif key == "object":
                kind, *nums = value.split()
                vals = [float(v) for v in nums]
                ndims = 3 if kind == BOX_VEHICLE else 2
                if len(vals) != 3 + ndims + 1:
                    raise ValueError(f"line {lineno}: wrong field count for {kind}")
                objects.append(
                    SceneObject(kind, Point3(*vals[:3]), tuple(vals[3:3 + ndims]), vals[-1])
                )
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        return cls(ground, tuple(objects))


def _place(rng: SplitMix64, extent: float) -> tuple[float, float]:
    x = y = 0.0
    for _ in range(64):
        x = rng.uniform(-extent, extent)
        y = rng.uniform(-extent, extent)
        if math.hypot(x, y) >= _MAST_CLEARANCE:
            break
    return x, y


def generate_scene(
    seed: int,
    n_vehicles: int = 8,
    n_pedestrians: int = 6,
    extent_m: float = 60.0,
    ground_z: float = DEFAULT_GROUND_Z,
) -> Scene:
    """Random vehicles and pedestrians standing on a flat ground plane.

    Object centres lie in ``[-extent_m, extent_m]**2``; the same arguments
    always give the same scene.
    """
    if extent_m <= 0:
        raise ValueError("extent_m must be positive")
    if n_vehicles < 0 or n_pedestrians < 0:
        raise ValueError("object counts must be non-negative")
    rng = SplitMix64(seed)
    objects = []
    for _ in range(n_vehicles):
        x, y = _place(rng, extent_m)
        length = rng.uniform(3.5, 12.0)
        width = rng.uniform(1.6, 2.6)
        height = rng.uniform(1.4, 3.8)
        yaw = rng.uniform(-math.pi, math.pi)
        objects.append(
            SceneObject(BOX_VEHICLE, Point3(x, y, ground_z + height / 2), (length, width, height), yaw)
        )
    for _ in range(n_pedestrians):
        x, y = _place(rng, extent_m)
        radius = rng.uniform(0.2, 0.35)
        height = rng.uniform(1.5, 1.95)
        objects.append(
            SceneObject(CYLINDER_PEDESTRIAN, Point3(x, y, ground_z + height / 2), (radius, height), 0.0)
        )
    return Scene(ground_z, tuple(objects))


# -- ray casting ----------------------------------------------------------

def _hit_plane(o: np.ndarray, d: np.ndarray, z: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[2]) / d[:, 2]
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def _hit_box(o: np.ndarray, d: np.ndarray, obj: SceneObject) -> np.ndarray:
    c, s = math.cos(obj.yaw_rad), math.sin(obj.yaw_rad)
    rel = o - np.asarray(obj.center)
    # rotate into the box frame (inverse yaw)
    ol = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
    dl = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    half = np.asarray(obj.dims) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - ol) / dl
        t2 = (half - ol) / dl
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # axis-parallel rays: inside slab -> unbounded, outside -> miss
    par = dl == 0
    inside = np.abs(ol) <= half
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    return np.where((tn <= tf) & (tn > 0), tn, np.inf)


def _hit_cylinder(o: np.ndarray, d: np.ndarray, obj: SceneObject) -> np.ndarray:
    radius, height = obj.dims
    cx, cy, cz = obj.center
    z0, z1 = cz - height / 2, cz + height / 2
    ox, oy = o[0] - cx, o[1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (d[:, 0] * ox + d[:, 1] * oy)
    cc = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * cc
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(disc)) / (2 * a)
    z_side = o[2] + t_side * d[:, 2]
    side_ok = (disc >= 0) & (a > 0) & (t_side > 0) & (z_side >= z0) & (z_side <= z1)
    best = np.where(side_ok, t_side, np.inf)
    for zc in (z0, z1):
        t = _hit_plane(o, d, zc)
        px = ox + t * d[:, 0]
        py = oy + t * d[:, 1]
        with np.errstate(invalid="ignore"):
            cap = np.isfinite(t) & (px * px + py * py <= radius * radius)
        best = np.where(cap & (t < best), t, best)
    return best


def cast_rays(scene: Scene, sensor: SensorModel) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit distance and surface intensity for every pixel.

    Returns ``(H, W)`` arrays; misses have distance ``inf``.
    """
    o = np.asarray(sensor.origin, dtype=np.float64)
    d = ray_directions(sensor).reshape(-1, 3)
    best = np.full(d.shape[0], np.inf)
    inten = np.zeros(d.shape[0])
    if scene.ground_z is not None:
        best = _hit_plane(o, d, scene.ground_z)
        inten[np.isfinite(best)] = INTENSITY["ground"]
    for obj in scene.objects:
        t = _hit_box(o, d, obj) if obj.kind == BOX_VEHICLE else _hit_cylinder(o, d, obj)
        closer = t < best
        best = np.where(closer, t, best)
        inten[closer] = INTENSITY[obj.kind]
    shape = (sensor.n_beams, sensor.n_cols)
    return best.reshape(shape), inten.reshape(shape)


def simulate_lidar(
    scene: Scene,
    sensor: SensorModel | None = None,
    noise_sigma_m: float = 0.0,
    noise_seed: int = 0,
    frame_id: int = 0,
    timestamp_ns: int = 0,
) -> tuple[PointCloud, RangeImageSet]:
    """Scan ``scene`` with one return per pixel.

    Gaussian range noise for pixel ``k = row * W + col`` uses draws
    ``2k+1, 2k+2`` of the stream keyed by ``noise_seed``. Returns that fall
    outside ``[range_min_m, range_max_m]`` after noise become invalid
    pixels. The cloud is exactly :func:`unproject` of the returned images,
    so it is ordered column by column.
    """
    sensor = sensor or default_sensor()
    sensor.validate()
    if noise_sigma_m < 0:
        raise ValueError("noise_sigma_m must be non-negative")
    t, inten = cast_rays(scene, sensor)
    if noise_sigma_m > 0:
        t = t + noise_sigma_m * gaussian_array(noise_seed, t.size).reshape(t.shape)
    ok = np.isfinite(t) & (t >= sensor.range_min_m) & (t <= sensor.range_max_m)
    images = RangeImageSet(
        np.where(ok, t, 0.0),
        np.zeros(t.shape),
        np.where(ok, inten, 0.0),
        sensor,
        frame_id=frame_id,
        timestamp_ns=timestamp_ns,
    )
    return unproject(images), images


FRAME_PERIOD_NS = 100_000_000


def iter_frames(
    seed: int,
    n_frames: int,
    sensor: SensorModel | None = None,
    *,
    n_vehicles: int = 8,
    n_pedestrians: int = 6,
    extent_m: float = 60.0,
    noise_sigma_m: float = 0.01,
) -> Iterator[PointCloud]:
    """Lazily scan ``n_frames`` independent scenes at 10 Hz timestamps.

    Frame ``i`` scans ``generate_scene(mix64(seed) + i, ...)`` with noise
    key ``mix64(seed ^ GOLDEN) + i``.
    """
    base = mix64(seed & _M64)
    noise_base = mix64((seed ^ GOLDEN) & _M64)
    for i in range(n_frames):
        scene = generate_scene((base + i) & _M64, n_vehicles, n_pedestrians, extent_m)
        cloud, _ = simulate_lidar(
            scene, sensor, noise_sigma_m, (noise_base + i) & _M64, frame_id=i,
            timestamp_ns=i * FRAME_PERIOD_NS,
        )
        yield cloud


def simulate_frames(seed: int, n_frames: int, sensor: SensorModel | None = None, **kw) -> list[PointCloud]:
    """All frames of :func:`iter_frames` as a list."""
    return list(iter_frames(seed, n_frames, sensor, **kw))
