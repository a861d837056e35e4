"""Range-image codec: calibrated 3D -> 2D projection and image coding.

A scan becomes three ``H x W`` planes (range, azimuth correction,
intensity). Row ``i`` is beam ``sensor.elevation_deg[i]``; column ``j`` is
centred on azimuth ``(j + 0.5) * 2*pi / W``. A pixel's ray points along
elevation ``el[i]`` and azimuth ``center[j] + offset[i] + corr[i, j]``.

Payload layout (little-endian)::

    u32 W, u32 H, u8 mode (0 lossless, 1 quantized), u8 range_bits,
    u8 azimuth_bits, u8 reserved, f64 range_tick_m, f64 azimuth_tick_rad,
    u64 sensor fingerprint
    then three streams, each u32 length + raw deflate data, in the order
    range, azimuth, intensity

Each stream holds one plane: ``H x W`` integers (u32 range codes, i32
azimuth codes, u8 intensity), delta-coded along each row (modular
arithmetic, first column kept as is) and byte-shuffled (all least
significant bytes first) before deflate.

Lossless mode stores range in micrometre ticks and azimuth correction in
micro-radian ticks, so "lossless" means exact at that stored precision.
Quantized mode stores ``floor(r / step) + 1`` with
``step = range_max / 2**range_bits`` (code 0 marks an invalid pixel) and
reconstructs the bin centre.
"""

from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from roadpcc.core import PointCloud, SensorModel, default_sensor
from roadpcc.errors import (
    CorruptPayload,
    EmptyCloud,
    InvalidSensor,
    PointOutOfRange,
    SensorMismatch,
    WrongCodec,
)
from roadpcc.io import CodecId, CompressedFrame

RANGE_TICK_M = 1e-6
AZIMUTH_TICK_RAD = 1e-6
_HEADER = struct.Struct("<IIBBBBddQ")
_LEN = struct.Struct("<I")


class RangeMode(enum.IntEnum):
    LOSSLESS = 0
    QUANTIZED = 1


@dataclass(frozen=True)
class RangeCodecConfig:
    mode: RangeMode = RangeMode.LOSSLESS
    range_bits: int = 16
    azimuth_bits: int = 0

    def __post_init__(self) -> None:
        mode = self.mode
        if isinstance(mode, str):
            try:
                mode = RangeMode[mode.upper()]
            except KeyError:
                raise ValueError(f"unknown range codec mode {self.mode!r}") from None
        object.__setattr__(self, "mode", RangeMode(mode))
        if not 8 <= self.range_bits <= 16:
            raise ValueError("range_bits must be in [8, 16]")
        if not 0 <= self.azimuth_bits <= 16:
            raise ValueError("azimuth_bits must be in [0, 16]")

    @property
    def label(self) -> str:
        if self.mode is RangeMode.LOSSLESS:
            return "lossless"
        return f"quantized;range_bits={self.range_bits};azimuth_bits={self.azimuth_bits}"


@dataclass(frozen=True, eq=False)
class RangeImageSet:
    range_m: np.ndarray
    azimuth_corr_rad: np.ndarray
    intensity: np.ndarray
    sensor: SensorModel
    collisions: int = 0
    frame_id: int = 0
    timestamp_ns: int = 0

    def __post_init__(self) -> None:
        shape = (self.sensor.n_beams, self.sensor.n_cols)
        for name in ("range_m", "azimuth_corr_rad", "intensity"):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, sensor needs {shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if (self.range_m < 0).any() or (self.range_m > self.sensor.range_max_m).any():
            raise PointOutOfRange("range values must lie in [0, range_max_m]")

    @property
    def height(self) -> int:
        return self.sensor.n_beams

    @property
    def width(self) -> int:
        return self.sensor.n_cols

    @property
    def valid(self) -> np.ndarray:
        return self.range_m > 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RangeImageSet):
            return NotImplemented
        return (
            self.sensor == other.sensor
            and np.array_equal(self.range_m, other.range_m)
            and np.array_equal(self.azimuth_corr_rad, other.azimuth_corr_rad)
            and np.array_equal(self.intensity, other.intensity)
        )

    __hash__ = None  # type: ignore[assignment]


def ray_directions(sensor: SensorModel, azimuth_corr: np.ndarray | None = None) -> np.ndarray:
    """Unit ray direction of every pixel, shape ``(H, W, 3)``."""
    el = np.radians(np.asarray(sensor.elevation_deg))[:, None]
    off = np.radians(np.asarray(sensor.azimuth_offset_deg))[:, None]
    if azimuth_corr is None:
        azimuth_corr = np.zeros((sensor.n_beams, sensor.n_cols))
    az = sensor.column_centers_rad()[None, :] + off + azimuth_corr
    cos_el = np.cos(el)
    return np.stack(
        np.broadcast_arrays(cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)), axis=-1
    )


def _nearest_row(el_deg: np.ndarray, table: np.ndarray) -> np.ndarray:
    i = np.searchsorted(table, el_deg)
    lo = np.clip(i - 1, 0, len(table) - 1)
    hi = np.clip(i, 0, len(table) - 1)
    # ties go to the lower row
    return np.where(np.abs(el_deg - table[lo]) <= np.abs(table[hi] - el_deg), lo, hi)


def project(cloud: PointCloud, sensor: SensorModel) -> RangeImageSet:
    """Project ``cloud`` into range/azimuth/intensity images.

    When several points land in one pixel the nearest is kept (earliest
    point on exact ties) and the rest are counted in ``collisions``.
    Points closer than ``range_min_m`` or beyond ``range_max_m`` raise
    :class:`PointOutOfRange`.
    """
    sensor.validate()
    h, w = sensor.n_beams, sensor.n_cols
    rng_img = np.zeros((h, w))
    corr_img = np.zeros((h, w))
    int_img = np.zeros((h, w))
    if len(cloud) == 0:
        return RangeImageSet(rng_img, corr_img, int_img, sensor, 0, cloud.frame_id, cloud.timestamp_ns)

    d = cloud.xyz - np.asarray(sensor.origin)
    r = np.sqrt((d * d).sum(axis=1))
    bad = (r > sensor.range_max_m) | (r < sensor.range_min_m)
    if bad.any():
        raise PointOutOfRange(
            f"{int(bad.sum())} point(s) outside [{sensor.range_min_m}, {sensor.range_max_m}] m"
        )
    el_deg = np.degrees(np.arcsin(np.clip(d[:, 2] / r, -1.0, 1.0)))
    row = _nearest_row(el_deg, np.asarray(sensor.elevation_deg))
    az = np.arctan2(d[:, 1], d[:, 0])
    off = np.radians(np.asarray(sensor.azimuth_offset_deg))[row]
    step = sensor.column_step_rad
    col = np.floor(np.mod(az - off, 2 * math.pi) / step).astype(np.int64) % w
    resid = az - off - sensor.column_centers_rad()[col]
    resid = np.mod(resid + math.pi, 2 * math.pi) - math.pi

    lin = row * w + col
    order = np.lexsort((r, lin))
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = lin[order][1:] != lin[order][:-1]
    keep = order[first]
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    rng_img.reshape(-1)[lin[keep]] = r[keep]
    corr_img.reshape(-1)[lin[keep]] = resid[keep]
    int_img.reshape(-1)[lin[keep]] = inten[keep]
    return RangeImageSet(
        rng_img,
        corr_img,
        int_img,
        sensor,
        collisions=int(len(cloud) - keep.shape[0]),
        frame_id=cloud.frame_id,
        timestamp_ns=cloud.timestamp_ns,
    )


def unproject(images: RangeImageSet) -> PointCloud:
    """One point per valid pixel, ordered column by column (all beams of
    column 0 first, lowest beam first)."""
    s = images.sensor
    valid_t = images.valid.T
    dirs = ray_directions(s, images.azimuth_corr_rad).transpose(1, 0, 2)[valid_t]
    r = images.range_m.T[valid_t]
    xyz = np.asarray(s.origin) + r[:, None] * dirs
    return PointCloud(
        xyz,
        images.intensity.T[valid_t],
        frame_id=images.frame_id,
        timestamp_ns=images.timestamp_ns,
    )


# -- plane coding ---------------------------------------------------------

def _pack_plane(codes: np.ndarray, dtype: str) -> bytes:
    a = np.ascontiguousarray(codes.astype(dtype))
    u = a.view(f"<u{a.dtype.itemsize}")
    delta = u.copy()
    delta[:, 1:] = u[:, 1:] - u[:, :-1]  # unsigned wraparound
    shuffled = delta.reshape(-1).view(np.uint8).reshape(-1, a.dtype.itemsize).T.tobytes()
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    return comp.compress(shuffled) + comp.flush()


def _unpack_plane(data: bytes, shape: tuple[int, int], dtype: str) -> np.ndarray:
    size = np.dtype(dtype).itemsize
    try:
        raw = zlib.decompress(data, -15)
    except zlib.error as exc:
        raise CorruptPayload(f"bad deflate stream: {exc}") from None
    if len(raw) != shape[0] * shape[1] * size:
        raise CorruptPayload("plane size does not match image dimensions")
    delta = np.frombuffer(raw, dtype=np.uint8).reshape(size, -1).T.copy().view(f"<u{size}")
    u = np.cumsum(delta.reshape(shape), axis=1, dtype=f"<u{size}")
    return u.view(dtype)


def _range_step(sensor: SensorModel, cfg: RangeCodecConfig) -> float:
    if cfg.mode is RangeMode.LOSSLESS:
        return RANGE_TICK_M
    return sensor.range_max_m / 2**cfg.range_bits


def _azimuth_step(sensor: SensorModel, cfg: RangeCodecConfig) -> float:
    if cfg.mode is RangeMode.LOSSLESS:
        return AZIMUTH_TICK_RAD
    if cfg.azimuth_bits == 0:
        return 0.0
    return sensor.column_step_rad / 2**cfg.azimuth_bits


def encode(
    images: RangeImageSet,
    cfg: RangeCodecConfig = RangeCodecConfig(),
    n_points_original: int | None = None,
) -> CompressedFrame:
    s = images.sensor
    valid = images.valid
    rstep = _range_step(s, cfg)
    astep = _azimuth_step(s, cfg)
    if cfg.mode is RangeMode.LOSSLESS:
        if s.range_max_m / RANGE_TICK_M >= 2**32:
            raise InvalidSensor("range_max_m too large for micrometre ticks")
        rcode = np.rint(images.range_m / rstep)
        rcode[valid & (rcode == 0)] = 1
        acode = np.rint(images.azimuth_corr_rad / astep)
        acode = np.clip(acode, -(2**31), 2**31 - 1)
    else:
        nlev = 2**cfg.range_bits
        rcode = np.clip(np.floor(images.range_m / rstep), 0, nlev - 1) + 1
        if astep:
            half = s.column_step_rad / 2
            acode = np.clip(
                np.floor((images.azimuth_corr_rad + half) / astep), 0, 2**cfg.azimuth_bits - 1
            )
        else:
            acode = np.zeros_like(images.azimuth_corr_rad)
    rcode = np.where(valid, rcode, 0)
    acode = np.where(valid, acode, 0)
    icode = np.where(valid, np.rint(np.clip(images.intensity, 0, 1) * 255), 0)

    planes = [
        _pack_plane(rcode.astype(np.int64), "<u4"),
        _pack_plane(acode.astype(np.int64), "<i4"),
        _pack_plane(icode.astype(np.int64), "u1"),
    ]
    head = _HEADER.pack(
        s.n_cols, s.n_beams, int(cfg.mode), cfg.range_bits, cfg.azimuth_bits, 0,
        rstep, astep, s.fingerprint(),
    )
    payload = head + b"".join(_LEN.pack(len(p)) + p for p in planes)
    if n_points_original is None:
        n_points_original = int(valid.sum()) + images.collisions
    return CompressedFrame(
        CodecId.RANGE, images.frame_id, images.timestamp_ns, n_points_original, payload
    )


@dataclass(frozen=True)
class RangePayload:
    width: int
    height: int
    mode: RangeMode
    range_bits: int
    azimuth_bits: int
    range_tick_m: float
    azimuth_tick_rad: float
    sensor_fingerprint: int
    planes: tuple[bytes, bytes, bytes]

    @classmethod
    def parse(cls, payload: bytes) -> RangePayload:
        if len(payload) < _HEADER.size:
            raise CorruptPayload("range payload shorter than its header")
        w, h, mode, rbits, abits, _res, rtick, atick, fp = _HEADER.unpack_from(payload)
        if mode not in (0, 1) or w == 0 or h == 0:
            raise CorruptPayload("range header out of range")
        pos = _HEADER.size
        planes = []
        for _ in range(3):
            if pos + _LEN.size > len(payload):
                raise CorruptPayload("truncated plane length field")
            (n,) = _LEN.unpack_from(payload, pos)
            pos += _LEN.size
            if pos + n > len(payload):
                raise CorruptPayload("plane length runs past end of payload")
            planes.append(payload[pos:pos + n])
            pos += n
        if pos != len(payload):
            raise CorruptPayload(f"{len(payload) - pos} trailing bytes after planes")
        return cls(w, h, RangeMode(mode), rbits, abits, rtick, atick, fp, tuple(planes))


def plane_sizes(frame: CompressedFrame) -> dict[str, int]:
    """Compressed byte size of each image plane in a range-codec frame."""
    p = RangePayload.parse(frame.payload)
    return dict(zip(("range", "azimuth", "intensity"), (len(b) for b in p.planes)))


def decode(frame: CompressedFrame, sensor: SensorModel | None = None) -> RangeImageSet:
    if frame.codec_id != CodecId.RANGE:
        raise WrongCodec(f"expected a range frame, got {frame.codec_id.name}")
    sensor = sensor or default_sensor()
    p = RangePayload.parse(frame.payload)
    if p.sensor_fingerprint != sensor.fingerprint():
        raise SensorMismatch("frame was encoded for a different sensor calibration")
    if (p.width, p.height) != (sensor.n_cols, sensor.n_beams):
        raise CorruptPayload("image dimensions disagree with the sensor")
    shape = (p.height, p.width)
    rcode = _unpack_plane(p.planes[0], shape, "<u4").astype(np.float64)
    acode = _unpack_plane(p.planes[1], shape, "<i4").astype(np.float64)
    icode = _unpack_plane(p.planes[2], shape, "u1").astype(np.float64)
    valid = rcode > 0
    if p.mode is RangeMode.LOSSLESS:
        rng = rcode * p.range_tick_m
        corr = acode * p.azimuth_tick_rad
    else:
        if rcode.max(initial=0) > 2**p.range_bits:
            raise CorruptPayload("range code exceeds quantizer levels")
        rng = np.where(valid, (rcode - 0.5) * p.range_tick_m, 0.0)
        if p.azimuth_bits:
            corr = -sensor.column_step_rad / 2 + (acode + 0.5) * p.azimuth_tick_rad
        else:
            corr = np.zeros(shape)
    corr = np.where(valid, corr, 0.0)
    inten = np.where(valid, icode / 255.0, 0.0)
    if rng.max(initial=0) > sensor.range_max_m:
        if rng.max() > sensor.range_max_m * (1 + 1e-12):
            raise CorruptPayload("decoded range beyond sensor maximum")
        rng = np.minimum(rng, sensor.range_max_m)
    return RangeImageSet(rng, corr, inten, sensor, 0, frame.frame_id, frame.timestamp_ns)


def encode_cloud(
    cloud: PointCloud, sensor: SensorModel, cfg: RangeCodecConfig = RangeCodecConfig()
) -> CompressedFrame:
    if len(cloud) == 0:
        raise EmptyCloud("cannot encode an empty cloud")
    return encode(project(cloud, sensor), cfg, n_points_original=len(cloud))


def decode_cloud(frame: CompressedFrame, sensor: SensorModel | None = None) -> PointCloud:
    return unproject(decode(frame, sensor))
