"""Voxel-grid codec.

A cloud is binned into cubic voxels of side ``v`` anchored at its bounding
box minimum, with ``dims = floor(extent / v) + 1`` cells per axis. Each
occupied cell keeps a value that depends on the assignment mode: binary
(occupied), averaged (mean position and mean intensity) or density (point
count).

Payload layout (little-endian)::

    3 x f64   origin x, y, z
    f64       voxel size
    3 x u32   dims nx, ny, nz
    u8        assignment (0 binary, 1 averaged, 2 density)
    u8        1 if averaged intensities are present
    u32       number of occupied voxels
    sections, each ``u32 n_symbols, u32 n_bytes, range-coded bytes``:
      runs        LEB128 varints of alternating empty/occupied run lengths
                  over the x-fastest linearized bitmask, starting with an
                  empty run (possibly 0); trailing empties are implicit
      centroids   averaged only: per voxel, per axis, u16 position inside
                  the voxel, byte-shuffled (all low bytes, then high bytes)
      intensity   averaged with intensity only: u16 round(i * 65535), shuffled
      counts      density only: LEB128 varints of count - 1

Every section uses the order-0 adaptive range coder over bytes.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from roadpcc.core import Point3, PointCloud, bounding_box
from roadpcc.entropy import decode_symbols, encode_symbols
from roadpcc.errors import CorruptPayload, EmptyCloud, NonPositiveVoxelSize, WrongCodec
from roadpcc.io import CodecId, CompressedFrame

_HEADER = struct.Struct("<4d3IBBI")
_SECTION = struct.Struct("<II")
CENTROID_BITS = 16
_CQ = 1 << CENTROID_BITS


class Assignment(enum.IntEnum):
    BINARY = 0
    AVERAGED = 1
    DENSITY = 2

    @classmethod
    def parse(cls, value: Assignment | str | int) -> Assignment:
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown voxel assignment {value!r}") from None
        return cls(value)


@dataclass(frozen=True)
class VoxelCodecConfig:
    voxel_size: float = 0.2
    assignment: Assignment = Assignment.BINARY

    def __post_init__(self) -> None:
        if not (math.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise NonPositiveVoxelSize(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "assignment", Assignment.parse(self.assignment))

    @property
    def label(self) -> str:
        return f"voxel={self.voxel_size:g};assign={self.assignment.name.lower()}"


def _readonly(a: np.ndarray | None, dtype) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Sparse voxel grid.

    ``cells`` holds the occupied ``(ix, iy, iz)`` indices sorted by the
    x-fastest linear index. ``centroids``/``intensity`` are set only in
    averaged mode (``intensity`` only when the source cloud had it),
    ``counts`` only in density mode.
    """

    origin: Point3
    voxel_size: float
    dims: tuple[int, int, int]
    assignment: Assignment
    cells: np.ndarray
    centroids: np.ndarray | None = None
    intensity: np.ndarray | None = None
    counts: np.ndarray | None = None
    n_points: int = 0
    frame_id: int = 0
    timestamp_ns: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise NonPositiveVoxelSize(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "origin", Point3(*map(float, self.origin)))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "assignment", Assignment.parse(self.assignment))
        cells = _readonly(self.cells, np.int64).reshape(-1, 3)
        object.__setattr__(self, "cells", cells)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if cells.size and ((cells < 0).any() or (cells >= np.array(self.dims)).any()):
            raise ValueError("voxel index outside grid dims")
        n = cells.shape[0]
        mode = self.assignment
        object.__setattr__(self, "centroids", _readonly(self.centroids, np.float64))
        object.__setattr__(self, "intensity", _readonly(self.intensity, np.float64))
        object.__setattr__(self, "counts", _readonly(self.counts, np.int64))
        if (self.centroids is not None) != (mode is Assignment.AVERAGED):
            raise ValueError("centroids are required in averaged mode and only there")
        if self.centroids is not None and self.centroids.shape != (n, 3):
            raise ValueError("one centroid per occupied voxel required")
        if self.intensity is not None and (
            mode is not Assignment.AVERAGED or self.intensity.shape != (n,)
        ):
            raise ValueError("intensity needs averaged mode and one value per voxel")
        if (self.counts is not None) != (mode is Assignment.DENSITY):
            raise ValueError("counts are required in density mode and only there")
        if self.counts is not None and (self.counts.shape != (n,) or (self.counts < 1).any()):
            raise ValueError("density counts must be >= 1, one per voxel")

    @property
    def n_occupied(self) -> int:
        return self.cells.shape[0]

    def linear_index(self) -> np.ndarray:
        nx, ny, _ = self.dims
        c = self.cells
        return c[:, 0] + nx * (c[:, 1] + ny * c[:, 2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b)
            )

        return (
            self.origin == other.origin
            and self.voxel_size == other.voxel_size
            and self.dims == other.dims
            and self.assignment == other.assignment
            and np.array_equal(self.cells, other.cells)
            and same(self.centroids, other.centroids)
            and same(self.intensity, other.intensity)
            and same(self.counts, other.counts)
        )

    __hash__ = None  # type: ignore[assignment]


def voxelize(
    cloud: PointCloud, voxel_size: float, assignment: Assignment | str = Assignment.BINARY
) -> VoxelGrid:
    if len(cloud) == 0:
        raise EmptyCloud("cannot voxelize an empty cloud")
    if not (math.isfinite(voxel_size) and voxel_size > 0):
        raise NonPositiveVoxelSize(f"voxel_size must be > 0, got {voxel_size}")
    mode = Assignment.parse(assignment)
    box = bounding_box(cloud)
    origin = np.asarray(box.min)
    dims = np.floor(box.extent / voxel_size).astype(np.int64) + 1
    idx = np.floor((cloud.xyz - origin) / voxel_size).astype(np.int64)
    np.clip(idx, 0, dims - 1, out=idx)
    nx, ny, _ = dims
    lin = idx[:, 0] + nx * (idx[:, 1] + ny * idx[:, 2])
    uniq, first, inverse, counts = np.unique(
        lin, return_index=True, return_inverse=True, return_counts=True
    )
    cells = idx[first]
    centroids = intensity = dens = None
    if mode is Assignment.AVERAGED:
        # sort by voxel then coordinates so sums do not depend on input order
        order = np.lexsort((cloud.xyz[:, 2], cloud.xyz[:, 1], cloud.xyz[:, 0], inverse))
        inv = inverse[order]
        centroids = np.stack(
            [np.bincount(inv, weights=cloud.xyz[order, a], minlength=uniq.size) for a in range(3)],
            axis=1,
        ) / counts[:, None]
        # a mean can round just outside its voxel; keep it inside
        lo = origin + cells * voxel_size
        centroids = np.clip(centroids, lo, lo + voxel_size)
        if cloud.intensity is not None:
            intensity = np.bincount(inv, weights=cloud.intensity[order], minlength=uniq.size) / counts
            intensity = np.clip(intensity, 0.0, 1.0)
    elif mode is Assignment.DENSITY:
        dens = counts
    return VoxelGrid(
        Point3(*map(float, origin)), float(voxel_size), tuple(int(d) for d in dims), mode,
        cells, centroids, intensity, dens, len(cloud), cloud.frame_id, cloud.timestamp_ns,
    )


def voxel_centers(grid: VoxelGrid) -> np.ndarray:
    return np.asarray(grid.origin) + (grid.cells + 0.5) * grid.voxel_size


def devoxelize(grid: VoxelGrid) -> PointCloud:
    if grid.assignment is Assignment.AVERAGED:
        return PointCloud(grid.centroids, grid.intensity, grid.frame_id, grid.timestamp_ns)
    return PointCloud(voxel_centers(grid), None, grid.frame_id, grid.timestamp_ns)


# -- centroid and intensity quantization ----------------------------------


def _centroid_codes(grid: VoxelGrid) -> np.ndarray:
    lo = np.asarray(grid.origin) + grid.cells * grid.voxel_size
    frac = (grid.centroids - lo) / grid.voxel_size
    return np.clip(np.floor(frac * _CQ), 0, _CQ - 1).astype(np.int64)


def _centroids_from_codes(grid_origin, cells, voxel_size, q) -> np.ndarray:
    lo = np.asarray(grid_origin) + cells * voxel_size
    return lo + (q + 0.5) / _CQ * voxel_size


def quantize_grid(grid: VoxelGrid) -> VoxelGrid:
    """The grid exactly as :func:`decode` will return it after :func:`encode`.

    Only averaged mode changes: centroids snap to the 16-bit lattice inside
    their voxel (error at most ``v / 2**17`` per axis) and intensities to
    multiples of 1/65535.
    """
    if grid.assignment is not Assignment.AVERAGED:
        return grid
    cent = _centroids_from_codes(grid.origin, grid.cells, grid.voxel_size, _centroid_codes(grid))
    inten = None if grid.intensity is None else np.rint(grid.intensity * 65535) / 65535
    return VoxelGrid(
        grid.origin, grid.voxel_size, grid.dims, grid.assignment, grid.cells, cent, inten,
        None, grid.n_points, grid.frame_id, grid.timestamp_ns,
    )


# -- varints and runs -----------------------------------------------------


def varint_encode(values: np.ndarray) -> np.ndarray:
    """LEB128 bytes of non-negative integers, vectorized."""
    v = np.asarray(values, dtype=np.uint64).reshape(-1)
    if v.size == 0:
        return np.zeros(0, dtype=np.uint8)
    nbytes = np.ones(v.size, dtype=np.int64)
    t = v >> np.uint64(7)
    while t.any():
        nbytes += t > 0
        t >>= np.uint64(7)
    out = np.empty(int(nbytes.sum()), dtype=np.uint8)
    start = np.concatenate([[0], np.cumsum(nbytes)[:-1]])
    for k in range(int(nbytes.max())):
        sel = nbytes > k
        byte = (v[sel] >> np.uint64(7 * k)) & np.uint64(0x7F)
        more = (nbytes[sel] > k + 1).astype(np.uint64) << np.uint64(7)
        out[start[sel] + k] = (byte | more).astype(np.uint8)
    return out


def varint_decode(data: np.ndarray) -> np.ndarray:
    b = np.asarray(data, dtype=np.uint8)
    if b.size == 0:
        return np.zeros(0, dtype=np.int64)
    if b[-1] & 0x80:
        raise CorruptPayload("truncated varint")
    ends = np.flatnonzero((b & 0x80) == 0)
    starts = np.concatenate([[0], ends[:-1] + 1])
    lengths = ends - starts + 1
    if lengths.max() > 9:
        raise CorruptPayload("varint longer than 63 bits")
    out = np.zeros(ends.size, dtype=np.int64)
    for k in range(int(lengths.max())):
        sel = lengths > k
        out[sel] |= (b[starts[sel] + k].astype(np.int64) & 0x7F) << (7 * k)
    return out


def occupancy_runs(linear: np.ndarray) -> np.ndarray:
    """Alternating empty/occupied run lengths of a sorted linear index set."""
    if linear.size == 0:
        return np.zeros(0, dtype=np.int64)
    brk = np.flatnonzero(np.diff(linear) != 1) + 1
    run_start = linear[np.concatenate([[0], brk])]
    run_end = linear[np.concatenate([brk - 1, [linear.size - 1]])] + 1
    gaps = run_start - np.concatenate([[0], run_end[:-1]])
    return np.stack([gaps, run_end - run_start], axis=1).reshape(-1)


def runs_to_linear(runs: np.ndarray, total: int) -> np.ndarray:
    if runs.size % 2:
        raise CorruptPayload("odd number of occupancy runs")
    gaps, fills = runs[0::2], runs[1::2]
    if (fills < 1).any() or (gaps[1:] < 1).any():
        raise CorruptPayload("zero-length occupancy run")
    if gaps.sum() + fills.sum() > total:
        raise CorruptPayload("occupancy runs exceed the grid")
    starts = np.cumsum(gaps + np.concatenate([[0], fills[:-1]]))
    n = int(fills.sum())
    first = np.repeat(starts - np.concatenate([[0], np.cumsum(fills)[:-1]]), fills)
    return first + np.arange(n)


def _section(data: np.ndarray) -> bytes:
    body = encode_symbols(data, alphabet=256)
    return _SECTION.pack(data.size, len(body)) + body


def _shuffle_u16(codes: np.ndarray) -> np.ndarray:
    c = codes.astype("<u2")
    return c.view(np.uint8).reshape(-1, 2).T.reshape(-1)


def _unshuffle_u16(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data.reshape(2, -1).T).view("<u2").reshape(-1).astype(np.int64)


# -- codec ----------------------------------------------------------------


def encode(grid: VoxelGrid) -> CompressedFrame:
    if grid.n_occupied == 0:
        raise EmptyCloud("cannot encode an empty voxel grid")
    nx, ny, nz = grid.dims
    if max(grid.dims) >= 2**32:
        raise ValueError("grid dims exceed u32")
    lin = grid.linear_index()
    order = np.argsort(lin, kind="stable")
    lin = lin[order]
    has_i = grid.intensity is not None
    head = _HEADER.pack(
        *grid.origin, grid.voxel_size, nx, ny, nz, int(grid.assignment), int(has_i), grid.n_occupied
    )
    parts = [head, _section(varint_encode(occupancy_runs(lin)))]
    if grid.assignment is Assignment.AVERAGED:
        q = _centroid_codes(grid)[order]
        parts.append(_section(_shuffle_u16(q.reshape(-1))))
        if has_i:
            parts.append(_section(_shuffle_u16(np.rint(grid.intensity[order] * 65535))))
    elif grid.assignment is Assignment.DENSITY:
        parts.append(_section(varint_encode(grid.counts[order] - 1)))
    n_orig = grid.n_points or (
        int(grid.counts.sum()) if grid.counts is not None else grid.n_occupied
    )
    return CompressedFrame(
        CodecId.VOXEL, grid.frame_id, grid.timestamp_ns, n_orig, b"".join(parts)
    )


class _Reader:
    def __init__(self, payload: bytes, pos: int) -> None:
        self.payload = payload
        self.pos = pos

    def section(self) -> np.ndarray:
        if self.pos + _SECTION.size > len(self.payload):
            raise CorruptPayload("truncated section header")
        n_sym, n_bytes = _SECTION.unpack_from(self.payload, self.pos)
        self.pos += _SECTION.size
        if self.pos + n_bytes > len(self.payload):
            raise CorruptPayload("section runs past end of payload")
        body = self.payload[self.pos:self.pos + n_bytes]
        self.pos += n_bytes
        if n_sym > 256 * 8 * (n_bytes + 8):
            # the adaptive model never spends less than ~1/180 bit per symbol
            raise CorruptPayload("implausible section symbol count")
        return decode_symbols(body, n_sym, alphabet=256).astype(np.uint8)


def decode(frame: CompressedFrame) -> VoxelGrid:
    if frame.codec_id != CodecId.VOXEL:
        raise WrongCodec(f"expected a voxel frame, got {frame.codec_id.name}")
    payload = frame.payload
    if len(payload) < _HEADER.size:
        raise CorruptPayload("voxel payload shorter than its header")
    ox, oy, oz, v, nx, ny, nz, mode, has_i, n_occ = _HEADER.unpack_from(payload)
    if not all(math.isfinite(a) for a in (ox, oy, oz, v)) or not v > 0:
        raise CorruptPayload("bad voxel origin or size")
    if mode > 2 or has_i > 1 or min(nx, ny, nz) < 1 or n_occ < 1:
        raise CorruptPayload("voxel header out of range")
    if has_i and mode != Assignment.AVERAGED:
        raise CorruptPayload("intensity flag outside averaged mode")
    mode = Assignment(mode)
    rd = _Reader(payload, _HEADER.size)
    lin = runs_to_linear(varint_decode(rd.section()), nx * ny * nz)
    if lin.size != n_occ:
        raise CorruptPayload(f"runs give {lin.size} voxels, header says {n_occ}")
    cells = np.stack([lin % nx, (lin // nx) % ny, lin // (nx * ny)], axis=1)
    origin = Point3(ox, oy, oz)
    centroids = intensity = counts = None
    if mode is Assignment.AVERAGED:
        raw = rd.section()
        if raw.size != 6 * n_occ:
            raise CorruptPayload("centroid section has the wrong length")
        q = _unshuffle_u16(raw).reshape(n_occ, 3)
        centroids = _centroids_from_codes(origin, cells, v, q)
        if has_i:
            raw = rd.section()
            if raw.size != 2 * n_occ:
                raise CorruptPayload("intensity section has the wrong length")
            code = _unshuffle_u16(raw)
            if code.max() > 65535:
                raise CorruptPayload("intensity code out of range")
            intensity = code / 65535
    elif mode is Assignment.DENSITY:
        counts = varint_decode(rd.section()) + 1
        if counts.size != n_occ:
            raise CorruptPayload("density section has the wrong count")
    if rd.pos != len(payload):
        raise CorruptPayload(f"{len(payload) - rd.pos} trailing bytes in voxel payload")
    return VoxelGrid(
        origin, v, (nx, ny, nz), mode, cells, centroids, intensity, counts,
        frame.n_points_original, frame.frame_id, frame.timestamp_ns,
    )


def encode_cloud(cloud: PointCloud, cfg: VoxelCodecConfig = VoxelCodecConfig()) -> CompressedFrame:
    return encode(voxelize(cloud, cfg.voxel_size, cfg.assignment))


def decode_cloud(frame: CompressedFrame) -> PointCloud:
    return devoxelize(decode(frame))
