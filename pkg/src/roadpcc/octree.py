"""Octree geometry codec.

Points are quantized onto a ``2**bits`` lattice spanning the cubified
bounding box, the occupied cells are arranged into an octree, and the
breadth-first sequence of occupancy bytes is range coded.

Child ``k`` of a node has offset ``(k & 1, (k >> 1) & 1, k >> 2)`` in
``(x, y, z)``, i.e. z is the most significant bit of the child index;
bit ``k`` of the occupancy byte is set iff child ``k`` is occupied.
Nodes of one level are visited in parent order, children in ascending
``k``.

Payload layout (little-endian)::

    6 x f64   cube min x, y, z, cube max x, y, z
    u8        quantization bits
    u32       number of leaves (distinct occupied cells)
    u8        context mode (0 order0, 1 parent_context)
    ...       range-coded occupancy bytes (symbol = byte - 1, 255 symbols);
              parent_context mode codes each byte in the context of its
              parent's occupancy byte (the root in context 0), re-seeding
              the context tables at the start of every level
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from roadpcc.core import Aabb, Point3, PointCloud, bounding_box
from roadpcc.entropy import SymbolDecoder, encode_symbols
from roadpcc.errors import CorruptPayload, DegenerateBox, EmptyCloud, WrongCodec
from roadpcc.io import CodecId, CompressedFrame

_HEADER = struct.Struct("<6dBIB")
MAX_BITS = 30


class ContextMode(enum.IntEnum):
    ORDER0 = 0
    PARENT_CONTEXT = 1

    @classmethod
    def parse(cls, value: ContextMode | str | int) -> ContextMode:
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown context mode {value!r}") from None
        return cls(value)


@dataclass(frozen=True)
class OctreeConfig:
    quantization_bits: int = 16
    context_mode: ContextMode = ContextMode.ORDER0

    def __post_init__(self) -> None:
        if not 1 <= self.quantization_bits <= MAX_BITS:
            raise ValueError(f"quantization_bits must be in [1, {MAX_BITS}]")
        object.__setattr__(self, "context_mode", ContextMode.parse(self.context_mode))

    @property
    def depth(self) -> int:
        return self.quantization_bits

    @property
    def label(self) -> str:
        return f"bits={self.quantization_bits};ctx={self.context_mode.name.lower()}"


def cube_of(box: Aabb) -> Aabb:
    """Expand ``box`` to a cube anchored at its min corner."""
    side = float(box.extent.max())
    lo = box.min
    return Aabb(lo, Point3(lo.x + side, lo.y + side, lo.z + side))


def half_cell_diagonal(cube: Aabb, bits: int) -> float:
    return float(cube.extent.max()) / 2**bits * math.sqrt(3) / 2


def _cells(xyz: np.ndarray, cube: Aabb, bits: int) -> np.ndarray:
    side = float(cube.extent.max())
    n = 1 << bits
    rel = (xyz - np.asarray(cube.min)) * (n / side)
    idx = np.floor(rel).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)
    return idx


def _morton_sort(cells: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct cells in breadth-first (z-major Morton) order, plus the
    ``(n, bits)`` matrix of child indices along each cell's root path."""
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    digits = (
        (((cells[:, 2:3] >> shifts) & 1) << 2)
        | (((cells[:, 1:2] >> shifts) & 1) << 1)
        | ((cells[:, 0:1] >> shifts) & 1)
    )
    if 3 * bits <= 63:
        # the Morton key orders exactly like the digit rows
        key = (digits << (3 * shifts)).sum(axis=1)
        _, first = np.unique(key, return_index=True)
    else:
        _, first = np.unique(digits, axis=0, return_index=True)
    return cells[first], digits[first].astype(np.uint8)


def quantize(cloud: PointCloud, bits: int) -> tuple[Aabb, np.ndarray]:
    """Map points to lattice cells of the cubified bounding box.

    Returns the cube and the distinct occupied cells as an ``(n, 3)`` int
    array in octree traversal order.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot quantize an empty cloud")
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    box = bounding_box(cloud)
    if not (box.extent > 0).any():
        raise DegenerateBox("all points coincide; box has zero extent")
    cube = cube_of(box)
    cells, _ = _morton_sort(_cells(cloud.xyz, cube, bits), bits)
    return cube, cells


def cell_centers(cells: np.ndarray, cube: Aabb, bits: int) -> np.ndarray:
    size = float(cube.extent.max()) / 2**bits
    return np.asarray(cube.min) + (cells + 0.5) * size


def occupancy_stream(digits: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Breadth-first occupancy bytes, each byte's parent occupancy, and
    the number of nodes per level.

    ``digits`` is the sorted child-index matrix from the traversal sort.
    """
    n, bits = digits.shape
    occ_levels: list[np.ndarray] = []
    ctx_levels: list[np.ndarray] = []
    starts = np.zeros(n, dtype=bool)
    starts[0] = True
    prev_occ = np.zeros(1, dtype=np.int64)
    prev_parent = np.zeros(n, dtype=np.int64)
    for level in range(bits):
        parent = np.cumsum(starts) - 1
        n_nodes = int(parent[-1]) + 1
        child_starts = starts.copy()
        child_starts[1:] |= digits[1:, level] != digits[:-1, level]
        weights = np.left_shift(1, digits[child_starts, level].astype(np.int64))
        occ = np.bincount(parent[child_starts], weights=weights, minlength=n_nodes).astype(np.int64)
        occ_levels.append(occ)
        # parent occupancy byte of every node at this level
        ctx_levels.append(prev_occ[prev_parent[starts]])
        prev_occ = occ
        prev_parent = parent
        starts = child_starts
    return np.concatenate(occ_levels), np.concatenate(ctx_levels), [len(o) for o in occ_levels]


def encode(cloud: PointCloud, cfg: OctreeConfig = OctreeConfig()) -> CompressedFrame:
    if len(cloud) == 0:
        raise EmptyCloud("cannot encode an empty cloud")
    bits = cfg.quantization_bits
    box = bounding_box(cloud)
    if not (box.extent > 0).any():
        # A single distinct point still needs a non-zero lattice.
        box = Aabb(box.min, Point3(box.min.x + 1.0, box.min.y + 1.0, box.min.z + 1.0))
    cube = cube_of(box)
    cells, digits = _morton_sort(_cells(cloud.xyz, cube, bits), bits)
    occ, parent_occ, level_sizes = occupancy_stream(digits)
    if cfg.context_mode is ContextMode.PARENT_CONTEXT:
        body = encode_symbols(
            occ - 1, parent_occ, alphabet=255, n_contexts=256, segments=level_sizes
        )
    else:
        body = encode_symbols(occ - 1, alphabet=255)
    head = _HEADER.pack(*cube.min, *cube.max, bits, cells.shape[0], int(cfg.context_mode))
    return CompressedFrame(
        CodecId.OCTREE, cloud.frame_id, cloud.timestamp_ns, len(cloud), head + body
    )


@dataclass(frozen=True)
class OctreePayload:
    cube: Aabb
    quantization_bits: int
    n_leaves: int
    context_mode: ContextMode
    body: bytes

    @classmethod
    def parse(cls, payload: bytes) -> OctreePayload:
        if len(payload) < _HEADER.size:
            raise CorruptPayload("octree payload shorter than its header")
        *box, bits, n_leaves, mode = _HEADER.unpack_from(payload)
        if not 1 <= bits <= MAX_BITS or mode not in (0, 1) or n_leaves < 1:
            raise CorruptPayload("octree header out of range")
        if not all(math.isfinite(v) for v in box):
            raise CorruptPayload("non-finite octree bounding cube")
        try:
            cube = Aabb(Point3(*box[:3]), Point3(*box[3:]))
        except ValueError:
            raise CorruptPayload("inverted octree bounding cube") from None
        if not float(cube.extent.max()) > 0:
            raise CorruptPayload("empty octree bounding cube")
        return cls(cube, bits, n_leaves, ContextMode(mode), payload[_HEADER.size:])


_CHILD_OFFSETS = np.array([[k & 1, (k >> 1) & 1, k >> 2] for k in range(8)], dtype=np.int64)


def decode_cells(p: OctreePayload) -> np.ndarray:
    """Rebuild the occupied lattice cells, in traversal order."""
    parent_ctx = p.context_mode is ContextMode.PARENT_CONTEXT
    dec = SymbolDecoder(p.body, alphabet=255, n_contexts=256 if parent_ctx else 1)
    nodes = np.zeros((1, 3), dtype=np.int64)
    ctx = np.zeros(1, dtype=np.int64)
    for _ in range(p.quantization_bits):
        occ = dec.decode(ctx if parent_ctx else None, count=nodes.shape[0], reseed=True) + 1
        mask = np.unpackbits(occ.astype(np.uint8)[:, None], axis=1, bitorder="little")
        parent, child = np.nonzero(mask)
        if parent.shape[0] > p.n_leaves:
            raise CorruptPayload("octree expands past the declared leaf count")
        nodes = nodes[parent] * 2 + _CHILD_OFFSETS[child]
        ctx = occ[parent]
    if nodes.shape[0] != p.n_leaves:
        raise CorruptPayload(f"decoded {nodes.shape[0]} leaves, header says {p.n_leaves}")
    dec.finish()
    return nodes


def decode(frame: CompressedFrame) -> PointCloud:
    if frame.codec_id != CodecId.OCTREE:
        raise WrongCodec(f"expected an octree frame, got {frame.codec_id.name}")
    p = OctreePayload.parse(frame.payload)
    if p.n_leaves > frame.n_points_original:
        raise CorruptPayload("more leaves than original points")
    cells = decode_cells(p)
    xyz = cell_centers(cells, p.cube, p.quantization_bits)
    return PointCloud(xyz, frame_id=frame.frame_id, timestamp_ns=frame.timestamp_ns)
