"""PCD reading/writing and the ``PC3D`` compressed-frame container.

Container layout (all integers little-endian, 32-byte header)::

    offset size field
    0      4    magic b"PC3D"
    4      1    version (1)
    5      1    codec_id (1 octree, 2 range, 3 voxel)
    6      2    reserved, 0
    8      8    frame_id
    16     8    timestamp_ns
    24     4    n_points_original
    28     4    payload_len
    32     n    payload
    32+n   4    crc32 (IEEE) of payload

A header with ``payload_len == 0`` is never a valid frame; the streaming
protocol uses it as its terminator.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from roadpcc.core import PointCloud
from roadpcc.errors import (
    BadMagic,
    CountMismatch,
    CrcMismatch,
    EmptyCloud,
    InvalidFrame,
    MalformedHeader,
    TruncatedFrame,
    UnsupportedField,
)

MAGIC = b"PC3D"
VERSION = 1
HEADER = struct.Struct("<4sBBHQQII")
HEADER_SIZE = HEADER.size  # 32
CRC = struct.Struct("<I")
FILE_SUFFIX = ".pc3"


class CodecId(enum.IntEnum):
    OCTREE = 1
    RANGE = 2
    VOXEL = 3


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class CompressedFrame:
    codec_id: CodecId
    frame_id: int
    timestamp_ns: int
    n_points_original: int
    payload: bytes
    crc32: int | None = None

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "codec_id", CodecId(self.codec_id))
        except ValueError:
            raise InvalidFrame(f"unknown codec id {self.codec_id}") from None
        if not self.payload:
            raise InvalidFrame("payload must be non-empty")
        object.__setattr__(self, "payload", bytes(self.payload))
        if not (0 <= self.frame_id < 2**64 and 0 <= self.timestamp_ns < 2**64):
            raise InvalidFrame("frame_id/timestamp_ns out of u64 range")
        if not 0 <= self.n_points_original < 2**32:
            raise InvalidFrame("n_points_original out of u32 range")
        if len(self.payload) >= 2**32:
            raise InvalidFrame("payload too large for container")
        actual = crc32(self.payload)
        if self.crc32 is None:
            object.__setattr__(self, "crc32", actual)
        elif self.crc32 != actual:
            raise CrcMismatch(f"crc {self.crc32:#010x} does not match payload ({actual:#010x})")

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class FrameHeader:
    codec_id: int
    frame_id: int
    timestamp_ns: int
    n_points_original: int
    payload_len: int

    @property
    def is_terminator(self) -> bool:
        return self.payload_len == 0


def pack_header(h: FrameHeader) -> bytes:
    return HEADER.pack(
        MAGIC, VERSION, h.codec_id, 0, h.frame_id, h.timestamp_ns, h.n_points_original, h.payload_len
    )


def unpack_header(data: bytes) -> FrameHeader:
    if len(data) < 4 or data[:4] != MAGIC[: len(data[:4])]:
        raise BadMagic(f"bad frame magic {bytes(data[:4])!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedFrame(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, codec, _reserved, fid, ts, npts, plen = HEADER.unpack_from(data)
    if version != VERSION:
        raise InvalidFrame(f"unsupported container version {version}")
    return FrameHeader(codec, fid, ts, npts, plen)


def pack_frame(frame: CompressedFrame) -> bytes:
    head = pack_header(
        FrameHeader(
            int(frame.codec_id),
            frame.frame_id,
            frame.timestamp_ns,
            frame.n_points_original,
            len(frame.payload),
        )
    )
    return head + frame.payload + CRC.pack(frame.crc32)


def unpack_frame(data: bytes) -> CompressedFrame:
    h = unpack_header(data)
    if h.is_terminator:
        raise InvalidFrame("zero-length payload (stream terminator), not a frame")
    end = HEADER_SIZE + h.payload_len
    if len(data) < end + CRC.size:
        raise TruncatedFrame(f"frame needs {end + CRC.size} bytes, got {len(data)}")
    if len(data) > end + CRC.size:
        raise InvalidFrame(f"{len(data) - end - CRC.size} trailing bytes after frame")
    payload = bytes(data[HEADER_SIZE:end])
    (stored,) = CRC.unpack_from(data, end)
    return CompressedFrame(h.codec_id, h.frame_id, h.timestamp_ns, h.n_points_original, payload, stored)


# -- PCD ------------------------------------------------------------------

_ALLOWED_FIELDS = ("x", "y", "z", "intensity")


def write_pcd(cloud: PointCloud, mode: str = "binary") -> bytes:
    """Encode ``cloud`` as PCD v0.7 with float32 fields.

    Frame id and timestamp travel in a comment line so a round trip through
    :func:`read_pcd` preserves them.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot write an empty cloud")
    if mode not in ("ascii", "binary"):
        raise ValueError(f"mode must be 'ascii' or 'binary', got {mode!r}")
    fields = ["x", "y", "z"] + (["intensity"] if cloud.intensity is not None else [])
    nf = len(fields)
    n = len(cloud)
    data = np.empty((n, nf), dtype="<f4")
    data[:, :3] = cloud.xyz
    if cloud.intensity is not None:
        data[:, 3] = cloud.intensity
    header = "\n".join(
        [
            "# .PCD v0.7 - Point Cloud Data file format",
            f"# roadpcc frame_id={cloud.frame_id} timestamp_ns={cloud.timestamp_ns}",
            "VERSION 0.7",
            "FIELDS " + " ".join(fields),
            "SIZE " + " ".join(["4"] * nf),
            "TYPE " + " ".join(["F"] * nf),
            "COUNT " + " ".join(["1"] * nf),
            f"WIDTH {n}",
            "HEIGHT 1",
            "VIEWPOINT 0 0 0 1 0 0 0",
            f"POINTS {n}",
            f"DATA {mode}",
        ]
    ) + "\n"
    if mode == "binary":
        return header.encode("ascii") + data.tobytes()
    rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in data)
    return (header + rows + "\n").encode("ascii")


def read_pcd(data: bytes) -> PointCloud:
    pos = 0
    header: dict[str, list[str]] = {}
    meta: dict[str, int] = {}
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise MalformedHeader("header ended before DATA line")
        try:
            line = data[pos:nl].decode("ascii").strip()
        except UnicodeDecodeError:
            raise MalformedHeader("non-ASCII bytes in PCD header") from None
        pos = nl + 1
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# roadpcc "):
                for tok in line[len("# roadpcc "):].split():
                    k, _, v = tok.partition("=")
                    if v.isdigit():
                        meta[k] = int(v)
            continue
        key, *values = line.split()
        header[key.upper()] = values
        if key.upper() == "DATA":
            break

    for key in ("FIELDS", "POINTS", "DATA"):
        if key not in header:
            raise MalformedHeader(f"missing {key} line")
    fields = header["FIELDS"]
    for f in fields:
        if f not in _ALLOWED_FIELDS:
            raise UnsupportedField(f"unsupported PCD field {f!r}")
    if len(set(fields)) != len(fields) or not {"x", "y", "z"} <= set(fields):
        raise MalformedHeader(f"FIELDS must contain x y z once each, got {fields}")
    nf = len(fields)
    for key, expected in (("SIZE", "4"), ("TYPE", "F"), ("COUNT", "1")):
        vals = header.get(key, [expected] * nf)
        if len(vals) != nf:
            raise MalformedHeader(f"{key} has {len(vals)} entries for {nf} fields")
        if any(v.upper() != expected for v in vals):
            raise UnsupportedField(f"only {key} {expected} is supported, got {vals}")
    try:
        (npts,) = (int(v) for v in header["POINTS"])
    except ValueError:
        raise MalformedHeader(f"bad POINTS line {header['POINTS']}") from None
    if npts < 0:
        raise MalformedHeader("negative POINTS")
    if "WIDTH" in header and "HEIGHT" in header:
        try:
            w, h = int(header["WIDTH"][0]), int(header["HEIGHT"][0])
        except (ValueError, IndexError):
            raise MalformedHeader("bad WIDTH/HEIGHT") from None
        if w * h != npts:
            raise MalformedHeader(f"WIDTH*HEIGHT={w * h} disagrees with POINTS={npts}")
    mode = header["DATA"][0].lower() if header["DATA"] else ""

    body = data[pos:]
    if mode == "binary":
        need = npts * nf * 4
        if len(body) != need:
            raise CountMismatch(
                f"POINTS {npts} needs {need} data bytes, found {len(body)}"
            )
        arr = np.frombuffer(body, dtype="<f4").reshape(npts, nf)
    elif mode == "ascii":
        rows = [r.split() for r in body.decode("ascii", errors="replace").splitlines() if r.strip()]
        if len(rows) != npts:
            raise CountMismatch(f"POINTS {npts} but {len(rows)} data rows")
        try:
            arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(npts, -1)
        except ValueError as exc:
            raise MalformedHeader(f"bad ASCII data row: {exc}") from None
        if arr.shape[1] != nf:
            raise CountMismatch(f"rows have {arr.shape[1]} values, expected {nf}")
    else:
        raise UnsupportedField(f"unsupported DATA mode {mode!r}")

    col = {f: i for i, f in enumerate(fields)}
    xyz = arr[:, [col["x"], col["y"], col["z"]]].astype(np.float64)
    inten = arr[:, col["intensity"]].astype(np.float64) if "intensity" in col else None
    return PointCloud(
        xyz, inten, frame_id=meta.get("frame_id", 0), timestamp_ns=meta.get("timestamp_ns", 0)
    )
