"""Distortion and rate metrics.

Nearest-neighbour queries go through :class:`SpatialIndex` (a k-d tree) by
default; every metric also accepts ``method="brute"``, an exact linear
scan used as an oracle and for tiny clouds.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from roadpcc.core import PointCloud, bounding_box, diagonal
from roadpcc.errors import (
    DegenerateReference,
    EmptyCloud,
    EmptyList,
    TooFewPoints,
    ZeroPoints,
)
from roadpcc.io import CompressedFrame

DEFAULT_NORMAL_K = 16
_BRUTE_CHUNK = 2048


@functools.total_ordering
class _Lossless:
    """PSNR of a perfect reconstruction; compares above every number."""

    _instance: _Lossless | None = None

    def __new__(cls) -> _Lossless:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "LOSSLESS"

    __str__ = __repr__

    def __eq__(self, other: object) -> bool:
        return other is self

    def __lt__(self, other: object) -> bool:
        if other is self:
            return False
        if isinstance(other, (int, float)):
            return False
        return NotImplemented

    def __gt__(self, other: object) -> bool:
        if other is self:
            return False
        if isinstance(other, (int, float)):
            return True
        return NotImplemented

    def __hash__(self) -> int:
        return hash("LOSSLESS")

    def __reduce__(self):
        return (_Lossless, ())


LOSSLESS = _Lossless()
Psnr = float | _Lossless


def is_lossless(value: object) -> bool:
    return value is LOSSLESS


# -- nearest neighbours ---------------------------------------------------


class SpatialIndex:
    """Exact nearest-neighbour index over a fixed point set."""

    def __init__(self, xyz: np.ndarray) -> None:
        pts = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise EmptyCloud("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, q: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``k`` nearest points (``eps = 0``)."""
        if k > len(self):
            raise TooFewPoints(f"k={k} exceeds the {len(self)} indexed points")
        d, i = self._tree.query(np.asarray(q, dtype=np.float64).reshape(-1, 3), k=k, workers=-1)
        return d, i


def brute_nn(q: np.ndarray, ref: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Linear-scan ``k`` nearest neighbours, same output shapes as
    :meth:`SpatialIndex.query`."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if k > ref.shape[0]:
        raise TooFewPoints(f"k={k} exceeds the {ref.shape[0]} reference points")
    dist = np.empty((q.shape[0], k))
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    for s in range(0, q.shape[0], _BRUTE_CHUNK):
        diff = q[s:s + _BRUTE_CHUNK, None, :] - ref[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        if k == 1:
            part = np.argmin(d2, axis=1)[:, None]
        else:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            order = np.argsort(np.take_along_axis(d2, part, axis=1), axis=1, kind="stable")
            part = np.take_along_axis(part, order, axis=1)
        idx[s:s + _BRUTE_CHUNK] = part
        dist[s:s + _BRUTE_CHUNK] = np.sqrt(np.take_along_axis(d2, part, axis=1))
    if k == 1:
        return dist[:, 0], idx[:, 0]
    return dist, idx


def _nn(q: np.ndarray, ref: np.ndarray, method: str, k: int = 1):
    if method == "kdtree":
        return SpatialIndex(ref).query(q, k)
    if method == "brute":
        return brute_nn(q, ref, k)
    raise ValueError(f"unknown nearest-neighbour method {method!r}")


def _require(*clouds: PointCloud) -> None:
    for c in clouds:
        if len(c) == 0:
            raise EmptyCloud("metric needs non-empty clouds")


# -- distortion -----------------------------------------------------------


@dataclass(frozen=True)
class Pairing:
    """Nearest neighbours of ``a`` in ``b`` and of ``b`` in ``a``."""

    d_ab: np.ndarray
    i_ab: np.ndarray
    d_ba: np.ndarray
    i_ba: np.ndarray

    @classmethod
    def of(cls, a: PointCloud, b: PointCloud, method: str = "kdtree") -> Pairing:
        _require(a, b)
        d_ab, i_ab = _nn(a.xyz, b.xyz, method)
        d_ba, i_ba = _nn(b.xyz, a.xyz, method)
        return cls(d_ab, i_ab, d_ba, i_ba)


def chamfer(
    a: PointCloud, b: PointCloud, *, method: str = "kdtree", pairing: Pairing | None = None
) -> float:
    """Symmetric Chamfer distance: half the sum of both directed mean
    nearest-neighbour distances."""
    pr = pairing or Pairing.of(a, b, method)
    return 0.5 * float(pr.d_ab.mean()) + 0.5 * float(pr.d_ba.mean())


def estimate_normals(
    cloud: PointCloud, k: int = DEFAULT_NORMAL_K, *, method: str = "kdtree"
) -> np.ndarray:
    """Unit normals from PCA of each point's ``k`` nearest neighbours
    (itself included), oriented toward the origin."""
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(cloud) < k:
        raise TooFewPoints(f"need at least k={k} points, got {len(cloud)}")
    _, nbr = _nn(cloud.xyz, cloud.xyz, method, k)
    pts = cloud.xyz[nbr]
    centred = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", normals, -cloud.xyz) < 0
    normals[flip] *= -1
    return normals


def directed_mse(
    a: PointCloud, b: PointCloud, kind: str = "d1", *, normals: np.ndarray | None = None,
    method: str = "kdtree", pairing: Pairing | None = None,
) -> tuple[float, float]:
    """Mean squared error of ``a`` against ``b`` and of ``b`` against ``a``.

    For ``d2`` the residual to each nearest neighbour is projected on the
    normal of whichever point of the pair belongs to ``a`` (the reference).
    """
    pr = pairing or Pairing.of(a, b, method)
    dab, iab, dba, iba = pr.d_ab, pr.i_ab, pr.d_ba, pr.i_ba
    if kind == "d1":
        return float(np.mean(dab**2)), float(np.mean(dba**2))
    if kind != "d2":
        raise ValueError(f"kind must be 'd1' or 'd2', got {kind!r}")
    if normals is None:
        normals = estimate_normals(a, min(DEFAULT_NORMAL_K, len(a)), method=method)
    ea = np.einsum("ij,ij->i", a.xyz - b.xyz[iab], normals)
    eb = np.einsum("ij,ij->i", b.xyz - a.xyz[iba], normals[iba])
    return float(np.mean(ea**2)), float(np.mean(eb**2))


def psnr_from_mse(peak: float, mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def psnr(
    a: PointCloud, b: PointCloud, kind: str = "d1", *, normals: np.ndarray | None = None,
    method: str = "kdtree", pairing: Pairing | None = None,
) -> Psnr:
    """Symmetric PSNR in dB: the larger of the two directed values.

    The peak is the bounding-box diagonal of ``a``, the original cloud.
    Returns :data:`LOSSLESS` when the pooled value is unbounded.
    """
    _require(a, b)
    peak = diagonal(bounding_box(a))
    if peak == 0:
        raise DegenerateReference("reference cloud has a zero-diagonal bounding box")
    if kind == "d2" and len(a) < 3:
        raise TooFewPoints("d2 needs at least 3 reference points for normals")
    mab, mba = directed_mse(a, b, kind, normals=normals, method=method, pairing=pairing)
    value = max(psnr_from_mse(peak, mab), psnr_from_mse(peak, mba))
    return LOSSLESS if math.isinf(value) else value


# -- rate -----------------------------------------------------------------


def bpp(frame: CompressedFrame) -> float:
    """Payload bits per original point (container header excluded)."""
    if frame.n_points_original <= 0:
        raise ZeroPoints("frame records zero original points")
    return 8.0 * frame.payload_bytes / frame.n_points_original


def raw_bytes(cloud: PointCloud) -> int:
    """Size of the cloud as packed float32 fields (binary PCD body)."""
    return len(cloud) * 4 * (3 if cloud.intensity is None else 4)


def compression_ratio(raw: int, frame: CompressedFrame) -> float:
    if raw <= 0:
        raise ValueError("raw size must be positive")
    return raw / frame.payload_bytes


def bitrate(frames: list[CompressedFrame], fps: float) -> float:
    """Mean frame size in bits times the frame rate (bits per second)."""
    if not frames:
        raise EmptyList("bitrate of zero frames")
    if not fps > 0:
        raise ValueError("fps must be positive")
    total = sum(f.payload_bytes for f in frames)
    return 8.0 * total * fps / len(frames)


# -- reports --------------------------------------------------------------


def format_metric(value: object, decimals: int = 6) -> str:
    if value is None:
        return "NA"
    if value is LOSSLESS:
        return "LOSSLESS"
    return f"{float(value):.{decimals}f}"


def parse_metric(text: str) -> object:
    if text == "NA":
        return None
    if text == "LOSSLESS":
        return LOSSLESS
    return float(text)


@dataclass(frozen=True)
class MetricReport:
    """Quality, rate and speed of one reconstruction.

    Field order (CSV columns and text lines): psnr_d1_db, psnr_d2_db,
    chamfer_m, bpp, compression_ratio, encode_ms, decode_ms. Rate and
    timing fields are ``None`` (printed ``NA``) when no compressed frame
    was involved.
    """

    psnr_d1_db: Psnr
    psnr_d2_db: Psnr
    chamfer_m: float
    bpp: float | None = None
    compression_ratio: float | None = None
    encode_ms: float | None = None
    decode_ms: float | None = None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[object]:
        return [getattr(self, n) for n in self.field_names()]

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.field_names())

    def to_csv_row(self, decimals: int = 6) -> str:
        return ",".join(format_metric(v, decimals) for v in self.values())

    def to_text(self, decimals: int = 6) -> str:
        return "".join(
            f"{n} = {format_metric(v, decimals)}\n" for n, v in zip(self.field_names(), self.values())
        )

    @classmethod
    def from_text(cls, text: str) -> MetricReport:
        from roadpcc.core import parse_key_values

        kv = parse_key_values(text)
        return cls(**{n: parse_metric(kv[n]) for n in cls.field_names()})


def evaluate(
    original: PointCloud,
    reconstructed: PointCloud,
    frame: CompressedFrame | None = None,
    *,
    encode_ms: float | None = None,
    decode_ms: float | None = None,
    method: str = "kdtree",
) -> MetricReport:
    """Compute every metric of a reconstruction against its original."""
    _require(original, reconstructed)
    normals = None
    if len(original) >= 3:
        normals = estimate_normals(original, min(DEFAULT_NORMAL_K, len(original)), method=method)
    pr = Pairing.of(original, reconstructed, method)
    d1 = psnr(original, reconstructed, "d1", pairing=pr)
    d2 = psnr(original, reconstructed, "d2", normals=normals, pairing=pr)
    ch = chamfer(original, reconstructed, pairing=pr)
    rate = ratio = None
    if frame is not None:
        rate = bpp(frame)
        ratio = compression_ratio(raw_bytes(original), frame)
    return MetricReport(d1, d2, ch, rate, ratio, encode_ms, decode_ms)
