from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roadpcc.core import PointCloud, bounding_box
from roadpcc.errors import CorruptPayload, CrcMismatch, DegenerateBox, EmptyCloud, WrongCodec
from roadpcc.io import CodecId, CompressedFrame, pack_frame, unpack_frame
from roadpcc.metrics import chamfer, psnr
from roadpcc.octree import (
    ContextMode,
    OctreeConfig,
    OctreePayload,
    _morton_sort,
    cube_of,
    decode,
    encode,
    half_cell_diagonal,
    occupancy_stream,
    quantize,
)

CORNERS = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)


def occupancy_histogram(cells: np.ndarray, bits: int) -> Counter:
    """Occupancy bytes of every internal node, built level by level from
    the leaf cells (order-free, so only the multiset is reproduced)."""
    hist: Counter = Counter()
    cells = np.unique(cells, axis=0)
    for level in range(bits):
        shift = bits - level - 1
        children = np.unique(cells >> shift, axis=0)
        parents = children >> 1
        bit = (children[:, 0] & 1) | ((children[:, 1] & 1) << 1) | ((children[:, 2] & 1) << 2)
        occ: dict[tuple, int] = {}
        for p, b in zip(map(tuple, parents), bit):
            occ[p] = occ.get(p, 0) | (1 << int(b))
        hist.update(occ.values())
    return hist


def entropy_bytes(hist: Counter) -> float:
    n = sum(hist.values())
    return -sum(c * math.log2(c / n) for c in hist.values()) / 8


def test_config_bounds():
    with pytest.raises(ValueError):
        OctreeConfig(0)
    with pytest.raises(ValueError):
        OctreeConfig(31)
    assert OctreeConfig(30).depth == 30
    assert OctreeConfig(12, "parent_context").context_mode is ContextMode.PARENT_CONTEXT


def test_unit_cube_corners_full_occupancy():
    cube, cells = quantize(PointCloud(CORNERS), 1)
    assert len({tuple(c) for c in cells}) == 8
    _, digits = _morton_sort(cells, 1)
    occ, _, sizes = occupancy_stream(digits)
    assert occ.tolist() == [0xFF] and sizes == [1]


def test_same_cell_points_merge():
    cloud = PointCloud([[0.0, 0, 0], [0.01, 0.01, 0.01], [10, 10, 10]])
    _, cells = quantize(cloud, 4)
    assert len(cells) == 2
    frame = encode(cloud, OctreeConfig(4))
    assert frame.n_points_original == 3
    assert len(decode(frame)) == 2


def test_quantization_error_bound_100m_box():
    rng = np.random.default_rng(100)
    xyz = rng.uniform(0, 100, size=(10_000, 3))
    xyz[0], xyz[1] = 0, 100  # pin the box to exactly 100 m
    cloud = PointCloud(xyz)
    cube, _ = quantize(cloud, 16)
    assert float(cube.extent.max()) == 100.0
    size = 100 / 2**16
    # oracle: per-point distance to its own cell centre
    idx = np.minimum(np.floor(xyz / size), 2**16 - 1)
    err = np.linalg.norm(xyz - (idx + 0.5) * size, axis=1).max()
    bound = size * math.sqrt(3) / 2
    assert bound == pytest.approx(1.3215e-3, rel=1e-4)
    assert err <= bound + 1e-12
    rec = decode(encode(cloud, OctreeConfig(16)))
    d = chamfer(cloud, rec)
    assert d <= bound + 1e-12


def test_single_point_round_trip():
    cloud = PointCloud([[3.2, -1.5, 7.25]])
    frame = encode(cloud, OctreeConfig(10))
    rec = decode(frame)
    assert len(rec) == 1
    p = OctreePayload.parse(frame.payload)
    assert np.linalg.norm(rec.xyz[0] - cloud.xyz[0]) <= half_cell_diagonal(p.cube, 10)
    assert p.cube.contains(rec.xyz).all()


def test_quantize_errors():
    with pytest.raises(EmptyCloud):
        quantize(PointCloud(np.zeros((0, 3))), 8)
    with pytest.raises(DegenerateBox):
        quantize(PointCloud([[1, 1, 1], [1, 1, 1]]), 8)
    with pytest.raises(EmptyCloud):
        encode(PointCloud(np.zeros((0, 3))))


def test_order0_within_five_percent_of_shannon(sim_frames):
    cloud = sim_frames[0]
    cube, cells = quantize(cloud, 16)
    hist = occupancy_histogram(cells, 16)
    _, digits = _morton_sort(cells, 16)
    occ, _, _ = occupancy_stream(digits)
    assert Counter(occ.tolist()) == hist
    bound = entropy_bytes(hist)
    body = len(OctreePayload.parse(encode(cloud, OctreeConfig(16)).payload).body)
    print(f"octree bits=16: body {body} B, order-0 bound {bound:.0f} B, ratio {body / bound:.3f}")
    assert body <= 1.05 * bound


def test_decoded_count_and_containment(small_frames):
    for bits in (6, 12):
        for mode in ContextMode:
            cloud = small_frames[0]
            frame = encode(cloud, OctreeConfig(bits, mode))
            rec = decode(frame)
            cube, cells = quantize(cloud, bits)
            assert len(rec) == len(cells) <= frame.n_points_original
            assert OctreePayload.parse(frame.payload).cube.contains(rec.xyz).all()
            size = float(cube.extent.max()) / 2**bits
            back = np.floor((rec.xyz - np.asarray(cube.min)) / size).astype(int)
            assert {tuple(c) for c in cells} == {tuple(c) for c in back}


clouds = arrays(
    np.float64, st.tuples(st.integers(2, 300), st.just(3)),
    elements=st.floats(-50, 50, allow_nan=False),
)


@settings(max_examples=40)
@given(clouds, st.integers(1, 18), st.sampled_from(list(ContextMode)))
def test_chamfer_within_half_cell_diagonal(xyz, bits, mode):
    cloud = PointCloud(xyz)
    if not (bounding_box(cloud).extent > 0).any():
        return
    rec = decode(encode(cloud, OctreeConfig(bits, mode)))
    bound = half_cell_diagonal(cube_of(bounding_box(cloud)), bits)
    assert chamfer(cloud, rec, method="brute") <= bound * (1 + 1e-9)


def test_tampered_payload_never_crashes(small_frames):
    frame = encode(small_frames[1], OctreeConfig(10))
    packed = bytearray(pack_frame(frame))
    rng = np.random.default_rng(5)
    for i in rng.integers(32, len(packed) - 4, 40):
        bad = bytearray(packed)
        bad[i] ^= 0x5A
        with pytest.raises(CrcMismatch):
            unpack_frame(bytes(bad))
    # payload modified behind a recomputed CRC
    for i in list(range(0, 60)) + rng.integers(60, len(frame.payload), 60).tolist():
        payload = bytearray(frame.payload)
        payload[i] ^= 0xA5
        forged = CompressedFrame(CodecId.OCTREE, 0, 0, frame.n_points_original, bytes(payload))
        try:
            decode(forged)
        except CorruptPayload:
            pass
    with pytest.raises(CorruptPayload):
        decode(CompressedFrame(CodecId.OCTREE, 0, 0, 10, frame.payload[:20]))
    with pytest.raises(CorruptPayload):
        decode(CompressedFrame(CodecId.OCTREE, 0, 0, frame.n_points_original, frame.payload[:-3]))


def test_wrong_codec():
    with pytest.raises(WrongCodec):
        decode(CompressedFrame(CodecId.VOXEL, 0, 0, 1, b"x"))


def test_rate_monotone_and_psnr_bound(sim_frames):
    cloud = sim_frames[2]
    sizes = []
    for bits in (8, 10, 12, 14, 16):
        frame = encode(cloud, OctreeConfig(bits))
        sizes.append(len(frame.payload))
        rec = decode(frame)
        cube = OctreePayload.parse(frame.payload).cube
        d_half = half_cell_diagonal(cube, bits)
        peak = float(np.linalg.norm(bounding_box(cloud).extent))
        assert psnr(cloud, rec, "d1") >= 10 * math.log10(peak**2 / d_half**2)
    assert sizes == sorted(sizes)


def test_parent_context_not_larger(small_frames, sim_frames):
    for cloud in (*small_frames, sim_frames[0]):
        for bits in (10, 16):
            o0 = len(encode(cloud, OctreeConfig(bits, "order0")).payload)
            pc = len(encode(cloud, OctreeConfig(bits, "parent_context")).payload)
            assert pc <= o0 + 64
