from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roadpcc.core import PointCloud
from roadpcc.errors import CorruptPayload, EmptyCloud, NonPositiveVoxelSize, WrongCodec
from roadpcc.io import CodecId, CompressedFrame
from roadpcc.metrics import brute_nn, chamfer
from roadpcc.octree import OctreeConfig
from roadpcc.octree import encode as octree_encode
from roadpcc.voxel import (
    Assignment,
    VoxelCodecConfig,
    VoxelGrid,
    decode,
    decode_cloud,
    devoxelize,
    encode,
    encode_cloud,
    occupancy_runs,
    quantize_grid,
    runs_to_linear,
    varint_decode,
    varint_encode,
    voxelize,
)

HEADER_BYTES = 50
SECTION_BYTES = 8

TWO = PointCloud([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]])

clouds = arrays(
    np.float64, st.tuples(st.integers(1, 200), st.just(3)),
    elements=st.floats(-20, 20, allow_nan=False),
)


def test_density_single_voxel():
    g = voxelize(TWO, 1.0, "density")
    assert g.n_occupied == 1
    assert g.counts.tolist() == [2]
    assert g.cells.tolist() == [[0, 0, 0]]


def test_half_size_two_voxels():
    assert voxelize(TWO, 0.5, "binary").n_occupied == 2


def test_distinct_floor_index_oracle(sim_frames):
    xyz = sim_frames[0].xyz[::13][:10_000]
    cloud = PointCloud(xyz)
    for v in (0.2, 1.0):
        lo = xyz.min(axis=0)
        oracle = {tuple(int(math.floor((p[a] - lo[a]) / v)) for a in range(3)) for p in xyz}
        assert voxelize(cloud, v).n_occupied == len(oracle)


def test_single_voxel_center():
    g = VoxelGrid((0, 0, 0), 1.0, (1, 1, 1), "binary", [[0, 0, 0]])
    np.testing.assert_array_equal(devoxelize(g).xyz, [[0.5, 0.5, 0.5]])


def test_averaged_points_are_centroids():
    cloud = PointCloud([[0.1, 0.2, 0.3], [0.3, 0.4, 0.5], [5, 5, 5]], [0.2, 0.4, 1.0])
    g = voxelize(cloud, 1.0, "averaged")
    rec = devoxelize(g)
    np.testing.assert_array_equal(rec.xyz, g.centroids)
    np.testing.assert_allclose(rec.xyz[0], [0.2, 0.3, 0.4], atol=1e-15)
    np.testing.assert_allclose(rec.intensity, [0.3, 1.0], atol=1e-15)


def test_errors():
    with pytest.raises(EmptyCloud):
        voxelize(PointCloud(np.zeros((0, 3))), 1.0)
    for v in (0.0, -1.0, float("nan")):
        with pytest.raises(NonPositiveVoxelSize):
            voxelize(TWO, v)
    with pytest.raises(NonPositiveVoxelSize):
        VoxelCodecConfig(voxel_size=0)


@settings(max_examples=40)
@given(clouds, st.sampled_from([0.05, 0.3, 1.0, 4.0]))
def test_binary_error_bound_every_point(xyz, v):
    cloud = PointCloud(xyz)
    rec = devoxelize(voxelize(cloud, v))
    d, _ = brute_nn(cloud.xyz, rec.xyz)
    assert d.max() <= v * math.sqrt(3) / 2 * (1 + 1e-12)
    assert chamfer(cloud, rec, method="brute") <= v * math.sqrt(3) / 2 * (1 + 1e-12)


@settings(max_examples=30)
@given(clouds, st.sampled_from(list(Assignment)), st.randoms(use_true_random=False))
def test_permutation_invariance(xyz, mode, rnd):
    inten = (np.abs(xyz[:, 0]) % 1.0)
    perm = list(range(len(xyz)))
    rnd.shuffle(perm)
    a = voxelize(PointCloud(xyz, inten), 0.7, mode)
    b = voxelize(PointCloud(xyz[perm], inten[perm]), 0.7, mode)
    assert np.array_equal(a.cells, b.cells)
    if mode is Assignment.AVERAGED:
        np.testing.assert_allclose(a.centroids, b.centroids, rtol=0, atol=1e-9)
        np.testing.assert_allclose(a.intensity, b.intensity, rtol=0, atol=1e-9)
    assert a == b


@settings(max_examples=40)
@given(clouds, st.sampled_from([0.1, 0.5, 2.0, 8.0]))
def test_halving_never_decreases_occupancy(xyz, v):
    cloud = PointCloud(xyz)
    assert voxelize(cloud, v / 2).n_occupied >= voxelize(cloud, v).n_occupied


@settings(max_examples=40)
@given(clouds, st.sampled_from(list(Assignment)), st.sampled_from([0.2, 1.0, 3.0]))
def test_round_trip_all_modes(xyz, mode, v):
    inten = np.linspace(0, 1, len(xyz))
    g = voxelize(PointCloud(xyz, inten), v, mode)
    back = decode(encode(g))
    assert back == quantize_grid(g)
    if mode is not Assignment.AVERAGED:
        assert back == g
    else:
        assert np.abs(back.centroids - g.centroids).max() <= v / 2**17 + 1e-12


def test_round_trip_simulated_frame(small_frames):
    for mode in Assignment:
        cfg = VoxelCodecConfig(0.2, mode)
        frame = encode_cloud(small_frames[0], cfg)
        assert frame.n_points_original == len(small_frames[0])
        g = voxelize(small_frames[0], 0.2, mode)
        assert decode(frame) == quantize_grid(g)
        assert len(decode_cloud(frame)) == g.n_occupied


def test_full_block_collapses_to_one_run():
    centres = np.array([[x, y, z] for z in range(4) for y in range(4) for x in range(4)]) + 0.5
    g = voxelize(PointCloud(centres), 1.0)
    assert g.dims == (4, 4, 4) and g.n_occupied == 64
    assert occupancy_runs(g.linear_index()).tolist() == [0, 64]
    payload = encode(g).payload
    body = len(payload) - HEADER_BYTES - SECTION_BYTES
    assert body < 64 // 8


def test_octree_frame_is_wrong_codec():
    frame = octree_encode(TWO, OctreeConfig(4))
    with pytest.raises(WrongCodec):
        decode(frame)


def test_corrupt_payloads():
    frame = encode(voxelize(TWO, 0.5, "density"))
    with pytest.raises(CorruptPayload):
        decode(CompressedFrame(CodecId.VOXEL, 0, 0, 2, frame.payload[:30]))
    with pytest.raises(CorruptPayload):
        decode(CompressedFrame(CodecId.VOXEL, 0, 0, 2, frame.payload[:-1]))
    rng = np.random.default_rng(2)
    for i in rng.integers(0, len(frame.payload), 60):
        p = bytearray(frame.payload)
        p[i] ^= 0xFF
        try:
            decode(CompressedFrame(CodecId.VOXEL, 0, 0, 2, bytes(p)))
        except (CorruptPayload, NonPositiveVoxelSize):
            pass


@given(st.lists(st.integers(0, 2**63 - 1), max_size=50))
def test_varint_round_trip(values):
    enc = varint_encode(np.array(values, dtype=np.uint64))
    assert varint_decode(enc).tolist() == values


def test_varint_known_bytes():
    assert varint_encode(np.array([0, 127, 128, 300])).tolist() == [0, 127, 0x80, 0x01, 0xAC, 0x02]


@given(st.sets(st.integers(0, 999), max_size=200))
def test_runs_round_trip(cells):
    lin = np.array(sorted(cells), dtype=np.int64)
    runs = occupancy_runs(lin)
    assert runs.sum() == (lin[-1] + 1 if lin.size else 0)
    np.testing.assert_array_equal(runs_to_linear(runs, 1000), lin)


def test_monotone_rate(small_frames):
    sizes = [len(encode_cloud(small_frames[1], VoxelCodecConfig(v)).payload) for v in (1.0, 0.5, 0.2)]
    assert sizes == sorted(sizes)
