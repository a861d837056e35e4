"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line (shown in the terminal summary) before
asserting, so a failing criterion is reported rather than hidden.
"""
from __future__ import annotations

import math
import threading
import time

import numpy as np
import pytest

from roadpcc import codecs, metrics
from roadpcc.bench import CSV_COLUMNS, TIMING_COLUMNS, RDCurve, RDPoint, auc, auc_xy
from roadpcc.cli import main
from roadpcc.core import PointCloud, bounding_box, default_sensor
from roadpcc.entropy import decode_symbols, encode_symbols, shannon_bits
from roadpcc.io import CodecId, CompressedFrame
from roadpcc.metrics import SpatialIndex, bpp, chamfer, psnr
from roadpcc.octree import OctreeConfig, OctreePayload, half_cell_diagonal
from roadpcc.rangeimage import RangeCodecConfig, RangeMode, project
from roadpcc.scenegen import simulate_frames
from roadpcc.stream import serve, receive
from roadpcc.voxel import devoxelize, voxelize

from conftest import SIM_SEED

BITS = (8, 10, 12, 14, 16)


# -- independent oracles ------------------------------------------------------


def nn_oracle(q: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest neighbour, one query row at a time."""
    d = np.empty(len(q))
    idx = np.empty(len(q), dtype=np.int64)
    for i, p in enumerate(q):
        dist = np.sqrt(((ref - p) ** 2).sum(axis=1))
        idx[i] = int(np.argmin(dist))
        d[i] = dist[idx[i]]
    return d, idx


def normals_oracle(xyz: np.ndarray, k: int) -> np.ndarray:
    """Smallest right singular vector of each point's k-neighbourhood."""
    out = np.empty_like(xyz)
    for i, p in enumerate(xyz):
        nbr = xyz[np.argsort(((xyz - p) ** 2).sum(axis=1), kind="stable")[:k]]
        out[i] = np.linalg.svd(nbr - nbr.mean(axis=0))[2][-1]
    return out


def metric_oracle(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    dab, iab = nn_oracle(a, b)
    dba, iba = nn_oracle(b, a)
    cd = 0.5 * dab.mean() + 0.5 * dba.mean()
    peak = float(np.linalg.norm(a.max(axis=0) - a.min(axis=0)))
    n = normals_oracle(a, min(16, len(a)))
    ea = ((a - b[iab]) * n).sum(axis=1)
    eb = ((b - a[iba]) * n[iba]).sum(axis=1)

    def pooled(m1: float, m2: float) -> float:
        return max(10 * math.log10(peak**2 / m1), 10 * math.log10(peak**2 / m2))

    return cd, pooled((dab**2).mean(), (dba**2).mean()), pooled((ea**2).mean(), (eb**2).mean())


def trapezoid(xy) -> float:
    area = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(xy, xy[1:]))
    return area / (xy[-1][0] - xy[0][0])


# -- shared sweeps --------------------------------------------------------------


@pytest.fixture(scope="module")
def octree_sweep(sim_frames):
    """Per frame and bit depth: payload size, worst decoded-point error,
    half cell diagonal, PSNR d1 and its analytic floor."""
    rows = []
    for fi, cloud in enumerate(sim_frames):
        index = SpatialIndex(cloud.xyz)
        peak = float(np.linalg.norm(bounding_box(cloud).extent))
        for bits in BITS:
            frame = codecs.encode(cloud, OctreeConfig(bits))
            rec = codecs.decode(frame)
            d_half = half_cell_diagonal(OctreePayload.parse(frame.payload).cube, bits)
            worst = float(index.query(rec.xyz)[0].max())
            rows.append({
                "frame": fi, "bits": bits, "size": len(frame.payload), "worst": worst,
                "d_half": d_half, "psnr": psnr(cloud, rec, "d1"),
                "floor": 10 * math.log10(peak**2 / d_half**2),
            })
    return rows


# -- criteria -------------------------------------------------------------------


def test_c01_metric_oracle_equivalence(verdict):
    rel = 1e-9
    worst = 0.0
    elapsed = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(20, 501, 2)
        a = rng.uniform(-20, 20, (n, 3)) + rng.uniform(-50, 50, 3)
        pick = rng.choice(n, size=min(n, m), replace=False)
        b = a[pick] + rng.normal(0, 0.05, (len(pick), 3))
        if m > n:
            b = np.vstack([b, rng.uniform(-25, 25, (m - n, 3))])
        t0 = time.perf_counter()
        ca, cb = PointCloud(a), PointCloud(b)
        got = (chamfer(ca, cb), psnr(ca, cb, "d1"), psnr(ca, cb, "d2"))
        elapsed += time.perf_counter() - t0
        for g, o in zip(got, metric_oracle(a, b)):
            worst = max(worst, abs(g - o) / abs(o))
    ok = worst <= rel and elapsed < 10
    verdict(1, "metric oracle equivalence",
            ok, f"max relative error {worst:.2e} (<= 1e-9), toolkit time {elapsed:.2f} s (< 10 s)")
    assert ok


def test_c02_octree_distortion_bound(verdict, octree_sweep):
    bad = [r for r in octree_sweep if r["worst"] > r["d_half"] or r["psnr"] < r["floor"]]
    margin = min(r["psnr"] - r["floor"] for r in octree_sweep)
    ok = not bad
    verdict(2, "octree distortion bound", ok,
            f"{len(octree_sweep)} frame/bit cases, {len(bad)} violations, "
            f"smallest PSNR margin over the floor {margin:.3f} dB")
    assert ok, bad


def test_c03_octree_rate_monotone(verdict, octree_sweep):
    by_frame: dict[int, list[int]] = {}
    for r in octree_sweep:
        by_frame.setdefault(r["frame"], []).append(r["size"])
    bad = [f for f, s in by_frame.items() if any(x > y for x, y in zip(s, s[1:]))]
    ok = not bad
    sizes = " ".join(str(s) for s in by_frame[0])
    verdict(3, "octree rate monotonicity", ok,
            f"{len(by_frame)} frames, non-monotone: {bad or 'none'}; frame 0 sizes {sizes}")
    assert ok


def test_c04_operating_point(verdict, sim_frames):
    t0 = time.perf_counter()
    anchor = bpp(CompressedFrame(CodecId.OCTREE, 0, 0, 131_072, b"\0" * (105 * 1024)))
    anchor_ok = abs(anchor - 6.5625) <= 1e-12
    cfg = RangeCodecConfig(RangeMode.QUANTIZED, 14, 0)
    reports = [metrics.evaluate(f, codecs.decode(codecs.encode(f, cfg)), codecs.encode(f, cfg))
               for f in sim_frames]
    elapsed = time.perf_counter() - t0
    worst_bpp = max(r.bpp for r in reports)
    worst_d2 = min(r.psnr_d2_db for r in reports)
    ok = anchor_ok and worst_bpp <= 7 and worst_d2 >= 90 and elapsed < 120
    verdict(4, "operating-point consistency", ok,
            f"bpp(105 KiB, 131072 pts) = {anchor!r}; range quantized range_bits=14 on "
            f"{len(reports)} frames: max BPP {worst_bpp:.4f} (<= 7), min PSNR d2 {worst_d2:.2f} dB "
            f"(>= 90), {elapsed:.1f} s")
    assert ok


def test_c05_range_lossless(verdict):
    sensor = default_sensor()
    frames = simulate_frames(SIM_SEED + 5, 10, sensor)
    cfg = RangeCodecConfig(RangeMode.LOSSLESS)
    worst = 0.0
    reconcile = True
    collision_free = True
    for cloud in frames:
        images = project(cloud, sensor)
        collision_free &= images.collisions == 0
        frame = codecs.encode(cloud, cfg, sensor)
        rec = codecs.decode(frame, sensor)
        reconcile &= int(images.valid.sum()) + images.collisions == frame.n_points_original == len(cloud)
        reconcile &= len(rec) == len(cloud)
        if len(rec) == len(cloud):
            worst = max(worst, float(np.abs(rec.xyz - cloud.xyz).max()))
    ok = collision_free and reconcile and worst <= 2e-6
    verdict(5, "range codec losslessness", ok,
            f"10 frames, collision-free {collision_free}, counts reconcile {reconcile}, "
            f"max position error {worst * 1e6:.3f} um (<= 2 um)")
    assert ok


def test_c06_voxel_bound(verdict, sim_frames):
    cases = []
    for v in (0.2, 0.5, 1.0):
        for cloud in sim_frames:
            cd = chamfer(cloud, devoxelize(voxelize(cloud, v, "binary")))
            cases.append((v, cd, v * math.sqrt(3) / 2))
    bad = [c for c in cases if c[1] > c[2]]
    ok = not bad
    verdict(6, "voxel codec bound", ok,
            f"{len(cases)} cases, largest Chamfer/bound ratio {max(c[1] / c[2] for c in cases):.3f}")
    assert ok, bad


def test_c07_entropy_round_trip(verdict):
    rng = np.random.default_rng(7)
    failures = 0
    for i in range(1000):
        n = int(rng.integers(1, 10_001))
        alphabet = int(rng.integers(2, 256))
        sym = rng.integers(0, alphabet, n)
        if i % 2:
            n_ctx = int(rng.integers(1, 257))
            ctx = rng.integers(0, n_ctx, n)
            blob = encode_symbols(sym, ctx, alphabet=alphabet, n_contexts=n_ctx)
            out = decode_symbols(blob, contexts=ctx, alphabet=alphabet, n_contexts=n_ctx)
        else:
            out = decode_symbols(encode_symbols(sym, alphabet=alphabet), n, alphabet=alphabet)
        failures += not np.array_equal(out, sym)
    ratios = []
    for seed, p in enumerate(([0.5, 0.25, 0.125, 0.125], [0.9, 0.05, 0.03, 0.02], [1 / 16] * 16)):
        s = np.random.default_rng(100 + seed).choice(len(p), 100_000, p=p)
        ratios.append(len(encode_symbols(s, alphabet=len(p))) / (shannon_bits(s) / 8))
    ok = failures == 0 and all(0.95 <= r <= 1.05 for r in ratios)
    verdict(7, "entropy coder round trip", ok,
            f"1000 sequences, {failures} mismatches; size/Shannon ratios "
            + ", ".join(f"{r:.4f}" for r in ratios))
    assert ok


def test_c08_wire_protocol(verdict, sim_frames):
    frames = sim_frames + simulate_frames(SIM_SEED, 20)[len(sim_frames):]
    port: list[int] = []
    ready = threading.Event()
    out: dict = {}

    def server():
        try:
            out["report"] = serve(frames, OctreeConfig(16), "127.0.0.1", 0, 10.0,
                                  ready=lambda p: (port.append(p), ready.set()), accept_timeout=30)
        except Exception as exc:
            out["error"] = exc
            ready.set()

    t = threading.Thread(target=server)
    t.start()
    ready.wait(30)
    stats = receive("127.0.0.1", port[0], timeout=60)
    t.join(60)
    if "error" in out:
        raise out["error"]
    wire_ok = stats.frames_received == 20 and stats.crc_failures == 0 and stats.frame_id_gaps == 0
    size_ok = stats.max_frame_bytes <= 107_520
    ok = wire_ok and size_ok
    verdict(8, "wire protocol", ok,
            f"frames_received {stats.frames_received}, crc_failures {stats.crc_failures}, "
            f"frame_id_gaps {stats.frame_id_gaps}; max_frame_bytes {stats.max_frame_bytes} "
            f"(<= 107520: {size_ok}); achieved {stats.achieved_fps:.2f} fps (reported only)")
    assert wire_ok
    assert size_ok, f"octree bits=16 max_frame_bytes {stats.max_frame_bytes} > 107520"


def test_c09_auc(verdict):
    pts = (RDPoint("a", 1.0, 60.0, 60.0, 0, 0, 0), RDPoint("b", 2.0, 70.0, 70.0, 0, 0, 0))
    exact = auc(RDCurve("octree", pts))
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(500):
        # dyadic coordinates keep the inserted midpoint exactly on the segment
        xs = np.sort(rng.choice(np.arange(1, 1281), int(rng.integers(2, 10)), replace=False)) / 64
        ys = rng.integers(20 * 64, 120 * 64, len(xs)) / 64
        i = int(rng.integers(0, len(xs) - 1))
        t = rng.choice([0.25, 0.5, 0.75])
        xm = xs[i] + t * (xs[i + 1] - xs[i])
        ym = ys[i] + t * (ys[i + 1] - ys[i])
        before = auc_xy(xs, ys)
        after = auc_xy(np.insert(xs, i + 1, xm), np.insert(ys, i + 1, ym))
        worst = max(worst, abs(after - before), abs(before - trapezoid(list(zip(xs, ys)))))
    ok = exact == 65.0 and worst <= 1e-12
    verdict(9, "AUC", ok, f"AUC {{(1,60),(2,70)}} = {float(exact)!r}; midpoint invariance max deviation {worst:.1e}")
    assert ok


def test_c10_bench_determinism(verdict, tmp_path, capsys):
    keep = [i for i, c in enumerate(CSV_COLUMNS) if c not in TIMING_COLUMNS]
    texts = []
    for run in ("a", "b"):
        argv = ["bench", "--codec", "octree", "--sweep", "8,12,16", "--seed", "11",
                "--frames", "2", "--repetitions", "1", "--out", str(tmp_path / run)]
        assert main(argv) == 0
        lines = (tmp_path / f"{run}.csv").read_text().splitlines()
        body = [",".join(row.split(",")[i] for i in keep) for row in lines[1:]]
        texts.append("\n".join([lines[0], *body]).encode())
    capsys.readouterr()
    ok = texts[0] == texts[1]
    verdict(10, "bench determinism", ok,
            f"two seeded bench runs, {len(texts[0])} bytes each with timing columns removed, identical {ok}")
    assert ok
