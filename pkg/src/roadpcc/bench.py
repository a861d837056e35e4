"""Rate-distortion sweeps, AUC and CSV/SVG export.

CSV layout: one ``#`` metadata line (codec, frame count, repetitions, AUC
normalization and values), then the header
``codec,setting,bpp,psnr_d1_db,psnr_d2_db,chamfer_m,encode_ms,decode_ms``
and one row per curve point in ascending BPP. Numbers use fixed decimals
(:data:`CSV_DECIMALS`); a perfect reconstruction prints ``LOSSLESS``.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from roadpcc import codecs, metrics
from roadpcc.codecs import CodecConfig
from roadpcc.core import PointCloud, SensorModel
from roadpcc.errors import EmptyCurve, LosslessInCurve, SweepError, TooFewPoints, TooFewSettings
from roadpcc.metrics import LOSSLESS, Psnr

CSV_COLUMNS = (
    "codec", "setting", "bpp", "psnr_d1_db", "psnr_d2_db", "chamfer_m", "encode_ms", "decode_ms"
)
CSV_DECIMALS = {
    "bpp": 6, "psnr_d1_db": 6, "psnr_d2_db": 6, "chamfer_m": 9, "encode_ms": 3, "decode_ms": 3,
}
TIMING_COLUMNS = ("encode_ms", "decode_ms")
DEFAULT_REPETITIONS = 5


@dataclass(frozen=True)
class RDPoint:
    setting: str
    bpp: float
    psnr_d1: Psnr
    psnr_d2: Psnr
    chamfer: float
    encode_ms: float
    decode_ms: float


@dataclass(frozen=True)
class RDCurve:
    codec: str
    points: tuple[RDPoint, ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        for p in pts:
            nums = [p.bpp, p.chamfer, p.encode_ms, p.decode_ms]
            nums += [v for v in (p.psnr_d1, p.psnr_d2) if v is not LOSSLESS]
            if any(math.isnan(v) for v in nums):
                raise ValueError(f"NaN in curve point {p.setting!r}")
        for lo, hi in zip(pts, pts[1:]):
            if not hi.bpp > lo.bpp:
                raise ValueError(
                    f"settings {lo.setting!r} and {hi.setting!r} give the same BPP {lo.bpp}"
                )
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def _fmean(values: list[float]) -> float:
    # fsum is correctly rounded, so the mean ignores frame order
    return math.fsum(values) / len(values)


def _mean_psnr(values: list[Psnr]) -> Psnr:
    if any(v is LOSSLESS for v in values):
        return LOSSLESS
    return _fmean(values)


def _timed(fn, *args):
    t0 = time.perf_counter_ns()
    out = fn(*args)
    return out, (time.perf_counter_ns() - t0) / 1e6


def measure_frame(
    cloud: PointCloud,
    cfg: CodecConfig,
    sensor: SensorModel | None = None,
    repetitions: int = DEFAULT_REPETITIONS,
) -> tuple[metrics.MetricReport, PointCloud]:
    """Encode and decode one cloud: one discarded warm-up pass, then
    ``repetitions`` timed passes; timings are medians of the codec calls
    alone."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    frame = codecs.encode(cloud, cfg, sensor)
    codecs.decode(frame, sensor)
    enc, dec = [], []
    for _ in range(repetitions):
        frame, t_enc = _timed(codecs.encode, cloud, cfg, sensor)
        recon, t_dec = _timed(codecs.decode, frame, sensor)
        enc.append(t_enc)
        dec.append(t_dec)
    report = metrics.evaluate(
        cloud, recon, frame, encode_ms=statistics.median(enc), decode_ms=statistics.median(dec)
    )
    return report, recon


def run_sweep(
    frames: list[PointCloud],
    codec: str,
    settings: list[CodecConfig | str],
    *,
    sensor: SensorModel | None = None,
    repetitions: int = DEFAULT_REPETITIONS,
    meta: dict[str, str] | None = None,
) -> RDCurve:
    """Rate-distortion curve of ``codec`` over ``settings``.

    Per setting, BPP and quality are averaged over frames and timings are
    the median over frames of each frame's median.
    """
    cid = codecs.parse_codec(codec)
    if not frames:
        raise ValueError("sweep needs at least one frame")
    if len(settings) < 2:
        raise TooFewSettings("a sweep needs at least two settings")
    cfgs = [codecs.make_config(cid, s) if isinstance(s, str) else s for s in settings]
    for c in cfgs:
        if codecs.codec_of(c) is not cid:
            raise ValueError(f"setting {c!r} is not a {cid.name.lower()} config")
    points = []
    for cfg in cfgs:
        try:
            reports = [measure_frame(f, cfg, sensor, repetitions)[0] for f in frames]
        except Exception as exc:
            raise SweepError(cfg.label, exc) from exc
        points.append(
            RDPoint(
                cfg.label,
                _fmean([r.bpp for r in reports]),
                _mean_psnr([r.psnr_d1_db for r in reports]),
                _mean_psnr([r.psnr_d2_db for r in reports]),
                _fmean([r.chamfer_m for r in reports]),
                statistics.median(r.encode_ms for r in reports),
                statistics.median(r.decode_ms for r in reports),
            )
        )
    info = {"frames": str(len(frames)), "repetitions": str(repetitions)}
    info.update(meta or {})
    return RDCurve(cid.name.lower(), tuple(points), info)


def auc_xy(bpp, psnr) -> float:
    """Trapezoid area under ``psnr(bpp)`` divided by the BPP span."""
    x = np.asarray(bpp, dtype=np.float64)
    y = np.asarray(psnr, dtype=np.float64)
    if x.size < 2:
        raise TooFewPoints("AUC needs at least two curve points")
    span = x[-1] - x[0]
    if not span > 0:
        raise ValueError("BPP must increase along the curve")
    area = math.fsum(((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2).tolist())
    return area / span


def auc(curve: RDCurve, which: str = "d1") -> float:
    if which not in ("d1", "d2"):
        raise ValueError(f"which must be 'd1' or 'd2', got {which!r}")
    if len(curve) < 2:
        raise TooFewPoints("AUC needs at least two curve points")
    ys = [p.psnr_d1 if which == "d1" else p.psnr_d2 for p in curve.points]
    if any(y is LOSSLESS for y in ys):
        raise LosslessInCurve("a LOSSLESS point cannot be integrated")
    return auc_xy([p.bpp for p in curve.points], ys)


# -- export ---------------------------------------------------------------


def _fmt(value, decimals: int) -> str:
    return metrics.format_metric(value, decimals)


def _auc_or_na(curve: RDCurve, which: str) -> str:
    try:
        return f"{auc(curve, which):.6f}"
    except (TooFewPoints, LosslessInCurve):
        return "NA"


def to_csv(curve: RDCurve, *, include_timings: bool = True) -> str:
    meta = {"codec": curve.codec, **curve.meta}
    meta["auc"] = "trapezoid/bpp_span"
    meta["auc_d1"] = _auc_or_na(curve, "d1")
    meta["auc_d2"] = _auc_or_na(curve, "d2")
    lines = ["# " + " ".join(f"{k}={v}" for k, v in meta.items()), ",".join(CSV_COLUMNS)]
    for p in curve.points:
        values = {
            "bpp": p.bpp, "psnr_d1_db": p.psnr_d1, "psnr_d2_db": p.psnr_d2,
            "chamfer_m": p.chamfer, "encode_ms": p.encode_ms, "decode_ms": p.decode_ms,
        }
        row = [curve.codec, p.setting]
        for col in CSV_COLUMNS[2:]:
            if col in TIMING_COLUMNS and not include_timings:
                row.append("NA")
            else:
                row.append(_fmt(values[col], CSV_DECIMALS[col]))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[dict[str, object]]:
    """Rows of an exported CSV with numeric fields parsed (metadata skipped)."""
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = rows[0].split(",")
    out = []
    for ln in rows[1:]:
        cells = dict(zip(header, ln.split(",")))
        out.append(
            {k: (v if k in ("codec", "setting") else metrics.parse_metric(v)) for k, v in cells.items()}
        )
    return out


def _ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def to_svg(curve: RDCurve, width: int = 800, height: int = 600) -> str:
    """Self-contained SVG plot of PSNR d1 and d2 against BPP."""
    left, right, top, bottom = 70, 20, 40, 60
    series = {
        "PSNR d1": [(p.bpp, p.psnr_d1) for p in curve.points if p.psnr_d1 is not LOSSLESS],
        "PSNR d2": [(p.bpp, p.psnr_d2) for p in curve.points if p.psnr_d2 is not LOSSLESS],
    }
    xs = [p.bpp for p in curve.points]
    ys = [y for s in series.values() for _, y in s] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">'
        f"{escape(curve.codec)} rate-distortion</text>",
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(
            f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 5}" stroke="black"/>'
            f'<text x="{sx(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>'
        )
    for t in _ticks(y0, y1):
        out.append(
            f'<line x1="{left - 5}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" stroke="black"/>'
            f'<text x="{left - 8}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:g}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 15}" text-anchor="middle">bits per point</text>'
        f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">PSNR (dB)</text>'
    )
    colours = {"PSNR d1": "#1f77b4", "PSNR d2": "#d62728"}
    for k, (name, pts) in enumerate(series.items()):
        col = colours[name]
        if pts:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="2"/>')
            out.extend(
                f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3.5" fill="{col}"/>' for x, y in pts
            )
        ly = top + 16 + 18 * k
        out.append(
            f'<line x1="{left + 12}" y1="{ly}" x2="{left + 36}" y2="{ly}" stroke="{col}" stroke-width="2"/>'
            f'<text x="{left + 42}" y="{ly + 4}">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export(curve: RDCurve, fmt: str = "csv", *, include_timings: bool = True) -> bytes:
    if len(curve) == 0:
        raise EmptyCurve("nothing to export")
    if fmt == "csv":
        return to_csv(curve, include_timings=include_timings).encode("ascii")
    if fmt == "svg":
        return to_svg(curve).encode("utf-8")
    raise ValueError(f"fmt must be 'csv' or 'svg', got {fmt!r}")
