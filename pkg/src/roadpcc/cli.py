"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or corrupt
input, codec failure). Every output file is written to a temporary name in
the target directory and renamed into place.

``--config FILE`` reads ``key = value`` lines (``#`` starts a comment) whose
keys are long option names with ``-`` or ``_``; values override the flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from roadpcc import bench, codecs, io, metrics, stream
from roadpcc.core import SensorModel, default_sensor, parse_key_values
from roadpcc.errors import PccError
from roadpcc.scenegen import iter_frames, simulate_frames

log = logging.getLogger("roadpcc")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

# codec flag dest -> (codec, make_config key)
_CODEC_FLAGS = {
    "bits": ("octree", "bits"),
    "ctx": ("octree", "ctx"),
    "mode": ("range", "mode"),
    "range_bits": ("range", "range_bits"),
    "azimuth_bits": ("range", "azimuth_bits"),
    "voxel_size": ("voxel", "voxel"),
    "assign": ("voxel", "assign"),
}


_UMASK = os.umask(0)
os.umask(_UMASK)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read(path: str) -> bytes:
    return Path(path).read_bytes()


# -- argument groups ------------------------------------------------------


def _add_codec_flags(p: argparse.ArgumentParser, *, need_codec: bool = True) -> None:
    if need_codec:
        p.add_argument("--codec", choices=["octree", "range", "voxel"], required=True)
    g = p.add_argument_group("octree")
    g.add_argument("--bits", type=int, help="quantization bits per axis (default 16)")
    g.add_argument("--ctx", choices=["order0", "parent_context"], help="context mode")
    g = p.add_argument_group("range")
    g.add_argument("--mode", choices=["lossless", "quantized"], help="default lossless")
    g.add_argument("--range-bits", type=int, help="quantized range bits, 8..16")
    g.add_argument("--azimuth-bits", type=int, help="quantized azimuth bits, 0..16")
    g = p.add_argument_group("voxel")
    g.add_argument("--voxel-size", type=float, help="voxel edge in metres (default 0.2)")
    g.add_argument("--assign", choices=["binary", "averaged", "density"])


def _add_sensor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sensor", help="sensor calibration file (key = value)")
    p.add_argument("--beams", type=int, help="beams of the default sensor (default 64)")
    p.add_argument("--cols", type=int, help="columns of the default sensor (default 2048)")


def _add_sim_flags(p: argparse.ArgumentParser, frames_default: int) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=frames_default)
    p.add_argument("--noise", type=float, default=0.01, help="range noise sigma in metres")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roadpcc", description="Roadside LiDAR point cloud compression toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="key = value file overriding flags")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="simulate LiDAR frames to PCD files")
    _add_sim_flags(p, 1)
    _add_sensor_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ascii", action="store_true", help="write ASCII PCD")

    p = sub.add_parser("encode", help="compress a PCD file")
    _add_codec_flags(p)
    _add_sensor_flags(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="decompress to a PCD file")
    _add_sensor_flags(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("eval", help="compare a reconstruction with its original")
    p.add_argument("--original", required=True)
    p.add_argument("--reconstructed", required=True)
    p.add_argument("--frame", help="compressed frame, for BPP and compression ratio")
    p.add_argument("--format", choices=["text", "csv"], default="text")

    p = sub.add_parser("bench", help="rate-distortion sweep to CSV and SVG")
    _add_codec_flags(p)
    _add_sensor_flags(p)
    _add_sim_flags(p, 5)
    p.add_argument("--sweep", required=True, help="comma-separated values of the main dial")
    p.add_argument("--in", dest="inputs", nargs="+", help="PCD frames instead of simulated ones")
    p.add_argument("--repetitions", type=int, default=bench.DEFAULT_REPETITIONS)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.csv and PREFIX.svg")
    p.add_argument("--no-timings", action="store_true", help="print NA in the timing columns")

    p = sub.add_parser("serve", help="stream simulated frames to one subscriber")
    _add_codec_flags(p)
    _add_sensor_flags(p)
    _add_sim_flags(p, 20)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5555)
    p.add_argument("--fps", type=float, default=10.0)

    p = sub.add_parser("recv", help="receive a stream and print its statistics")
    _add_sensor_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5555)
    p.add_argument("--max-kb", type=float, default=105.0)
    p.add_argument("--min-fps", type=float, default=10.0)
    p.add_argument("--retry", type=float, default=0.0, help="seconds to retry connecting")
    return parser


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not args.config:
        return
    try:
        kv = parse_key_values(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    for key, raw in kv.items():
        dest = key.replace("-", "_")
        if dest in ("config", "command") or not hasattr(args, dest):
            raise UsageError(f"config key {key!r} is not an option of {args.command}")
        current = getattr(args, dest)
        try:
            if isinstance(current, bool):
                value: object = raw.lower() in ("1", "true", "yes", "on")
            elif dest in ("bits", "range_bits", "azimuth_bits", "seed", "frames", "port",
                          "repetitions", "beams", "cols"):
                value = int(raw)
            elif dest in ("voxel_size", "noise", "fps", "max_kb", "min_fps", "retry"):
                value = float(raw)
            elif dest == "inputs":
                value = raw.split()
            else:
                value = raw
        except ValueError:
            raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
        setattr(args, dest, value)


def _codec_params(args: argparse.Namespace) -> dict[str, str]:
    params = {}
    for dest, (codec, key) in _CODEC_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if codec != args.codec:
            flag = "--" + dest.replace("_", "-")
            raise UsageError(f"{flag} does not apply to the {args.codec} codec")
        params[key] = str(value)
    return params


def _codec_config(args: argparse.Namespace):
    try:
        return codecs.make_config(args.codec, _codec_params(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _sensor(args: argparse.Namespace) -> SensorModel:
    if getattr(args, "sensor", None):
        if args.beams is not None or args.cols is not None:
            raise UsageError("--sensor excludes --beams/--cols")
        return SensorModel.from_text(Path(args.sensor).read_text())
    kw = {}
    if getattr(args, "beams", None) is not None:
        kw["n_beams"] = args.beams
    if getattr(args, "cols", None) is not None:
        kw["n_cols"] = args.cols
    try:
        return default_sensor(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_positive(args: argparse.Namespace, *names: str) -> None:
    for n in names:
        if getattr(args, n) <= 0:
            raise UsageError(f"--{n.replace('_', '-')} must be positive")


# -- commands -------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    _check_positive(args, "frames")
    sensor = _sensor(args)
    out = Path(args.out)
    write_atomic(out / "sensor.txt", sensor.to_text().encode("ascii"))
    mode = "ascii" if args.ascii else "binary"
    for cloud in iter_frames(args.seed, args.frames, sensor, noise_sigma_m=args.noise):
        path = out / f"frame_{cloud.frame_id:04d}.pcd"
        write_atomic(path, io.write_pcd(cloud, mode))
        log.info("wrote %s (%d points)", path, len(cloud))
    print(f"wrote {args.frames} frame(s) and sensor.txt to {out}")
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    cfg = _codec_config(args)
    sensor = _sensor(args)
    cloud = io.read_pcd(_read(args.input))
    t0 = time.perf_counter()
    frame = codecs.encode(cloud, cfg, sensor)
    ms = (time.perf_counter() - t0) * 1e3
    write_atomic(args.out, io.pack_frame(frame))
    print(
        f"{args.codec} {cfg.label}: {len(cloud)} points -> {frame.payload_bytes} bytes, "
        f"{metrics.bpp(frame):.4f} bpp, {ms:.1f} ms"
    )
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    frame = io.unpack_frame(_read(args.input))
    cloud = codecs.decode(frame, _sensor(args))
    write_atomic(args.out, io.write_pcd(cloud, "ascii" if args.ascii else "binary"))
    print(f"decoded {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    original = io.read_pcd(_read(args.original))
    recon = io.read_pcd(_read(args.reconstructed))
    frame = io.unpack_frame(_read(args.frame)) if args.frame else None
    report = metrics.evaluate(original, recon, frame)
    if args.format == "csv":
        sys.stdout.write(metrics.MetricReport.csv_header() + "\n" + report.to_csv_row() + "\n")
    else:
        sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    _check_positive(args, "frames", "repetitions")
    values = [v for v in args.sweep.split(",") if v.strip()]
    try:
        settings = codecs.sweep_configs(args.codec, values, _codec_params(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sensor = _sensor(args)
    if args.inputs:
        frames = [io.read_pcd(_read(p)) for p in args.inputs]
        meta = {"inputs": str(len(frames))}
    else:
        frames = simulate_frames(args.seed, args.frames, sensor, noise_sigma_m=args.noise)
        meta = {"seed": str(args.seed), "noise_m": f"{args.noise:g}"}
    curve = bench.run_sweep(
        frames, args.codec, settings, sensor=sensor, repetitions=args.repetitions, meta=meta
    )
    csv = bench.export(curve, "csv", include_timings=not args.no_timings)
    write_atomic(f"{args.out}.csv", csv)
    write_atomic(f"{args.out}.svg", bench.export(curve, "svg"))
    sys.stdout.write(csv.decode("ascii"))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = _codec_config(args)
    _check_positive(args, "frames", "fps")
    sensor = _sensor(args)
    source = iter_frames(args.seed, args.frames, sensor, noise_sigma_m=args.noise)
    report = stream.serve(
        source, cfg, args.host, args.port, args.fps, sensor=sensor,
        ready=lambda port: print(f"listening on {args.host}:{port}", flush=True),
    )
    print(
        f"sent {report.frames_sent} frame(s), dropped {report.frames_dropped}, "
        f"encode errors {report.encode_errors}, late {report.late_frames}"
    )
    return EXIT_OK


def cmd_recv(args: argparse.Namespace) -> int:
    _check_positive(args, "max_kb", "min_fps")
    stats = stream.receive(
        args.host, args.port, stream.Budget(args.max_kb, args.min_fps), sensor=_sensor(args),
        retry_for=args.retry,
    )
    sys.stdout.write(stats.to_text())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "serve": cmd_serve,
    "recv": cmd_recv,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (PccError, OSError, ValueError) as exc:
        print(f"roadpcc: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
