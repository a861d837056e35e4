"""Uniform entry points over the three codecs.

Settings are written as ``key=value`` pairs joined by ``;`` (the codec
config ``label``), e.g. ``bits=12;ctx=parent_context``,
``quantized;range_bits=14`` or ``voxel=0.5;assign=density``.
"""

from __future__ import annotations

from typing import Union

from roadpcc import octree, rangeimage, voxel
from roadpcc.core import PointCloud, SensorModel, default_sensor
from roadpcc.io import CodecId, CompressedFrame
from roadpcc.octree import OctreeConfig
from roadpcc.rangeimage import RangeCodecConfig
from roadpcc.voxel import VoxelCodecConfig

CodecConfig = Union[OctreeConfig, RangeCodecConfig, VoxelCodecConfig]

_CONFIG_TYPES = {
    CodecId.OCTREE: OctreeConfig,
    CodecId.RANGE: RangeCodecConfig,
    CodecId.VOXEL: VoxelCodecConfig,
}


def parse_codec(name: CodecId | str | int) -> CodecId:
    if isinstance(name, str):
        try:
            return CodecId[name.upper()]
        except KeyError:
            raise ValueError(f"unknown codec {name!r}; choose octree, range or voxel") from None
    return CodecId(name)


def codec_of(cfg: CodecConfig) -> CodecId:
    for cid, typ in _CONFIG_TYPES.items():
        if isinstance(cfg, typ):
            return cid
    raise TypeError(f"not a codec config: {cfg!r}")


def _split(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        key, sep, value = part.partition("=")
        out[key.strip().lower()] = value.strip() if sep else ""
    return out


def make_config(codec: CodecId | str, params: dict[str, str] | str | None = None) -> CodecConfig:
    """Build a codec config from ``key=value`` parameters.

    Octree keys: ``bits``, ``ctx``. Range keys: ``mode`` (or a bare
    ``lossless``/``quantized``), ``range_bits``, ``azimuth_bits``. Voxel
    keys: ``voxel``, ``assign``.
    """
    cid = parse_codec(codec)
    kv = _split(params) if isinstance(params, str) else dict(params or {})
    try:
        if cid is CodecId.OCTREE:
            cfg = OctreeConfig(
                int(kv.pop("bits", 16)), kv.pop("ctx", "order0")
            )
        elif cid is CodecId.RANGE:
            mode = kv.pop("mode", None)
            for bare in ("lossless", "quantized"):
                if bare in kv and kv[bare] == "":
                    kv.pop(bare)
                    mode = bare
            cfg = RangeCodecConfig(
                mode or "lossless", int(kv.pop("range_bits", 16)), int(kv.pop("azimuth_bits", 0))
            )
        else:
            cfg = VoxelCodecConfig(float(kv.pop("voxel", 0.2)), kv.pop("assign", "binary"))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad {cid.name.lower()} parameters: {exc}") from None
    if kv:
        raise ValueError(f"unknown {cid.name.lower()} parameter(s): {', '.join(sorted(kv))}")
    return cfg


SWEEP_KEY = {CodecId.OCTREE: "bits", CodecId.RANGE: "range_bits", CodecId.VOXEL: "voxel"}


def sweep_configs(
    codec: CodecId | str, values: list[str], params: dict[str, str] | str | None = None
) -> list[CodecConfig]:
    """One config per value of the codec's main dial (octree ``bits``, range
    ``range_bits``, voxel ``voxel``), other parameters held fixed. A range
    sweep defaults to quantized mode."""
    cid = parse_codec(codec)
    base = _split(params) if isinstance(params, str) else dict(params or {})
    if cid is CodecId.RANGE and "mode" not in base and "lossless" not in base:
        base.setdefault("quantized", "")
    return [make_config(cid, {**base, SWEEP_KEY[cid]: str(v).strip()}) for v in values]


def encode(
    cloud: PointCloud, cfg: CodecConfig, sensor: SensorModel | None = None
) -> CompressedFrame:
    cid = codec_of(cfg)
    if cid is CodecId.OCTREE:
        return octree.encode(cloud, cfg)
    if cid is CodecId.RANGE:
        return rangeimage.encode_cloud(cloud, sensor or default_sensor(), cfg)
    return voxel.encode_cloud(cloud, cfg)


def decode(frame: CompressedFrame, sensor: SensorModel | None = None) -> PointCloud:
    """Decode any frame to a point cloud, dispatching on its codec id."""
    if frame.codec_id is CodecId.OCTREE:
        return octree.decode(frame)
    if frame.codec_id is CodecId.RANGE:
        return rangeimage.decode_cloud(frame, sensor or default_sensor())
    return voxel.decode_cloud(frame)
