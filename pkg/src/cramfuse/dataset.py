"""On-disk dataset format.

A dataset directory holds ``index.json`` (scene metadata, sensor models,
seeds) and one ``frame_XXXXX.bin`` per frame. A .bin file is a sequence of
records, each::

    magic    4 bytes  (b"CRMF" for frames, b"CRMH" for model heads)
    ndim     u32
    dims     u32 * ndim
    data     f32 * prod(dims)

all little-endian. Frame files contain four records in the order
camera_image, true_depth, depth_valid (0/1), radar_rf.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraModel, RadarModel
from .scene_synth import Sample, Scene, SensorFrame

FRAME_MAGIC = b"CRMF"
HEAD_MAGIC = b"CRMH"
FORMAT_VERSION = 1


class ParseError(ValueError):
    """Malformed dataset or model file; the message names file and offset."""


def write_records(path, arrays, magic: bytes = FRAME_MAGIC) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            arr = np.asarray(arr, dtype="<f4")
            fh.write(magic)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_records(path, magic: bytes = FRAME_MAGIC) -> list[np.ndarray]:
    blob = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(blob):
        if blob[pos:pos + 4] != magic:
            raise ParseError(f"{path}: byte {pos}: expected magic {magic!r}, found {blob[pos:pos + 4]!r}")
        pos += 4
        if pos + 4 > len(blob):
            raise ParseError(f"{path}: byte {pos}: truncated header")
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if ndim > 8 or pos + 4 * ndim > len(blob):
            raise ParseError(f"{path}: byte {pos}: bad dimension header (ndim={ndim})")
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ParseError(f"{path}: byte {pos}: truncated data, need {nbytes} bytes, have {len(blob) - pos}")
        out.append(np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32))
        pos += nbytes
    return out


def save_dataset(samples, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"frame_{i:05d}.bin"
        f = s.frame
        write_records(path / name, [f.camera_image, f.true_depth, f.depth_valid.astype(np.float32), f.radar_rf])
        entries.append({
            "file": name,
            "seed": int(s.seed),
            "scene": s.scene.to_dict(),
            "camera": s.camera.to_dict(),
            "radar": s.radar.to_dict(),
        })
    index = {"format": "cramfuse-dataset", "version": FORMAT_VERSION, "frames": entries}
    tmp = path / "index.json.tmp"
    tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
    os.replace(tmp, path / "index.json")


def load_dataset(path) -> list[Sample]:
    path = Path(path)
    index_file = path / "index.json"
    if not index_file.exists():
        raise FileNotFoundError(f"no dataset index at {index_file}")
    try:
        index = json.loads(index_file.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{index_file}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if index.get("format") != "cramfuse-dataset":
        raise ParseError(f"{index_file}: not a cramfuse dataset index")
    samples = []
    for k, entry in enumerate(index["frames"]):
        try:
            scene = Scene.from_dict(entry["scene"])
            camera = CameraModel.from_dict(entry["camera"])
            radar = RadarModel.from_dict(entry["radar"])
            fname = entry["file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{index_file}: frames[{k}]: {exc}") from None
        grids = read_records(path / fname)
        if len(grids) != 4:
            raise ParseError(f"{path / fname}: expected 4 records, found {len(grids)}")
        image, depth, valid, rf = grids
        frame = SensorFrame(image, depth, valid > 0.5, rf)
        samples.append(Sample(scene, frame, camera, radar, int(entry["seed"])))
    return samples
