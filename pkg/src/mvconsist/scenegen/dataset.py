"""On-disk container for video samples.

Layout::

    <root>/<split>/manifest.json      sample ids, seeds and file names
    <root>/<split>/<id>.vcdr          one record per sample

Record layout (all little-endian)::

    b"VCDR1" | u8 version | u32 N, H, W, C | u8 frame, coord, camera dtype codes
    | u32 caption length | caption (UTF-8)
    | frames      N*C*H*W float32, channel planes
    | cameras     N*18 float64 (R row-major, t, fx, fy, cx, cy, width, height)
    | coords      N*3*H*W float32, xyz planes
    | valid mask  ceil(N*H*W / 8) bytes, bit order little
    | u32 CRC32 of everything above
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from ..geometry import CameraIntrinsics, PointMap, SE3Pose
from .scenes import VideoSample

MAGIC = b"VCDR1"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEAD = struct.Struct("<5sBIIIIBBBI")
MANIFEST = "manifest.json"


class DatasetParseError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte {offset})")
        self.offset = offset
        self.path = path


def encode_sample(sample: VideoSample) -> bytes:
    frames = np.asarray(sample.frames, dtype="<f4")
    n, h, w, c = frames.shape
    caption = (sample.caption or "").encode("utf-8")
    cams = np.stack(
        [np.concatenate([pose.as_array(), intr.as_array()]) for pose, intr in sample.cameras]
    ).astype("<f8")
    coords = np.stack([pm.coords for pm in sample.pointmaps]).astype("<f4")
    valid = np.stack([pm.valid for pm in sample.pointmaps]).astype(bool)
    parts = [
        _HEAD.pack(MAGIC, VERSION, n, h, w, c, 1, 1, 2, len(caption)),
        caption,
        np.ascontiguousarray(frames.transpose(0, 3, 1, 2)).tobytes(),
        cams.tobytes(),
        np.ascontiguousarray(coords.transpose(0, 3, 1, 2)).tobytes(),
        np.packbits(valid.ravel(), bitorder="little").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_sample(buf: bytes, path=None) -> VideoSample:
    def need(offset, size, what):
        if offset + size > len(buf):
            raise DatasetParseError(f"truncated record while reading {what}", len(buf), path)

    need(0, _HEAD.size, "header")
    magic, version, n, h, w, c, f_code, p_code, c_code, cap_len = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetParseError(f"bad magic {magic!r}", 0, path)
    if version != VERSION:
        raise DatasetParseError(f"unsupported version {version}", 5, path)
    for code, off in ((f_code, 22), (p_code, 23), (c_code, 24)):
        if code not in DTYPE_CODES:
            raise DatasetParseError(f"unknown dtype code {code}", off, path)
    off = _HEAD.size
    need(off, cap_len, "caption")
    try:
        caption = buf[off : off + cap_len].decode("utf-8")
    except UnicodeDecodeError as err:
        raise DatasetParseError("caption is not valid UTF-8", off + err.start, path) from None
    off += cap_len

    def take(dtype, count, what):
        nonlocal off
        size = dtype.itemsize * count
        need(off, size, what)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    frames = take(DTYPE_CODES[f_code], n * c * h * w, "frames").reshape(n, c, h, w).transpose(0, 2, 3, 1)
    cams = take(DTYPE_CODES[c_code], n * 18, "cameras").reshape(n, 18)
    coords = take(DTYPE_CODES[p_code], n * 3 * h * w, "point maps").reshape(n, 3, h, w).transpose(0, 2, 3, 1)
    n_mask = (n * h * w + 7) // 8
    need(off, n_mask, "validity mask")
    valid = np.unpackbits(np.frombuffer(buf, np.uint8, n_mask, off), bitorder="little")[: n * h * w]
    valid = valid.reshape(n, h, w).astype(bool)
    off += n_mask
    need(off, 4, "checksum")
    (crc,) = struct.unpack_from("<I", buf, off)
    if crc != zlib.crc32(buf[:off]):
        raise DatasetParseError("checksum mismatch", off, path)
    if off + 4 != len(buf):
        raise DatasetParseError("trailing bytes after record", off + 4, path)

    cameras = []
    for row in cams:
        try:
            pose = SE3Pose(row[:9].reshape(3, 3), row[9:12])
            intr = CameraIntrinsics(*row[12:16], int(row[16]), int(row[17]))
        except ValueError as err:
            raise DatasetParseError(f"invalid camera: {err}", _HEAD.size + cap_len, path) from None
        cameras.append((pose, intr))
    pointmaps = [PointMap(np.ascontiguousarray(coords[i]), valid[i]) for i in range(n)]
    return VideoSample(np.ascontiguousarray(frames), cameras, pointmaps, caption or None)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def write_dataset(
    samples: Iterable[VideoSample],
    path,
    split: str = "train",
    seeds: Optional[Iterable[int]] = None,
    ids: Optional[Iterable[str]] = None,
) -> Path:
    """Write samples (any iterable, consumed lazily) into ``path/split``."""
    out = Path(path) / split
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else None
    ids = list(ids) if ids is not None else None
    entries = []
    for k, sample in enumerate(samples):
        sid = ids[k] if ids is not None else f"{k:06d}"
        fname = f"{sid}.vcdr"
        _atomic_write(out / fname, encode_sample(sample))
        entries.append({"id": sid, "seed": None if seeds is None else int(seeds[k]), "file": fname})
    manifest = {"format": MAGIC.decode(), "version": VERSION, "split": split, "samples": entries}
    _atomic_write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    return out


class DatasetReader:
    """Lazy view over one split; samples are decoded on access only."""

    def __init__(self, path, split: str = "train"):
        root = Path(path)
        self.dir = root / split if (root / split / MANIFEST).exists() else root
        mpath = self.dir / MANIFEST
        try:
            self.manifest = json.loads(mpath.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"no dataset manifest at {mpath}") from None
        except json.JSONDecodeError as err:
            raise DatasetParseError(f"manifest is not valid JSON: {err.msg}", err.pos, mpath) from None
        self.entries = self.manifest.get("samples", [])
        self.loaded = 0  # number of records decoded so far

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    def __getitem__(self, k: int) -> VideoSample:
        fpath = self.dir / self.entries[k]["file"]
        sample = decode_sample(fpath.read_bytes(), fpath)
        self.loaded += 1
        return sample

    def __iter__(self) -> Iterator[VideoSample]:
        for k in range(len(self)):
            yield self[k]


def read_dataset(path, split: str = "train") -> DatasetReader:
    return DatasetReader(path, split)
