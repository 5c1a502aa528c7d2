"""Feature bundles: a JSON manifest plus one raw little-endian payload file.

Layout of a bundle directory::

    manifest.json   tensor table (name, shape, dtype, offset, nbytes, checksum) + meta
    payload.bin     tensors back to back, row-major

Checksums are 64-bit BLAKE2b digests of each tensor's payload bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ChecksumError, DomainError, ManifestMismatchError, ShapeMismatchError
from .features import FeatureGrid, PointFeatureSet
from .geometry import CameraIntrinsics, RigidTransform

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "payload.bin"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def checksum64(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def write_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None,
                  dtype: str = "float32") -> Path:
    """Write named tensors and a metadata dict as a bundle directory."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    dt = _DTYPES[dtype]
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise DomainError(f"tensor {name!r} contains non-finite values")
        with np.errstate(over="ignore"):
            stored = np.ascontiguousarray(a, dtype=dt)
        if not np.all(np.isfinite(stored)):
            raise DomainError(f"tensor {name!r} overflows {dtype}")
        blob = stored.tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(blob),
            "checksum": checksum64(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": "i2preg-bundle", "version": FORMAT_VERSION,
                "tensors": entries, "meta": meta or {}}
    (path / PAYLOAD_NAME).write_bytes(b"".join(blobs))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return path


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and verify every tensor of a bundle; values come back as float64."""
    path = Path(path)
    mpath, ppath = path / MANIFEST_NAME, path / PAYLOAD_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"missing manifest {mpath}")
    if not ppath.is_file():
        raise FileNotFoundError(f"missing payload {ppath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        entries = manifest["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestMismatchError(f"unreadable manifest {mpath}: {exc}") from exc
    payload = ppath.read_bytes()
    out: dict[str, np.ndarray] = {}
    for e in entries:
        name = e["name"]
        dt = _DTYPES.get(e.get("dtype"))
        if dt is None:
            raise ManifestMismatchError(f"tensor {name!r}: unknown dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if expected != e["nbytes"]:
            raise ManifestMismatchError(
                f"tensor {name!r}: shape {shape} needs {expected} bytes, manifest records {e['nbytes']}"
            )
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if stop > len(payload):
            raise ShapeMismatchError(
                f"tensor {name!r}: payload holds {len(payload)} bytes, tensor ends at {stop}"
            )
        blob = payload[start:stop]
        if checksum64(blob) != e["checksum"]:
            raise ChecksumError(f"tensor {name!r}: checksum mismatch")
        arr = np.frombuffer(blob, dtype=dt).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"tensor {name!r} contains non-finite values")
        out[name] = arr
    if entries and max(e["offset"] + e["nbytes"] for e in entries) != len(payload):
        raise ShapeMismatchError("payload length disagrees with the manifest")
    return out, manifest.get("meta", {})


@dataclass
class FeatureBundle:
    """In-memory contents of a bundle directory."""

    grids: dict[str, FeatureGrid]
    points: dict[str, PointFeatureSet]
    intrinsics: CameraIntrinsics
    pose: RigidTransform | None = None
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_bundle(path, bundle: FeatureBundle, dtype: str = "float32") -> Path:
    tensors: dict[str, np.ndarray] = {}
    meta = dict(bundle.meta)
    meta["grids"] = {}
    meta["points"] = {}
    for key, g in bundle.grids.items():
        tensors[f"grid/{key}"] = g.values
        meta["grids"][key] = {"level": g.level, "height": g.height, "width": g.width,
                              "channels": g.channels}
    for key, p in bundle.points.items():
        tensors[f"points/{key}/descriptors"] = p.descriptors
        tensors[f"points/{key}/positions"] = p.positions
        meta["points"][key] = {"count": p.count, "channels": p.channels}
    tensors["intrinsics"] = bundle.intrinsics.as_array()
    if bundle.pose is not None:
        tensors["pose"] = bundle.pose.as_vector()
    for key, a in bundle.arrays.items():
        tensors[f"array/{key}"] = a
    return write_tensors(path, tensors, meta, dtype=dtype)


def load_bundle(path) -> FeatureBundle:
    tensors, meta = read_tensors(path)
    if "intrinsics" not in tensors:
        raise ManifestMismatchError("bundle has no intrinsics tensor")
    grids = {}
    for key, info in meta.get("grids", {}).items():
        name = f"grid/{key}"
        if name not in tensors:
            raise ManifestMismatchError(f"meta lists grid {key!r} but no tensor {name!r}")
        v = tensors[name]
        declared = (info.get("height"), info.get("width"), info.get("channels"))
        if v.ndim != 3 or tuple(v.shape) != declared:
            raise ManifestMismatchError(f"grid {key!r}: meta declares {declared}, tensor is {v.shape}")
        grids[key] = FeatureGrid(v, info.get("level", key))
    points = {}
    for key, info in meta.get("points", {}).items():
        d = tensors.get(f"points/{key}/descriptors")
        p = tensors.get(f"points/{key}/positions")
        if d is None or p is None:
            raise ManifestMismatchError(f"meta lists point set {key!r} but its tensors are missing")
        if d.ndim != 2 or (d.shape[0], d.shape[1]) != (info.get("count"), info.get("channels")):
            raise ManifestMismatchError(
                f"point set {key!r}: meta declares {(info.get('count'), info.get('channels'))}, "
                f"descriptors are {d.shape}"
            )
        points[key] = PointFeatureSet(d, p)
    pose = RigidTransform.from_vector(tensors["pose"]) if "pose" in tensors else None
    arrays = {k[len("array/"):]: v for k, v in tensors.items() if k.startswith("array/")}
    extra_meta = {k: v for k, v in meta.items() if k not in ("grids", "points")}
    return FeatureBundle(grids, points, CameraIntrinsics.from_array(tensors["intrinsics"]),
                         pose, arrays, extra_meta)
