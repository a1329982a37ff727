"""Deterministic artifact bundles: a JSON manifest plus raw little-endian blobs.

A bundle is a zip whose entries have fixed timestamps and sorted names, so
identical contents produce byte-identical files; checkpoints, sampled videos
and concept-token sidecars all use it. Writes go to a temp file in the target
directory and are renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
MANIFEST_NAME = "manifest.json"


class BundleError(ValueError):
    """Malformed or incompatible bundle file."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1).encode("utf-8")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_bundle(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write manifest + arrays as a reproducible zip bundle."""
    manifest = dict(manifest)
    entries = {}
    blobs = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob_name = f"blobs/{name}.bin"
        entries[name] = {
            "file": blob_name,
            "shape": list(arr.shape),
            "dtype": np.dtype(arr.dtype).str,
        }
        blobs[blob_name] = arr.tobytes(order="C")
    manifest["arrays"] = entries

    import io

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED, compresslevel=6) as zf:
        names = [MANIFEST_NAME] + sorted(blobs)
        payloads = {MANIFEST_NAME: _canonical_json(manifest), **blobs}
        for name in names:
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payloads[name])
    atomic_write_bytes(path, buf.getvalue())


def load_bundle(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise BundleError(f"bundle not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME))
            arrays = {}
            for name, entry in manifest.get("arrays", {}).items():
                raw = zf.read(entry["file"])
                dtype = np.dtype(entry["dtype"])
                arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
                arrays[name] = arr
    except (KeyError, json.JSONDecodeError, zipfile.BadZipFile) as exc:
        raise BundleError(f"malformed bundle {path}: {exc}") from None
    return manifest, arrays


def write_json(path: str | Path, obj: dict) -> None:
    atomic_write_bytes(path, _canonical_json(obj))


def read_json(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return json.load(fh)
