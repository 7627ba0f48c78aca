"""Zip archives holding a JSON manifest plus raw little-endian array sections.

Used for template-model files and canonical avatar files. Writes are
byte-deterministic: fixed member order, fixed timestamps, no compression.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import ModelFormatError

_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"f4": "<f4", "i4": "<i4"}


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    sections = {}
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = "i4" if np.issubdtype(arr.dtype, np.integer) else "f4"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes(order="C")
        sections[name] = {"dtype": kind, "shape": list(arr.shape), "file": f"{name}.bin"}
        payloads.append((f"{name}.bin", data))
    manifest = dict(manifest, sections=sections)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for fname, data in payloads:
            zf.writestr(_member(fname), data)


def read_archive(path, expected_format: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise ModelFormatError("archive", f"cannot open {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ModelFormatError("manifest", f"missing or invalid manifest: {exc}") from exc
        if manifest.get("format") != expected_format:
            raise ModelFormatError("manifest", f"expected format {expected_format!r}, got {manifest.get('format')!r}")
        arrays = {}
        for name, sec in manifest.get("sections", {}).items():
            try:
                raw = zf.read(sec["file"])
                dtype = _DTYPES[sec["dtype"]]
                shape = tuple(int(s) for s in sec["shape"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(name, f"bad section entry: {exc}") from exc
            count = int(np.prod(shape)) if shape else 1
            if len(raw) != count * 4:
                raise ModelFormatError(name, f"expected {count * 4} bytes, found {len(raw)}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return manifest, arrays


def require(arrays: dict, name: str, ndim: int | None = None) -> np.ndarray:
    if name not in arrays:
        raise ModelFormatError(name, "section missing")
    arr = arrays[name]
    if ndim is not None and arr.ndim != ndim:
        raise ModelFormatError(name, f"expected {ndim} dimensions, got {arr.ndim}")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise ModelFormatError(name, "non-finite values")
    return arr
