"""Deterministic array containers used for feature files and checkpoints.

A container is an uncompressed zip of ``<name>.npy`` entries plus an optional
``meta.json``. Entries are written in sorted order with a fixed timestamp, so
identical content always produces identical bytes (``numpy.savez`` does not
guarantee this because it stamps entries with the current time). The files
stay readable with plain ``numpy.load``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

# Fixed DOS timestamp (the zip epoch) keeps output byte-stable across runs.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_META_ENTRY = "meta.json"


class ContainerError(ValueError):
    """Raised when a container file is missing entries or malformed."""


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def write_container(path: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write named arrays (and optional JSON metadata) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        if meta is not None:
            payload = json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")
            _write_entry(zf, _META_ENTRY, payload)
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            _write_entry(zf, name + ".npy", buf.getvalue())


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back all arrays and the metadata dict (empty if absent)."""
    path = Path(path)
    if not path.is_file():
        raise ContainerError(f"container file not found: {path}")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                if name == _META_ENTRY:
                    meta = json.loads(zf.read(name).decode("utf-8"))
                elif name.endswith(".npy"):
                    buf = io.BytesIO(zf.read(name))
                    arrays[name[:-4]] = np.lib.format.read_array(buf, allow_pickle=False)
    except (zipfile.BadZipFile, ValueError) as exc:
        raise ContainerError(f"cannot read container {path}: {exc}") from exc
    return arrays, meta
