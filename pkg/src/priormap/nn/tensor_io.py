"""PMTN tensor files and checkpoint directories.

A PMTN file is the 4 magic bytes ``PMTN``, a little-endian ``u32`` rank, one
``u32`` per extent, then the row-major values as little-endian ``float32``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"PMTN"


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    header = MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise DataError("not a PMTN tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * count:
        raise DataError(f"PMTN payload has {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_checkpoint(directory, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write one ``<name>.pmtn`` per tensor plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"parameters": [], "meta": meta or {}}
    for name, value in named.items():
        fname = name.replace("/", ".") + ".pmtn"
        save_tensor(d / fname, value)
        manifest["parameters"].append({"name": name, "shape": list(value.shape), "file": fname})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    manifest = json.loads(mf.read_text())
    out = {}
    for entry in manifest["parameters"]:
        t = load_tensor(d / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise DataError(f"checkpoint tensor {entry['name']} has shape {t.shape}, "
                            f"manifest says {entry['shape']}")
        out[entry["name"]] = t
    return out, manifest.get("meta", {})
