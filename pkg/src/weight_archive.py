# src/weight_archive.py

import logging
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from src.errors import InputError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "weights.bin"
_F64_LE = np.dtype("<f8")


def save_archive(directory: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """
    Writes ``tensors`` as one little-endian f64 blob plus a text manifest with
    one ``name<TAB>shape<TAB>byte_offset`` line per tensor, in mapping order.
    """
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = []
    with open(out_dir / BLOB_NAME, "wb") as blob:
        for name, array in tensors.items():
            if "\t" in name or "\n" in name:
                raise InputError(f"tensor name {name!r} contains a tab or newline")
            data = np.ascontiguousarray(array, dtype=_F64_LE)
            shape = ",".join(str(dim) for dim in data.shape)
            lines.append(f"{name}\t{shape}\t{offset}")
            blob.write(data.tobytes())
            offset += data.nbytes
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved {len(lines)} tensors ({offset} bytes) to '{out_dir}'.")


def load_archive(directory: str | Path) -> Dict[str, np.ndarray]:
    in_dir = Path(directory)
    manifest_path = in_dir / MANIFEST_NAME
    blob_path = in_dir / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise InputError(f"'{in_dir}' is not a weight archive (missing {MANIFEST_NAME} or {BLOB_NAME})")

    blob = blob_path.read_bytes()
    tensors: Dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        name, shape_text, offset_text = parts
        if name in tensors:
            raise InputError(f"{manifest_path}:{lineno}: duplicate tensor name '{name}'")
        try:
            shape = tuple(int(dim) for dim in shape_text.split(",")) if shape_text else ()
            offset = int(offset_text)
        except ValueError:
            raise InputError(f"{manifest_path}:{lineno}: malformed shape or offset") from None
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * _F64_LE.itemsize
        if offset < 0 or end > len(blob):
            raise InputError(f"{manifest_path}:{lineno}: tensor '{name}' runs past the end of {BLOB_NAME}")
        tensors[name] = np.frombuffer(blob, dtype=_F64_LE, count=count, offset=offset).astype(np.float64).reshape(shape)
    logger.info(f"Loaded {len(tensors)} tensors from '{in_dir}'.")
    return tensors
