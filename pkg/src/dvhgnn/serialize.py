"""Tensor files: a text manifest plus one little-endian f64 blob.

``weights.manifest``::

    # dvhgnn-tensors v1
    stem.0.weight f64 [3,3,3,24]
    stem.0.bias f64 [24]

``weights.bin`` holds the raw values of every listed tensor, concatenated in
manifest order, row-major.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

HEADER = "# dvhgnn-tensors v1"
_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


class WeightFormatError(ValueError):
    """Manifest or blob is malformed; ``tensor`` names the first bad entry."""

    def __init__(self, message: str, tensor: str = ""):
        self.tensor = tensor
        super().__init__(message)


class ShapeMismatchError(ValueError):
    def __init__(self, tensor: str, expected: Tuple[int, ...], found: Tuple[int, ...]):
        self.tensor = tensor
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(
            f"tensor {tensor!r}: model expects shape {self.expected}, file has {self.found}"
        )


def tensor_paths(path: PathLike) -> Tuple[Path, Path]:
    """Map ``foo``, ``foo.manifest`` or ``foo.bin`` to the manifest/blob pair."""
    path = Path(path)
    if path.suffix in (".manifest", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".manifest"), path.with_name(path.name + ".bin")


def save_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> Tuple[Path, Path]:
    manifest, blob = tensor_paths(path)
    lines = [HEADER]
    with open(blob, "wb") as fh:
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise WeightFormatError(f"tensor name {name!r} contains whitespace", name)
            arr = np.array(arr, dtype=_DTYPE, order="C")  # keeps 0-d shapes
            shape = json.dumps(list(arr.shape), separators=(",", ":"))
            lines.append(f"{name} f64 {shape}")
            fh.write(arr.tobytes(order="C"))
    manifest.write_text("\n".join(lines) + "\n")
    return manifest, blob


def load_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    manifest, blob = tensor_paths(path)
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=2)
        if len(parts) != 3:
            raise WeightFormatError(f"{manifest}:{lineno}: expected 'name dtype shape'")
        name, dtype, shape_txt = parts
        if dtype != "f64":
            raise WeightFormatError(f"tensor {name!r}: unsupported dtype {dtype!r}", name)
        try:
            shape = tuple(int(n) for n in json.loads(shape_txt))
        except (ValueError, TypeError):
            raise WeightFormatError(f"tensor {name!r}: bad shape {shape_txt!r}", name) from None
        entries.append((name, shape))

    raw = blob.read_bytes()
    out: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(raw):
            raise WeightFormatError(
                f"blob truncated while reading tensor {name!r}: need {nbytes} bytes at "
                f"offset {offset}, file has {len(raw)}",
                name,
            )
        out[name] = np.frombuffer(raw, dtype=_DTYPE, count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise WeightFormatError(f"blob has {len(raw) - offset} trailing bytes after the last tensor")
    return out
