"""Portable float64 array container and run manifests.

Container layout (``.arr``)::

    PLUMEARR 1\\n
    name: <text>\\n
    dtype: <f8\\n
    shape: <d0>,<d1>,...\\n          (empty for a scalar)
    order: C\\n
    creator: plumeinv <version>\\n
    sha256: <hex digest of payload>\\n
    \\n
    <payload: prod(shape) little-endian IEEE-754 doubles, row-major>

All writes go to a temporary file in the target directory and are renamed
into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HashMismatch, Truncated

MAGIC = "PLUMEARR 1"
DTYPE = "<f8"


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def encode_array(data, name: str = "") -> bytes:
    arr = np.array(data, dtype=DTYPE, order="C")
    payload = arr.tobytes(order="C")
    if "\n" in name:
        raise ValueError("array name must be a single line")
    header = [
        MAGIC,
        f"name: {name}",
        f"dtype: {DTYPE}",
        "shape: " + ",".join(str(d) for d in arr.shape),
        "order: C",
        f"creator: plumeinv {__version__}",
        f"sha256: {sha256_bytes(payload)}",
        "",
        "",
    ]
    return "\n".join(header).encode("ascii") + payload


def save_array(path, data, name: str | None = None) -> str:
    """Write ``data`` as a container; returns the payload hash."""
    blob = encode_array(data, Path(path).stem if name is None else name)
    atomic_write(path, blob)
    return blob.split(b"sha256: ", 1)[1].split(b"\n", 1)[0].decode()


def read_header(blob: bytes) -> tuple[dict, bytes]:
    end = blob.find(b"\n\n")
    if end < 0 or not blob.startswith(MAGIC.encode()):
        raise Truncated("container header is missing or incomplete")
    lines = blob[:end].decode("ascii").split("\n")
    header = {}
    for line in lines[1:]:
        key, _, value = line.partition(": ")
        header[key] = value
    return header, blob[end + 2 :]


def load_array(path) -> np.ndarray:
    """Read a container, verifying its length and hash."""
    header, payload = read_header(Path(path).read_bytes())
    if header.get("dtype") != DTYPE or header.get("order") != "C":
        raise ValueError(f"unsupported container encoding in {path}")
    shape_text = header.get("shape", "")
    shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise Truncated(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if sha256_bytes(payload) != header.get("sha256"):
        raise HashMismatch(f"{path}: payload hash does not match header")
    return np.frombuffer(payload, dtype=DTYPE).reshape(shape).astype(float)


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    return json.loads(Path(path).read_text())


class StageWriter:
    """Collects a stage's outputs and writes its manifest.

    The manifest records every input and output file with its hash, the
    config hash and the seeds, so the stage can be replayed.
    """

    def __init__(self, root, stage: str, config_hash: str, seeds: dict | None = None, *, input_root=None):
        self.root = Path(root)
        self.input_root = self.root if input_root is None else Path(input_root)
        self.stage = stage
        self.config_hash = config_hash
        self.seeds = dict(seeds or {})
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.info: dict = {}

    def path(self, rel) -> Path:
        return self.root / rel

    def source(self, rel) -> Path:
        return self.input_root / rel

    def read(self, rel) -> np.ndarray:
        p = self.source(rel)
        self.inputs[str(rel)] = file_hash(p)
        return load_array(p)

    def read_json(self, rel):
        p = self.source(rel)
        self.inputs[str(rel)] = file_hash(p)
        return read_json(p)

    def array(self, rel, data) -> None:
        p = self.path(rel)
        save_array(p, data)
        self.outputs[str(rel)] = file_hash(p)

    def text(self, rel, content: str) -> None:
        p = self.path(rel)
        atomic_write(p, content.encode())
        self.outputs[str(rel)] = file_hash(p)

    def json(self, rel, obj) -> None:
        p = self.path(rel)
        write_json(p, obj)
        self.outputs[str(rel)] = file_hash(p)

    def record(self, rel) -> None:
        """Register a file written by someone else (e.g. a figure)."""
        self.outputs[str(rel)] = file_hash(self.path(rel))

    def finish(self, **extra) -> Path:
        manifest = {
            **extra,
            "stage": self.stage,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "info": self.info,
            "creator": f"plumeinv {__version__}",
            "input_root": str(self.input_root.resolve()),
        }
        path = self.path(f"manifests/{self.stage}.json")
        write_json(path, manifest)
        return path
