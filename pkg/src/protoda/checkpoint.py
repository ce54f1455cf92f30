"""Single-file checkpoint archives (``.npz``): named arrays plus JSON metadata.

The metadata always carries ``version`` and ``content_hash``; the hash is a
SHA-256 over the sorted array names, dtypes, shapes and raw bytes, so two
archives with equal parameters hash equally regardless of write time.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import MissingArtifact

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = content_hash(arrays)
    meta = dict(meta, version=FORMAT_VERSION, content_hash=digest,
                shapes={k: list(np.shape(v)) for k, v in sorted(arrays.items())})
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # write-then-rename so a crash never leaves a truncated checkpoint
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **{_META_KEY: blob}, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return digest


def load_archive(path, what: str = "checkpoint") -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(path, what)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z[_META_KEY]).decode())
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    if content_hash(arrays) != meta["content_hash"]:
        raise ValueError(f"{path}: content hash mismatch, archive is corrupt")
    return arrays, meta
