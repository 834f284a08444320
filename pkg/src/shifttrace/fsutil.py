"""Atomic file output and content hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from fnmatch import fnmatch
from pathlib import Path


def dumps(obj) -> str:
    """Canonical JSON text used for every emitted document."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def atomic_write(path: str | Path, data: bytes | str) -> Path:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def write_json(path: str | Path, obj, pretty: bool = False) -> Path:
    text = json.dumps(obj, sort_keys=True, indent=1) if pretty else dumps(obj)
    return atomic_write(path, text + "\n")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_tree(root: str | Path, exclude: tuple[str, ...] = ()) -> dict[str, str]:
    """Relative path -> sha256 for every file under ``root``.

    ``exclude`` holds glob patterns matched against the relative path;
    dotfiles are always skipped.
    """
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            rel = p.relative_to(root).as_posix()
            if p.name.startswith(".") or any(fnmatch(rel, pat) for pat in exclude):
                continue
            out[rel] = sha256_file(p)
    return out
