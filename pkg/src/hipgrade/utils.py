"""Small shared helpers: atomic file writes and seed derivation."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = ["atomic_write_text", "atomic_write_bytes", "atomic_save", "child_seeds"]


def _replace_from_temp(path: Path, write_fn) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_fn(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    """Write text via a temp file and rename, so readers never see partial files."""
    _replace_from_temp(Path(path), lambda tmp: tmp.write_text(text))


def atomic_write_bytes(path, data: bytes) -> None:
    _replace_from_temp(Path(path), lambda tmp: tmp.write_bytes(data))


def atomic_save(path, save_fn) -> None:
    """Run ``save_fn(tmp_path)`` then rename tmp_path onto path."""
    _replace_from_temp(Path(path), save_fn)


def child_seeds(seed: int, n: int) -> list[int]:
    """Derive n independent integer seeds from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
