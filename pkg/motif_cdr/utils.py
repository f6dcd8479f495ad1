import os
import tempfile
from pathlib import Path
from typing import Iterable, Union

import numpy as np

# Stream tags keep per-node generators of different samplers independent
STREAM_WALK = 1
STREAM_BUDGET = 2
STREAM_SPLIT = 3
STREAM_EVAL = 4
STREAM_TRAIN = 5
STREAM_SYNTH = 6


def node_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    """
    Derive an independent generator from a global seed and integer keys.

    Identical (seed, stream, keys) always yield the same stream, regardless of
    which worker thread asks for it.
    """
    return np.random.default_rng([int(seed), int(stream), *[int(k) for k in keys]])


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """Write `data` to `path` through a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_lines(path: Union[str, Path], lines: Iterable[str]) -> Path:
    return atomic_write_text(path, "".join(f"{line}\n" for line in lines))
