"""
Checkpoint files.

Layout: a magic line, the header length as a decimal line, a JSON header with
sorted keys, then every tensor's values as little-endian float64 in name order.
Nothing time-dependent is stored, so equal runs write equal bytes.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .autodiff import ParamStore
from .errors import ParseError, StageError
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"MOTIF-CDR CHECKPOINT v1\n"


class Stage(str, Enum):
    PRETRAINED = "pretrained"
    TUNED = "tuned"


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: Dict[str, Any]
    stage: Stage
    frozen: List[str] = field(default_factory=list)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: ParamStore, config: Dict[str, Any], stage: Stage,
                   rng_state: Dict[str, Any] = None, meta: Dict[str, Any] = None) -> "Checkpoint":
        return cls(
            params=store.snapshot(),
            config=config,
            stage=Stage(stage),
            frozen=sorted(store.frozen),
            rng_state=rng_state or {},
            meta=meta or {},
        )

    def to_store(self) -> ParamStore:
        store = ParamStore()
        for name in sorted(self.params):
            store.add(name, self.params[name])
        store.frozen = set(self.frozen)
        return store

    def require_stage(self, stage: Stage, action: str):
        if self.stage is not Stage(stage):
            raise StageError(action, f"needs a {Stage(stage).value} checkpoint, got {self.stage.value}")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = []
    payload = []
    offset = 0
    for name in sorted(ckpt.params):
        values = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(values.shape), "offset": offset})
        raw = values.tobytes()
        payload.append(raw)
        offset += len(raw)

    header = {
        "config": ckpt.config,
        "stage": ckpt.stage.value,
        "frozen": sorted(ckpt.frozen),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + f"{len(header_bytes)}\n".encode("ascii") + header_bytes + b"".join(payload)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if not data.startswith(MAGIC):
        raise ParseError("not a motif-cdr checkpoint (bad magic line)", source)
    rest = data[len(MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0 or not rest[:newline].isdigit():
        raise ParseError("corrupt checkpoint header length", source)
    size = int(rest[:newline])
    start = newline + 1
    try:
        header = json.loads(rest[start:start + size].decode("utf-8"))
    except ValueError as e:
        raise ParseError(f"corrupt checkpoint header: {e}", source) from None

    payload = rest[start + size:]
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin, end = entry["offset"], entry["offset"] + 8 * count
        if end > len(payload):
            raise ParseError(f"truncated payload for tensor {entry['name']!r}", source)
        params[entry["name"]] = np.frombuffer(payload[begin:end], dtype="<f8").reshape(shape).astype(np.float64)

    return Checkpoint(
        params=params,
        config=header["config"],
        stage=Stage(header["stage"]),
        frozen=list(header["frozen"]),
        rng_state=header["rng_state"],
        meta=header["meta"],
    )


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = atomic_write_bytes(path, encode_checkpoint(ckpt))
    logger.debug(f"Saved {ckpt.stage.value} checkpoint with {len(ckpt.params)} tensor(s) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
