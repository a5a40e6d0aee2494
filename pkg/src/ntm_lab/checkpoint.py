"""Binary checkpoints: named float64 arrays plus a JSON header.

Layout (all integers little-endian)::

    magic      8 bytes  b"NTMLAB\\x00\\x01"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    count      u32
    count x record:
        name_len u32, name (UTF-8)
        rank     u32
        dims     rank x u64
        payload  prod(dims) x f64, row-major
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .ntm import NtmConfig
from .tasks import TaskConfig
from .training import TrainConfig, Trainer

MAGIC = b"NTMLAB\x00\x01"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int):
        self.found = found
        super().__init__(f"checkpoint format version {found}, this build reads {VERSION}")


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ntm"]["init_scheme"] = cfg.ntm.init_scheme.value
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["task"] = TaskConfig(**d["task"])
    d["ntm"] = NtmConfig(**d["ntm"])
    return TrainConfig(**d)


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below is row-major regardless of layout
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("missing checkpoint magic")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(version)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or damaged file)")
    try:
        pos = len(MAGIC) + 4
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 8
            if pos + size > len(body):
                raise CorruptCheckpointError(f"record {name!r} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(float)
            pos += size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last record")
    return meta, arrays


def save_checkpoint(trainer: Trainer, path, extra: dict | None = None) -> Path:
    """Write atomically: the target is replaced only once the file is complete."""
    st = trainer.state()
    meta = {
        "config": config_to_dict(trainer.cfg),
        "step": st["step"],
        "adam_t": st["adam_t"],
        "elapsed_ms": st["elapsed_ms"],
        "rng": st["rng"],
        "curve": st["curve"],
        "extra": extra or {},
    }
    arrays = {}
    for prefix, group in (("param", st["params"]), ("adam_m", st["adam_m"]), ("adam_v", st["adam_v"])):
        for name, arr in group.items():
            arrays[f"{prefix}/{name}"] = arr
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(meta, arrays))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into the dict :meth:`Trainer.restore` accepts (plus ``config``)."""
    meta, arrays = decode(Path(path).read_bytes())
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in arrays.items():
        prefix, _, name = key.partition("/")
        if prefix not in groups:
            raise CorruptCheckpointError(f"unknown record group {prefix!r}")
        groups[prefix][name] = arr
    return {
        "config": config_from_dict(meta["config"]),
        "params": groups["param"],
        "adam_m": groups["adam_m"],
        "adam_v": groups["adam_v"],
        "adam_t": meta["adam_t"],
        "step": meta["step"],
        "elapsed_ms": meta["elapsed_ms"],
        "rng": meta["rng"],
        "curve": meta["curve"],
        "extra": meta.get("extra", {}),
    }


def load_checkpoint(path) -> Trainer:
    state = read_checkpoint(path)
    trainer = Trainer(state["config"])
    missing = set(trainer.params) ^ set(state["params"])
    if missing:
        raise CorruptCheckpointError(f"parameter set mismatch: {sorted(missing)}")
    trainer.restore(state)
    return trainer
