"""On-disk formats: FGRD feature grids, CPGN checkpoints, JSONL records.

FGRD layout (little-endian)::

    b"FGRD" | u32 version | u32 rows | u32 dim | rows*dim float64, row-major

CPGN layout (little-endian)::

    b"CPGN" | u32 version
    u32 n | n bytes of UTF-8 JSON config
    u32 n | n bytes of UTF-8 JSON metadata (phase, epoch, step, rng, ...)
    u32 count, then per tensor:
        u16 n | name | u32 rank | rank*u32 extents | u32 crc32 | float64 data
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1
CPGN_MAGIC = b"CPGN"
CPGN_VERSION = 1


class FormatError(ValueError):
    pass


class CheckpointVersionError(FormatError):
    pass


# ---------------------------------------------------------------- FGRD

def features_to_bytes(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype="<f8")
    if grid.ndim != 2:
        raise ValueError(f"feature grid must be 2-D, got shape {grid.shape}")
    rows, dim = grid.shape
    return FGRD_MAGIC + struct.pack("<III", FGRD_VERSION, rows, dim) + np.ascontiguousarray(grid).tobytes()


def features_from_bytes(buf: bytes, expected_shape=None) -> np.ndarray:
    if len(buf) < 16:
        raise FormatError(f"FGRD header truncated: expected 16 bytes, got {len(buf)}")
    if buf[:4] != FGRD_MAGIC:
        raise FormatError(f"bad FGRD magic at offset 0: {buf[:4]!r}")
    version, rows, dim = struct.unpack_from("<III", buf, 4)
    if version != FGRD_VERSION:
        raise FormatError(f"unsupported FGRD version {version} at offset 4")
    need = 16 + 8 * rows * dim
    if len(buf) != need:
        raise FormatError(f"FGRD payload size mismatch for {rows}x{dim}: expected {need} bytes, "
                          f"got {len(buf)}")
    if expected_shape is not None and (rows, dim) != tuple(expected_shape):
        raise FormatError(f"FGRD shape ({rows}, {dim}) at offset 8 does not match expected "
                          f"{tuple(expected_shape)}")
    grid = np.frombuffer(buf, dtype="<f8", offset=16).reshape(rows, dim).astype(np.float64)
    if not np.all(np.isfinite(grid)):
        raise FormatError("FGRD payload contains non-finite values")
    return grid


def save_features(path, grid: np.ndarray) -> None:
    Path(path).write_bytes(features_to_bytes(grid))


def load_features(path, expected_shape=None) -> np.ndarray:
    """Read one feature grid; ``expected_shape`` is (R, D) from the model config."""
    return features_from_bytes(Path(path).read_bytes(), expected_shape)


# ---------------------------------------------------------------- JSONL

def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from exc
    return out


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- checkpoints

def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_to_bytes(config: dict, tensors: dict, meta: dict | None = None) -> bytes:
    """Serialise named float64 arrays plus JSON config/metadata."""
    parts = [CPGN_MAGIC, struct.pack("<I", CPGN_VERSION)]
    for blob in (_dumps(config), _dumps(meta or {})):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<I", zlib.crc32(raw)), raw]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes):
    """Inverse of :func:`checkpoint_to_bytes`; returns (config, tensors, meta)."""
    if buf[:4] != CPGN_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0: {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CPGN_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} cannot be loaded by reader version "
            f"{CPGN_VERSION}; re-export it with a matching release")
    off = 8
    blobs = []
    for what in ("config", "metadata"):
        if off + 4 > len(buf):
            raise FormatError(f"checkpoint truncated in {what} header at offset {off}")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n > len(buf):
            raise FormatError(f"checkpoint truncated in {what} blob at offset {off}")
        blobs.append(json.loads(buf[off:off + n].decode("utf-8")))
        off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for k in range(count):
        name = f"#{k}"
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            (crc,) = struct.unpack_from("<I", buf, off)
            off += 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"checkpoint tensor header for {name!r} is corrupt at offset {off}") from exc
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        raw = buf[off:off + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"checkpoint tensor {name!r} truncated: expected {nbytes} bytes, "
                              f"got {len(raw)}")
        if zlib.crc32(raw) != crc:
            raise FormatError(f"checkpoint tensor {name!r} failed its checksum")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last checkpoint tensor")
    return blobs[0], tensors, blobs[1]


def save_checkpoint(path, model, train_cfg=None, trainer_state: dict | None = None,
                    meta: dict | None = None, vocab=None) -> bytes:
    """Write model parameters, optional optimiser/RNG state and metadata; returns the bytes."""
    config = {"model": model.config.to_dict()}
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    m = dict(meta or {})
    if trainer_state is not None:
        opt = trainer_state.get("optimizer")
        if opt is not None:
            for k in model.params:
                tensors[f"adam.m/{k}"] = opt["m"][k]
                tensors[f"adam.v/{k}"] = opt["v"][k]
            m["adam_t"] = opt["t"]
        m.update({"step": trainer_state["step"], "epoch": trainer_state["epoch"],
                  "rng": trainer_state.get("rng")})
    if vocab is not None:
        m["vocab"] = vocab.itos[4:]
    buf = checkpoint_to_bytes(config, tensors, m)
    if path is not None:
        Path(path).write_bytes(buf)
    return buf


def load_checkpoint(path_or_bytes):
    """Returns (model, config, trainer_state or None, meta)."""
    from .baselines import LstmCaptioner, LstmConfig
    from .transformer import ModelConfig, Transformer

    buf = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    config, tensors, meta = checkpoint_from_bytes(buf)
    mc = dict(config["model"])
    kind = mc.pop("kind")
    if kind == "transformer":
        model = Transformer(ModelConfig(**mc))
    elif kind == "lstm":
        model = LstmCaptioner(LstmConfig(**mc))
    else:
        raise FormatError(f"unknown model kind {kind!r} in checkpoint")
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    state = None
    if "step" in meta:
        opt = None
        if "adam_t" in meta:
            opt = {"t": meta["adam_t"],
                   "m": {k: tensors[f"adam.m/{k}"] for k in model.params},
                   "v": {k: tensors[f"adam.v/{k}"] for k in model.params}}
        state = {"step": meta["step"], "epoch": meta["epoch"], "optimizer": opt, "rng": meta.get("rng")}
    return model, config, state, meta
