"""Binary checkpoint container.

Layout, all integers little-endian u32 and values little-endian float32:

    magic "PIDN" | version | tensor count
    per tensor: name length | utf-8 name | rank | dims... | values...
    crc32 over every preceding byte

A reserved "__config__" tensor stores the model configuration, so a
checkpoint is self-describing and `load_checkpoint` can rebuild the network
it was saved from.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .network import PIDNet, config_from_values, config_to_values

MAGIC = b"PIDN"
VERSION = 1
CONFIG_KEY = "__config__"


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def _pack_tensor(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype="<f4")
    parts = [struct.pack("<I", len(encoded)), encoded,
             struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(arr.tobytes())
    return b"".join(parts)


def serialize(named: list[tuple[str, np.ndarray]]) -> bytes:
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(named))]
    body += [_pack_tensor(name, values) for name, values in named]
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def deserialize(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if len(blob) < 16:
        raise CheckpointError("checkpoint truncated: shorter than any valid file")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual = zlib.crc32(blob[:-4])
    if stored != actual:
        raise CheckpointError(
            f"crc mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    end = len(blob) - 4
    named = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            values = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            named.append((name, values.reshape(dims).copy()))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed tensor table: {exc}") from exc
    if offset != end:
        raise CheckpointError(
            f"tensor table ends at byte {offset}, expected {end}"
        )
    return named


def _model_entries(model: PIDNet) -> list[tuple[str, np.ndarray]]:
    entries = [(CONFIG_KEY,
                np.array(config_to_values(model.config), dtype=np.float64))]
    entries += [(name, t.data) for name, t in model.named_state()]
    return entries


def save_checkpoint(model: PIDNet, path) -> None:
    blob = serialize(_model_entries(model))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> PIDNet:
    """Rebuild the saved network: config tensor first, then strict state load."""
    with open(path, "rb") as fh:
        named = deserialize(fh.read())
    table = dict(named)
    if len(table) != len(named):
        raise CheckpointError("duplicate tensor names in checkpoint")
    if CONFIG_KEY not in table:
        raise CheckpointError(f"checkpoint lacks the {CONFIG_KEY} tensor")
    model = PIDNet(config_from_values(table[CONFIG_KEY]))
    _assign(model, named)
    return model


def load_into(model: PIDNet, path) -> None:
    """Strict name-and-shape load of a checkpoint into an existing model."""
    with open(path, "rb") as fh:
        named = deserialize(fh.read())
    _assign(model, named)


def _assign(model: PIDNet, named: list[tuple[str, np.ndarray]]) -> None:
    state = dict(model.named_state())
    seen = set()
    for name, values in named:
        if name == CONFIG_KEY:
            continue
        if name not in state:
            raise CheckpointError(f"unknown tensor {name!r} for this model")
        target = state[name]
        if tuple(values.shape) != tuple(target.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(values.shape)}, "
                f"model {tuple(target.shape)}"
            )
        target.data = values.astype(target.data.dtype)
        seen.add(name)
    missing = [n for n in state if n not in seen]
    if missing:
        raise CheckpointError(f"checkpoint missing tensor {missing[0]!r}")
