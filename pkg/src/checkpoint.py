"""Self-describing binary checkpoint files.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"QKDC"
    4       2     format version (uint16, currently 1)
    6       4     header length H (uint32)
    10      H     header, UTF-8 JSON with sorted keys
    10+H    P     payload, float32 little-endian tensors back to back
    end-32  32    SHA-256 of every preceding byte

The header holds the model spec, its hash, free-form metadata and a tensor
directory of ``{name, kind, shape, offset, count}`` entries, where ``kind``
is ``param`` (trainable) or ``buffer`` (BatchNorm running statistics) and
``offset`` is a byte offset into the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import arrow
import numpy as np

from .errors import IntegrityError
from .models import Network, spec_hash

MAGIC = b"QKDC"
VERSION = 1
PREFIX = struct.Struct("<4sHI")
DIGEST_SIZE = 32
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    spec: dict
    spec_hash: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def header(self) -> dict:
        return {"version": self.version, "spec": self.spec, "spec_hash": self.spec_hash, "metadata": self.metadata}


def encode(checkpoint: Checkpoint) -> bytes:
    directory = []
    chunks: list[bytes] = []
    offset = 0
    for kind, tensors in (("param", checkpoint.params), ("buffer", checkpoint.buffers)):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
            directory.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "spec": checkpoint.spec,
        "spec_hash": checkpoint.spec_hash,
        "metadata": checkpoint.metadata,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < PREFIX.size + DIGEST_SIZE:
        raise IntegrityError(f"checkpoint {source} is truncated ({len(blob)} bytes)")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"checkpoint {source} failed its checksum (truncated or corrupted)")
    magic, version, header_len = PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise IntegrityError(f"checkpoint {source} has bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"checkpoint {source} has unsupported version {version}")
    header_end = PREFIX.size + header_len
    if header_end > len(body):
        raise IntegrityError(f"checkpoint {source} header runs past end of file")
    try:
        header = json.loads(body[PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint {source} header is not valid JSON: {exc}") from exc
    payload = memoryview(body)[header_end:]
    try:
        ckpt = Checkpoint(
            spec=header["spec"], spec_hash=header["spec_hash"], metadata=header.get("metadata", {}), version=version
        )
        for entry in header["tensors"]:
            start = entry["offset"]
            stop = start + entry["count"] * PAYLOAD_DTYPE.itemsize
            if stop > len(payload):
                raise IntegrityError(f"checkpoint {source} tensor {entry['name']} runs past end of payload")
            arr = np.frombuffer(payload[start:stop], dtype=PAYLOAD_DTYPE).astype(np.float32).reshape(entry["shape"])
            target = ckpt.params if entry["kind"] == "param" else ckpt.buffers
            target[entry["name"]] = arr
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise IntegrityError(f"checkpoint {source} header is malformed ({type(exc).__name__}: {exc})") from exc
    return ckpt


def from_model(model: Network, metadata: dict | None = None, overrides: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Snapshot ``model``; ``overrides`` replaces named weights (quantized students)."""
    overrides = overrides or {}
    params = {}
    for name, p in model.named_parameters().items():
        layer = name.rsplit(".", 1)[0]
        params[name] = np.array(overrides.get(layer, p.data) if name.endswith(".weight") else p.data, copy=True)
    meta = {"created_at": arrow.utcnow().isoformat()}
    meta.update(metadata or {})
    return Checkpoint(
        spec=model.spec.to_dict(),
        spec_hash=spec_hash(model.spec),
        params=params,
        buffers={name: np.array(b, copy=True) for name, b in model.named_buffers().items()},
        metadata=meta,
    )


def save(
    model: Network,
    path: str | os.PathLike,
    metadata: dict | None = None,
    overrides: dict[str, np.ndarray] | None = None,
) -> Path:
    ckpt = from_model(model, metadata, overrides)
    blob = encode(ckpt)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, out)
    print(f"[ckpt] wrote path={out} tensors={len(ckpt.params) + len(ckpt.buffers)} bytes={len(blob)}")
    return out


def load(path: str | os.PathLike) -> Checkpoint:
    p = Path(path)
    return decode(p.read_bytes(), source=str(p))
