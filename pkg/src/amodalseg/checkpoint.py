"""Binary checkpoint container.

Layout: ``b"AISD"``, u32 version, u64 little-endian header length, a UTF-8
JSON header mapping tensor name to ``{dtype, shape, byte_offset}`` (plus a
``__metadata__`` entry), then contiguous little-endian float32 blobs.
"""
import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = b"AISD"
FORMAT_VERSION = 1
META_KEY = "__metadata__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], metadata: dict) -> None:
    header = {META_KEY: metadata}
    blobs, offset = [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "byte_offset": offset}
        blobs.append(raw)
        offset += len(raw)
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    metadata = header.pop(META_KEY, {})
    tensors = {}
    for name, entry in header.items():
        if entry["dtype"] != "f32":
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["byte_offset"]
        if start + 4 * count > len(data):
            raise CheckpointError(f"{path}: tensor {name} runs past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, metadata


def prefixed(state: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(tensors: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def weights_digest(state: Dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
