"""Self-describing float64 weight files.

Layout: the 8-byte magic ``AZWT0001``, a little-endian uint64 header length,
a UTF-8 JSON header (``config``, ``meta`` and the ordered tensor table), then
every tensor as little-endian row-major float64 bytes in table order. Offsets
in the table count from the first byte after the header. A sibling
``<file>.manifest.txt`` lists ``name shape offset nbytes`` per line.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"AZWT0001"


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], config: dict, meta: dict | None = None) -> None:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    lines = [f"{t['name']} {'x'.join(str(s) for s in t['shape']) or 'scalar'} {t['offset']} {t['nbytes']}" for t in table]
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    """Returns ``(tensors, config, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a weight file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    tensors = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(data[start : start + t["nbytes"]], dtype="<f8").reshape(t["shape"])
        tensors[t["name"]] = torch.from_numpy(arr.astype(np.float64))
    return tensors, header["config"], header["meta"]


def prefixed(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def unprefixed(prefix: str, tensors: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    head = prefix + "."
    return {k[len(head) :]: v for k, v in tensors.items() if k.startswith(head)}
