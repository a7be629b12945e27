"""Tensor container used for every checkpoint the package writes.

Layout: one line of UTF-8 JSON (the header) terminated by ``\\n``, followed by
the raw little-endian tensor payloads back to back. The header holds::

    {"format": "asmxlate-ckpt", "version": 1, "kind": "...", "meta": {...},
     "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}

``offset`` is relative to the first payload byte. Keys are sorted and tensors
are written in name order, so equal contents always give equal files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT = "asmxlate-ckpt"
VERSION = 1

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8"), "int64": (torch.int64, "<i8")}


class CheckpointError(ValueError):
    pass


def dumps(kind: str, meta: Mapping, tensors: Mapping[str, torch.Tensor]) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta, "tensors": index}
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)


def save(path: str | Path, kind: str, meta: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(dumps(kind, meta, tensors))


def load(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    head, sep, payload = blob.partition(b"\n")
    try:
        header = json.loads(head.decode("utf-8")) if sep else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    tensors = {}
    for entry in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return header, tensors
