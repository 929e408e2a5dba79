"""Checkpoint directories: ``meta.json`` + ``arrays.bin`` + ``index.json``.

``arrays.bin`` is the concatenation of every array as little-endian float32,
in sorted name order; ``index.json`` maps each name to its byte offset,
shape and original dtype so integer buffers and RNG states round-trip.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1
META_FILE = "meta.json"
ARRAYS_FILE = "arrays.bin"
INDEX_FILE = "index.json"


class CheckpointError(RuntimeError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptIndexError(CheckpointError):
    pass


class MissingArrayError(CheckpointError):
    pass


def save_checkpoint(path: str | Path, arrays: Mapping[str, torch.Tensor], meta: Mapping) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(path / ARRAYS_FILE, "wb") as fh:
        for name in sorted(arrays):
            t = arrays[name].detach().cpu()
            data = t.to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
            fh.write(data.tobytes())
            index[name] = {"offset": offset, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
            offset += data.nbytes
    (path / INDEX_FILE).write_text(json.dumps(index, indent=1, sort_keys=True))
    full_meta = dict(meta)
    full_meta["version"] = FORMAT_VERSION
    (path / META_FILE).write_text(json.dumps(full_meta, indent=2, sort_keys=True, default=str))
    return path


def read_meta(path: str | Path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / META_FILE).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptIndexError(f"{path / META_FILE}: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {meta.get('version')!r}, expected {FORMAT_VERSION}")
    return meta


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    meta = read_meta(path)
    try:
        index = json.loads((path / INDEX_FILE).read_text())
        blob = (path / ARRAYS_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptIndexError(f"incomplete checkpoint at {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptIndexError(f"{path / INDEX_FILE}: {exc}") from exc
    arrays = {}
    for name, entry in index.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            dtype = getattr(torch, entry.get("dtype", "float32"))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise CorruptIndexError(f"bad index entry for {name!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise CorruptIndexError(f"array {name!r} extends past the end of {ARRAYS_FILE}")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32)
        arrays[name] = torch.from_numpy(data.reshape(shape).copy()).to(dtype)
    return arrays, meta


def module_arrays(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: nn.Module, arrays: Mapping[str, torch.Tensor]) -> None:
    state = module.state_dict()
    missing = [k for k in state if f"{prefix}.{k}" not in arrays]
    if missing:
        raise MissingArrayError(f"checkpoint lacks {prefix}.{missing[0]} (and {len(missing) - 1} more)")
    module.load_state_dict({k: arrays[f"{prefix}.{k}"].to(state[k].dtype) for k in state})


def has_prefix(arrays: Mapping[str, torch.Tensor], prefix: str) -> bool:
    return any(k.startswith(prefix + ".") for k in arrays)
