"""Checkpoint files: a JSON manifest followed by raw little-endian tensors.

Layout::

    b"MT3CKPT\\n"              8-byte magic
    <u8 manifest length>       little-endian uint64
    manifest (UTF-8 JSON)      format version, model config, tensor table, metadata
    payload                    concatenated tensor bytes, offsets relative to payload start

Tensor sections: ``params`` (with group tags), ``momentum`` (optimizer
velocity) and ``target`` (EMA target of joint training).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ModelConfig, ParameterSet
from .trainers import TrainState

MAGIC = b"MT3CKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: TrainState
    metadata: dict = field(default_factory=dict)


def _entries(section: str, arrays: dict, groups: dict | None):
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"{section}/{name}: unsupported dtype {arr.dtype}")
        yield {"section": section, "name": name, "group": groups[name] if groups else None,
               "shape": list(arr.shape), "dtype": _DTYPES[arr.dtype.name]}, \
            np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()


def save(path, ckpt: Checkpoint) -> None:
    st = ckpt.state
    groups = st.params.groups
    sections = [("params", st.params.arrays(), groups),
                ("momentum", dict(st.opt_state), None)]
    if st.target is not None:
        sections.append(("target", st.target.arrays(), groups))
    table, blobs, offset = [], [], 0
    for section, arrays, grp in sections:
        for entry, blob in _entries(section, arrays, grp):
            entry.update(offset=offset, nbytes=len(blob))
            table.append(entry)
            blobs.append(blob)
            offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, "model_config": ckpt.model_config.to_dict(),
                "regime": st.regime, "step": st.step, "tensors": table,
                "metadata": ckpt.metadata}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest, raw[16 + n:]


def load(path) -> Checkpoint:
    manifest, payload = read_manifest(path)
    sections: dict[str, dict] = {"params": {}, "momentum": {}, "target": {}}
    groups: dict[str, str] = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['section']}/{e['name']} runs past the file end")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=e["dtype"]).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        sections[e["section"]][e["name"]] = arr
        if e["section"] == "params":
            groups[e["name"]] = e["group"]
    params = ParameterSet.from_arrays(sections["params"], groups)
    target = ParameterSet.from_arrays(sections["target"], groups) if sections["target"] else None
    state = TrainState(manifest["regime"], params, sections["momentum"], target, manifest["step"])
    return Checkpoint(ModelConfig.from_dict(manifest["model_config"]), state, manifest["metadata"])


def summary(path) -> dict:
    """Human-oriented digest of a checkpoint without decoding the payload."""
    manifest, payload = read_manifest(path)
    per_group: dict[str, int] = {}
    for e in manifest["tensors"]:
        if e["section"] == "params":
            per_group[e["group"]] = per_group.get(e["group"], 0) + int(np.prod(e["shape"]))
    return {"format_version": manifest["format_version"], "regime": manifest["regime"],
            "step": manifest["step"], "model_config": manifest["model_config"],
            "parameters_per_group": per_group, "tensor_count": len(manifest["tensors"]),
            "payload_bytes": len(payload), "metadata": manifest["metadata"]}
