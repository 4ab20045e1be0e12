"""Binary checkpoint format.

Layout::

    b"ICKD" | u32 version | u64 metadata length | metadata (UTF-8 JSON) | payload

The metadata is canonical JSON (sorted keys, no whitespace) holding the
model spec, seed, epoch, dataset fingerprint and an index of named tensors
with shape, byte offset and dtype.  The payload stores every tensor as
little-endian float32 in index order.  Saving a loaded checkpoint
reproduces the original bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError
from .nn import Model, ModelSpec, TransferLayer, build_model

MAGIC = b"ICKD"
VERSION = 1
DISTILL_PREFIX = "distill/"
_HEADER = struct.Struct("<4sIQ")


class Checkpoint:
    def __init__(self, meta: dict, tensors: "OrderedDict[str, np.ndarray]"):
        self.meta = dict(meta)
        self.tensors = OrderedDict((k, np.asarray(v, dtype="<f4")) for k, v in tensors.items())

    @classmethod
    def from_model(cls, model: Model, transfer_layers=None, **meta) -> "Checkpoint":
        tensors = OrderedDict(model.state_arrays())
        for stage, layer in sorted((transfer_layers or {}).items()):
            for name, arr in layer.state_arrays().items():
                tensors[f"{DISTILL_PREFIX}stage{stage}.{name}"] = arr
        meta = {"model": model.spec.to_dict(), **meta}
        return cls(meta, tensors)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.meta["model"])

    def to_bytes(self) -> bytes:
        index, offset = [], 0
        for name, arr in self.tensors.items():
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "<f4"})
            offset += arr.size * 4
        meta = {k: v for k, v in self.meta.items() if k != "tensors"}
        meta["tensors"] = index
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())
        return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEADER.size:
            raise FormatError("checkpoint is truncated")
        magic, version, meta_len = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError("not an ICKD checkpoint (bad magic)")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start = _HEADER.size + meta_len
        try:
            meta = json.loads(raw[_HEADER.size : start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
        payload = raw[start:]
        expected = sum(int(np.prod(t["shape"], dtype=np.int64)) * 4 for t in meta["tensors"])
        if len(payload) != expected:
            raise FormatError(f"payload has {len(payload)} bytes, index describes {expected}")
        tensors = OrderedDict()
        for entry in meta["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        meta.pop("tensors")
        return cls(meta, tensors)

    def save(self, path) -> None:
        with open(os.fspath(path), "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(os.fspath(path), "rb") as fh:
            return cls.from_bytes(fh.read())

    def build(self) -> Model:
        """Instantiate the stored model (transfer layers are not part of it)."""
        model = build_model(self.spec, 0)
        model.load_state_arrays({k: v for k, v in self.tensors.items() if not k.startswith(DISTILL_PREFIX)})
        return model

    def transfer_layers(self) -> dict[int, TransferLayer]:
        layers = {}
        stages = sorted(
            {int(k[len(DISTILL_PREFIX) :].split(".")[0][len("stage") :]) for k in self.tensors if k.startswith(DISTILL_PREFIX)}
        )
        for stage in stages:
            prefix = f"{DISTILL_PREFIX}stage{stage}."
            arrays = {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}
            c_out, c_in = arrays["conv.weight"].shape[:2]
            layer = TransferLayer(c_in, c_out)
            layer.load_state_arrays(arrays)
            layers[stage] = layer
        return layers

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
