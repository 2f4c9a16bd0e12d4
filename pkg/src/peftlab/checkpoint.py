"""Checkpoint files: a JSON manifest followed by a little-endian float64 payload.

Layout::

    8 bytes   magic b"PEFTLAB1"
    8 bytes   manifest length n (uint64, little-endian)
    n bytes   UTF-8 JSON manifest
    ...       payload: tensors back to back as '<f8', row-major

The manifest holds ``kind`` ("model" or "adapter"), the model config, the
adapter type and config for adapter files, and for each tensor its
``name``, ``shape`` and byte ``offset`` into the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import DataError
from .model import EncoderModel, ModelConfig
from .peft import LoraState, Ia3State, adapter_config_from_dict, inject_ia3, inject_lora
from .tensor import Tensor

MAGIC = b"PEFTLAB1"


def _write(path, manifest: dict, tensors: dict[str, Tensor]):
    entries, offset, chunks = [], 0, []
    for name, t in tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = dict(manifest, tensors=entries, dtype="float64", byteorder="little", payload_bytes=offset)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Manifest and name -> array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a peftlab checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt checkpoint manifest") from None
    payload = memoryview(blob)[16 + n :]
    if len(payload) != manifest.get("payload_bytes"):
        raise DataError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return manifest, arrays


def save_model(path, model: EncoderModel):
    """Base weights only; an attached adapter is not included."""
    _write(path, {"kind": "model", "config": model.config.to_dict()}, model.params)


def load_model(path) -> EncoderModel:
    manifest, arrays = read_checkpoint(path)
    if manifest.get("kind") != "model":
        raise DataError(f"{path}: expected a model checkpoint, found {manifest.get('kind')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    params = {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}
    return EncoderModel(config, params)


def save_adapter(path, model: EncoderModel):
    state = model.adapter
    if state is None:
        raise DataError("model has no adapter to save")
    manifest = {
        "kind": "adapter",
        "adapter": state.kind,
        "adapter_config": state.config.to_dict(),
        "config": model.config.to_dict(),
    }
    _write(path, manifest, state.params)


def load_adapter(path, model: EncoderModel) -> EncoderModel:
    """Inject the stored adapter into ``model`` (in place) and load its weights."""
    manifest, arrays = read_checkpoint(path)
    if manifest.get("kind") != "adapter":
        raise DataError(f"{path}: expected an adapter checkpoint, found {manifest.get('kind')!r}")
    if manifest["config"] != model.config.to_dict():
        raise DataError(f"{path}: adapter was trained for a different model config")
    cfg = adapter_config_from_dict(manifest["adapter"], manifest["adapter_config"])
    if manifest["adapter"] == "lora":
        inject_lora(model, cfg)
    else:
        inject_ia3(model, cfg)
    state: LoraState | Ia3State = model.adapter
    if set(arrays) != set(state.params):
        raise DataError(f"{path}: adapter tensors do not match the injected layout")
    for name, a in arrays.items():
        state.params[name].data = a
    return model
