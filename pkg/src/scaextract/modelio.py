"""Model file format.

Layout::

    b"SCAXMODEL\\n"                  magic, version follows in the header
    uint64 little-endian            header length in bytes
    header                          UTF-8 JSON: version, precision, input_shape,
                                    flatten order, layers (kind, hyperparams,
                                    arrays: name/shape/offset/count)
    blob                            little-endian raw arrays in the declared precision

Offsets are counted in elements from the start of the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Layer, ModelError, ModelGraph, dtype_of

MAGIC = b"SCAXMODEL\n"
VERSION = 1


class ModelFileError(ModelError):
    pass


def save_model(model: ModelGraph, path, metadata: dict | None = None) -> None:
    dtype = np.dtype(model.dtype).newbyteorder("<")
    layers, chunks, offset = [], [], 0
    for layer in model.layers:
        entry = {"kind": layer.kind, "stride": layer.stride, "padding": layer.padding,
                 "groups": layer.groups, "arrays": []}
        for name, arr in layer.arrays().items():
            arr = np.ascontiguousarray(arr, dtype=dtype)
            entry["arrays"].append({"name": name, "shape": list(arr.shape), "offset": offset,
                                    "count": int(arr.size)})
            chunks.append(arr.tobytes())
            offset += arr.size
        layers.append(entry)
    header = {
        "version": VERSION,
        "precision": model.precision,
        "input_shape": list(model.input_shape),
        "flatten_order": "row-major (channel, row, column)",
        "layers": layers,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    raw = f.read(8)
    if len(raw) != 8:
        raise ModelFileError("truncated header length")
    (n,) = struct.unpack("<Q", raw)
    try:
        header = json.loads(f.read(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFileError(f"malformed header: {e}") from None
    if header.get("version") != VERSION:
        raise ModelFileError(f"unsupported model file version {header.get('version')}")
    return header


def load_model(path) -> ModelGraph:
    with open(Path(path), "rb") as f:
        header = _read_header(f)
        blob = f.read()
    try:
        dtype = np.dtype(dtype_of(header["precision"])).newbyteorder("<")
        data = np.frombuffer(blob, dtype=dtype)
        layers = []
        for entry in header["layers"]:
            arrays = {}
            for a in entry["arrays"]:
                end = a["offset"] + a["count"]
                if end > data.size or a["count"] != int(np.prod(a["shape"], dtype=np.int64)):
                    raise ModelFileError(f"array {a['name']} exceeds blob or has inconsistent shape")
                arrays[a["name"]] = data[a["offset"]:end].reshape(a["shape"]).astype(dtype.newbyteorder("="))
            layers.append(Layer(entry["kind"], stride=entry.get("stride", 1), padding=entry.get("padding", 0),
                                groups=entry.get("groups", 1), **arrays))
        return ModelGraph(layers, header["input_shape"], header["precision"])
    except (KeyError, TypeError) as e:
        raise ModelFileError(f"malformed model file: {e}") from None
