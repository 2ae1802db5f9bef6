"""Weight checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then the weight arrays as little-endian 32-bit floats concatenated
in canonical layer order. The header records the network spec, array
shapes, the fitted scaler, the dropout rate and the seeds/config needed to
rebuild the dataset split, so a checkpoint is self-describing.

The header is serialised with sorted keys and no timestamps: identical
training runs produce byte-identical checkpoint files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .dataset import StandardScaler
from .errors import DataError
from .nn import (
    AvgPool2d,
    Concat,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    NetworkSpec,
    Relu,
    WeightSet,
)

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"GCWEIGHT"
_FORMAT_VERSION = 1

_LAYER_KINDS = {
    "conv2d": Conv2d,
    "dense": Dense,
    "relu": Relu,
    "avgpool2d": AvgPool2d,
    "dropout": Dropout,
    "flatten": Flatten,
    "concat": Concat,
}
_KIND_NAMES = {cls: name for name, cls in _LAYER_KINDS.items()}


def _layer_to_dict(layer) -> dict:
    d = {"kind": _KIND_NAMES[type(layer)]}
    for f in getattr(layer, "__dataclass_fields__", {}):
        d[f] = getattr(layer, f)
    return d


def _layer_from_dict(d: dict):
    kind = d.pop("kind")
    return _LAYER_KINDS[kind](**d)


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "patch_layers": [_layer_to_dict(l) for l in spec.patch_layers],
        "loc_layers": [_layer_to_dict(l) for l in spec.loc_layers],
        "head_layers": [_layer_to_dict(l) for l in spec.head_layers],
        "patch_size": spec.patch_size,
        "in_channels": spec.in_channels,
        "loc_features": spec.loc_features,
        "dropout_rate": spec.dropout_rate,
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        patch_layers=tuple(_layer_from_dict(dict(l)) for l in d["patch_layers"]),
        loc_layers=tuple(_layer_from_dict(dict(l)) for l in d["loc_layers"]),
        head_layers=tuple(_layer_from_dict(dict(l)) for l in d["head_layers"]),
        patch_size=d["patch_size"],
        in_channels=d["in_channels"],
        loc_features=d["loc_features"],
        dropout_rate=d["dropout_rate"],
    )


@dataclass
class Checkpoint:
    spec: NetworkSpec
    weights: WeightSet
    scaler: StandardScaler | None
    meta: dict


def save_checkpoint(path, spec: NetworkSpec, weights: WeightSet,
                    scaler: StandardScaler | None = None,
                    meta: dict | None = None) -> None:
    header = {
        "format": _FORMAT_VERSION,
        "network": spec_to_dict(spec),
        "arrays": [list(a.shape) for a in weights.arrays],
        "scaler": scaler.to_dict() if scaler is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in weights.arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataError(f"{path}: not a weight checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format") != _FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format {header.get('format')}")
        spec = spec_from_dict(header["network"])
        arrays = []
        for shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise DataError(f"{path}: truncated weight data")
            arrays.append(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after weight data")
    weights = WeightSet(arrays)
    from .nn import param_count
    if weights.size() != param_count(spec):
        raise DataError(
            f"{path}: weight count {weights.size()} does not match the "
            f"network spec ({param_count(spec)} parameters)"
        )
    scaler = None
    if header.get("scaler") is not None:
        scaler = StandardScaler.from_dict(header["scaler"])
    return Checkpoint(spec=spec, weights=weights, scaler=scaler, meta=header.get("meta", {}))
