"""Parameter checkpoints: a flat named-tensor archive.

Layout: one JSON header line carrying the manifest plus (name, shape) pairs
in sorted name order, a blank separator line, then the raw little-endian
float64 buffers concatenated in the same order.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import ManifestError, ParseError
from .layers import ParamStore

_MAGIC = "routerefine-checkpoint-v1"


def save_checkpoint(path, params: ParamStore, manifest: dict):
    names = sorted(params.params)
    header = {
        "format": _MAGIC,
        "manifest": manifest,
        "tensors": [[name, list(params[name].shape)] for name in names],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for name in names:
            f.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: bad checkpoint header: {exc}") from exc
        if header.get("format") != _MAGIC:
            raise ParseError(f"{path}: not a {_MAGIC} file")
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ParseError(f"{path}: truncated buffer for {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header["manifest"], tensors


def restore_into(params: ParamStore, tensors: dict[str, np.ndarray]):
    ours = set(params.params)
    theirs = set(tensors)
    if ours != theirs:
        missing = sorted(ours - theirs)[:3]
        extra = sorted(theirs - ours)[:3]
        raise ManifestError(f"parameter name mismatch: missing {missing}, "
                            f"unexpected {extra}")
    for name, value in tensors.items():
        p = params[name]
        if tuple(p.shape) != tuple(value.shape):
            raise ManifestError(f"shape mismatch for {name!r}: "
                                f"{p.shape} vs {value.shape}")
        p.data = value.astype(np.float64).copy()
