"""Checkpoint files: versioned header, config echo, named float64 blobs.

Layout (all text lines are utf-8, newline terminated):

    ARTOKCKPT v1 <config_hash>
    <config as one canonical JSON line>
    <blob count>
    then per blob: "<name> <dim0> <dim1> ..." line followed by the raw
    little-endian float64 bytes in C order.

Round-trips are bit-exact: loading and saving again reproduces the file.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"ARTOKCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, arrays: dict, config_hash: str = "none") -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" v%d %s\n" % (VERSION, config_hash.encode()))
        fh.write(json.dumps(config, sort_keys=True).encode() + b"\n")
        fh.write(b"%d\n" % len(arrays))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {dims}".rstrip().encode() + b"\n")
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple:
    """Returns (config dict, {name: float64 array}, config_hash)."""
    with open(path, "rb") as fh:
        head = fh.readline().rstrip(b"\n").split(b" ")
        if len(head) != 3 or head[0] != MAGIC or head[1] != b"v%d" % VERSION:
            raise CheckpointError(f"bad checkpoint header {head!r}")
        config_hash = head[2].decode()
        config = json.loads(fh.readline())
        count = int(fh.readline())
        arrays = {}
        for _ in range(count):
            parts = fh.readline().rstrip(b"\n").decode().split(" ")
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            nbytes = int(np.prod(dims)) * 8 if dims else 8
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated blob {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return config, arrays, config_hash


def params_to_arrays(params: dict, namespace: str = "") -> dict:
    prefix = namespace + "." if namespace else ""
    return {prefix + k: t.data for k, t in params.items()}


def arrays_to_params(arrays: dict, namespace: str = "") -> dict:
    from .autodiff import Tensor
    prefix = namespace + "." if namespace else ""
    out = {}
    for k, v in arrays.items():
        if k.startswith(prefix):
            out[k[len(prefix):]] = Tensor(v.copy(), requires_grad=True)
    return out
