"""RCFT tensor files and multi-tensor checkpoints.

RCFT record layout (little-endian throughout):

    magic   4 bytes  b"RCFT"
    dtype   1 byte   0 = float32, 1 = float64
    rank    1 byte
    dims    rank x 8-byte unsigned
    values  raw little-endian floats, row-major

A checkpoint is a text manifest followed by concatenated RCFT records:

    RCKP <count>\n
    <name> <d0>x<d1>x...\n   (one line per tensor, in record order)
    <records...>

Round-trips are byte-exact: values are written from and read into the
original bit patterns.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import BinaryIO, Dict, Iterable, Tuple, Union

import numpy as np

from .tensor import Tensor

__all__ = [
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
    "save_checkpoint",
    "load_checkpoint",
    "assign_checkpoint",
]

MAGIC = b"RCFT"
CHECKPOINT_MAGIC = "RCKP"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(fh: BinaryIO, tensor: Union[Tensor, np.ndarray]) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"RCFT supports float32/float64 only, got {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad RCFT magic {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown RCFT dtype code {code}")
    dims = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated RCFT record")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("="), copy=False))


def save_tensor(path, tensor: Union[Tensor, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, tensor)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, named_tensors: Iterable[Tuple[str, Union[Tensor, np.ndarray]]]) -> None:
    items = list(named_tensors)
    for name, _ in items:
        if " " in name or "\n" in name:
            raise ValueError(f"checkpoint tensor name may not contain whitespace: {name!r}")
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {len(items)}\n".encode("utf-8"))
        for name, t in items:
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            fh.write(f"{name} {dims}\n".encode("utf-8"))
        for _, t in items:
            write_tensor(fh, t)


def _read_line(fh: BinaryIO) -> str:
    buf = bytearray()
    while True:
        ch = fh.read(1)
        if not ch or ch == b"\n":
            break
        buf.extend(ch)
    return buf.decode("utf-8")


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        header = _read_line(fh).split()
        if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint header in {path}")
        count = int(header[1])
        names = []
        shapes = []
        for _ in range(count):
            line = _read_line(fh).split()
            names.append(line[0])
            shapes.append(() if line[1] == "scalar" else tuple(int(d) for d in line[1].split("x")))
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in zip(names, shapes):
            arr = read_tensor(fh)
            if arr.shape != shape:
                raise ValueError(
                    f"checkpoint record {name} has shape {arr.shape}, manifest says {shape}"
                )
            out[name] = arr
    return out


def assign_checkpoint(named_params: Iterable[Tuple[str, Tensor]],
                      loaded: Dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into existing parameter tensors, strictly matched."""
    params = OrderedDict(named_params)
    if set(params) != set(loaded):
        missing = sorted(set(params) - set(loaded))
        extra = sorted(set(loaded) - set(params))
        raise ValueError(
            f"checkpoint does not match model: missing={missing[:5]} extra={extra[:5]}"
        )
    for name, tensor in params.items():
        arr = loaded[name]
        if arr.shape != tensor.shape:
            raise ValueError(
                f"checkpoint tensor {name} shape {arr.shape} != model shape {tensor.shape}"
            )
        if arr.dtype != tensor.dtype:
            raise ValueError(
                f"checkpoint tensor {name} dtype {arr.dtype} != model dtype {tensor.dtype}"
            )
        tensor.data[...] = arr
