"""MPK1 parameter containers.

Layout (little-endian)::

    b"MPK1"
    u16 kind length, kind (UTF-8)          # model-kind tag
    u32 entry count
    per entry: u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
               float32 payload

Optimizer state is stored as extra entries under ``optim/``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, TruncatedFileError
from .optim import OptimizerState

MAGIC = b"MPK1"


def save_arrays(path, arrays: dict[str, np.ndarray], kind: str = "model",
                optimizer: OptimizerState | None = None) -> None:
    entries = dict(arrays)
    if optimizer is not None:
        entries.update(optimizer_entries(optimizer))
    kind_b = kind.encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", len(kind_b)), kind_b, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an MPK1 file")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (klen,) = struct.unpack("<H", take(2))
    kind = take(klen).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return kind, arrays


def optimizer_entries(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {
        "optim/step": np.array(state.step, dtype=np.float32),
        "optim/hyper": np.array([state.lr, state.beta1, state.beta2, state.eps, state.weight_decay],
                                dtype=np.float32),
    }
    for name, m in state.m.items():
        out[f"optim/m/{name}"] = m
        out[f"optim/v/{name}"] = state.v[name]
    return out


def split_optimizer(arrays: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], OptimizerState | None]:
    """Separate model entries from a serialized optimizer state, if present."""
    model = {k: v for k, v in arrays.items() if not k.startswith("optim/")}
    if "optim/step" not in arrays:
        return model, None
    lr, b1, b2, eps, wd = (float(x) for x in arrays["optim/hyper"])
    state = OptimizerState(lr, b1, b2, eps, wd, step=int(arrays["optim/step"]))
    for k, v in arrays.items():
        if k.startswith("optim/m/"):
            name = k[len("optim/m/"):]
            state.m[name] = v.copy()
            state.v[name] = arrays[f"optim/v/{name}"].copy()
    return model, state
