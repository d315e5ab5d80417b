"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "RADG" | u32 version | block(params) | block(opt) | block(rng) | block(meta)

where block = u32 tensor count followed by tensor records:

    u16 name length | name bytes (utf-8) | u8 dtype code | u8 rank |
    u32 dims[rank] | payload (little-endian)

dtype codes: 0=f32, 1=f64, 2=u64, 3=u8 (raw bytes, e.g. JSON), 4=i64.
The optimizer block holds Adam moments ("m.<param>", "v.<param>") and the
step counter; the rng block holds the training generator state as JSON; the
meta block holds the config snapshot. Records are written in sorted name
order so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointMismatchError, DataIOError

MAGIC = b"RADG"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.int64): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_tensor(buf: bytearray, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise CheckpointMismatchError(f"tensor name too long: {name[:40]}...")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointMismatchError(f"unsupported dtype {arr.dtype} for {name}")
    buf += struct.pack("<H", len(nb))
    buf += nb
    buf += struct.pack("<BB", code, arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def _write_block(buf: bytearray, tensors: dict[str, np.ndarray]):
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        _write_tensor(buf, name, tensors[name])


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise CheckpointMismatchError("truncated checkpoint")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]

    def tensor(self):
        name = self.take(self.u16()).decode("utf-8")
        code, rank = self.u8(), self.u8()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointMismatchError(f"unknown dtype code {code} for {name}")
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
        return name, arr.astype(dtype).reshape(dims)

    def block(self):
        return dict(self.tensor() for _ in range(self.u32()))


@dataclass
class Checkpoint:
    version: int
    params: dict
    opt_state: dict
    rng_state: dict | None
    config: dict

    @property
    def step(self) -> int:
        return int(self.opt_state["step"][0]) if "step" in self.opt_state else 0


def rng_state_to_tensors(state: dict) -> dict[str, np.ndarray]:
    # json keeps arbitrary-precision ints, so the 128-bit PCG64 words survive
    payload = json.dumps(state, sort_keys=True).encode("utf-8")
    return {"rng_json": np.frombuffer(payload, dtype=np.uint8).copy()}


def rng_state_from_tensors(tensors: dict) -> dict | None:
    if "rng_json" not in tensors:
        return None
    return json.loads(tensors["rng_json"].tobytes().decode("utf-8"))


def save_checkpoint(path, params: dict[str, np.ndarray], opt_state: dict[str, np.ndarray],
                    rng_state: dict | None, config: dict):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    _write_block(buf, params)
    _write_block(buf, opt_state)
    _write_block(buf, rng_state_to_tensors(rng_state) if rng_state is not None else {})
    cfg_payload = json.dumps(config, sort_keys=True).encode("utf-8")
    _write_block(buf, {"config_json": np.frombuffer(cfg_payload, dtype=np.uint8).copy()})
    try:
        with open(path, "wb") as f:
            f.write(bytes(buf))
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    if data[:4] != MAGIC:
        raise CheckpointMismatchError(f"{path}: bad magic {data[:4]!r}")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointMismatchError(f"{path}: unsupported version {version}")
    params = r.block()
    opt_state = r.block()
    rng_state = rng_state_from_tensors(r.block())
    meta = r.block()
    config = json.loads(meta["config_json"].tobytes().decode("utf-8")) if "config_json" in meta else {}
    return Checkpoint(version=version, params=params, opt_state=opt_state,
                      rng_state=rng_state, config=config)
