"""
MIXD checkpoint files (little-endian):

    magic "MIXD" | version u32 | architecture str | K u32
    | n_networks u32 | n_networks x (name str, layout str)
    | n_tensors u32  | n_tensors x (name str, rank u32, dims u32[rank], f64 data)
    | CRC32 u32 over every preceding byte

``str`` is a u32 byte length followed by UTF-8 bytes. Tensor names are
``<network>/<parameter>``. Layouts describe the layer stack so networks can be
rebuilt before their parameters are loaded.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .numerics import Network

MAGIC = b"MIXD"
VERSION = 1


class CheckpointCorruptError(ValueError):
    pass


@dataclass
class Checkpoint:
    architecture: str
    K: int
    networks: dict[str, Network]


def _str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _str(ckpt.architecture), struct.pack("<I", ckpt.K)]
    parts.append(struct.pack("<I", len(ckpt.networks)))
    for name, net in ckpt.networks.items():
        parts += [_str(name), _str(net.layout)]
    tensors = [(f"{name}/{p.name}", p.value) for name, net in ckpt.networks.items() for p in net.parameters()]
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors:
        parts += [_str(name), struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape),
                  np.ascontiguousarray(value, dtype="<f8").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointCorruptError(f"truncated checkpoint at byte {self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode()


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 8:
        raise CheckpointCorruptError("checkpoint too short")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("checkpoint CRC32 mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointCorruptError("bad checkpoint magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointCorruptError(f"unsupported checkpoint version {version}")
    arch, K = r.str(), r.u32()
    networks = {}
    for _ in range(r.u32()):
        name, layout = r.str(), r.str()
        networks[name] = Network.from_layout(layout)
    state: dict[str, dict[str, np.ndarray]] = {name: {} for name in networks}
    for _ in range(r.u32()):
        full = r.str()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        data = np.frombuffer(r.take(8 * int(np.prod(dims))), dtype="<f8").reshape(dims)
        net_name, _, pname = full.partition("/")
        if net_name not in state:
            raise CheckpointCorruptError(f"tensor {full} belongs to no network")
        state[net_name][pname] = data.astype(np.float64)
    if r.off != len(body):
        raise CheckpointCorruptError(f"{len(body) - r.off} trailing bytes before CRC")
    for name, net in networks.items():
        try:
            net.load_state(state[name])
        except (KeyError, ValueError) as err:
            raise CheckpointCorruptError(f"network {name}: {err}") from err
    return Checkpoint(arch, K, networks)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
