"""Binary formats for parameter vectors, checkpoints and inter-agent messages.

Every integer and real is little-endian. A parameter vector is encoded as::

    b"CHPV" | fingerprint (8 bytes) | length (uint64) | values (float64 x length)

where the fingerprint is ``ModelArchitecture.fingerprint()``. Checkpoints and
messages wrap one or more such blocks behind their own fixed headers.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArchitectureError, UsageError
from .nn import AdamState, ModelArchitecture, check_params

_F64 = np.dtype("<f8")
_PV_MAGIC = b"CHPV"
_PV_HEADER = struct.Struct("<4s8sQ")
_CKPT_MAGIC = b"CHCK"
_CKPT_HEADER = struct.Struct("<4sQqqqddddq")
_MSG_MAGIC = b"CHMS"
_MSG_HEADER = struct.Struct("<4sqqd8s")


def checksum(params: np.ndarray) -> str:
    """Short hex digest of the exact float64 bytes of ``params``."""
    data = np.ascontiguousarray(params, dtype=_F64).tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def encode_params(params: np.ndarray, arch: ModelArchitecture) -> bytes:
    params = check_params(params, arch)
    return (_PV_HEADER.pack(_PV_MAGIC, arch.fingerprint(), params.shape[0])
            + np.ascontiguousarray(params, dtype=_F64).tobytes())


def decode_params(buf: bytes, arch: ModelArchitecture, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode a parameter block at ``offset``; returns the vector and the next offset."""
    if len(buf) - offset < _PV_HEADER.size:
        raise UsageError("truncated parameter block")
    magic, fp, n = _PV_HEADER.unpack_from(buf, offset)
    if magic != _PV_MAGIC:
        raise UsageError("not a parameter block")
    if fp != arch.fingerprint() or n != arch.num_params:
        raise ArchitectureError("parameter block was written for a different architecture")
    start = offset + _PV_HEADER.size
    end = start + 8 * n
    if len(buf) < end:
        raise UsageError("truncated parameter block")
    values = np.frombuffer(buf, dtype=_F64, count=n, offset=start).astype(np.float64)
    return values, end


@dataclass(frozen=True)
class Checkpoint:
    params: np.ndarray
    adam: AdamState
    epoch: int
    cursor: int


def encode_checkpoint(ckpt: Checkpoint, arch: ModelArchitecture) -> bytes:
    a = ckpt.adam
    header = _CKPT_HEADER.pack(_CKPT_MAGIC, arch.num_params, a.step_count, ckpt.epoch,
                               ckpt.cursor, a.alpha, a.beta1, a.beta2, a.epsilon, 0)
    return (header + encode_params(ckpt.params, arch)
            + encode_params(a.first_moment, arch) + encode_params(a.second_moment, arch))


def decode_checkpoint(buf: bytes, arch: ModelArchitecture) -> Checkpoint:
    if len(buf) < _CKPT_HEADER.size:
        raise UsageError("truncated checkpoint")
    magic, _, step, epoch, cursor, alpha, b1, b2, eps, _ = _CKPT_HEADER.unpack_from(buf)
    if magic != _CKPT_MAGIC:
        raise UsageError("not a checkpoint")
    params, off = decode_params(buf, arch, _CKPT_HEADER.size)
    m, off = decode_params(buf, arch, off)
    v, _ = decode_params(buf, arch, off)
    adam = AdamState(m, v, step, alpha, b1, b2, eps)
    return Checkpoint(params, adam, epoch, cursor)


@dataclass(frozen=True)
class Message:
    """Parameters published by one agent, with the weight its receiver should use."""
    sender_id: int
    round: int
    weight: float
    fingerprint: bytes
    params: np.ndarray

    def encode(self, arch: ModelArchitecture) -> bytes:
        if self.fingerprint != arch.fingerprint():
            raise ArchitectureError("message fingerprint does not match architecture")
        return (_MSG_HEADER.pack(_MSG_MAGIC, self.sender_id, self.round, self.weight,
                                 self.fingerprint)
                + encode_params(self.params, arch))

    @classmethod
    def decode(cls, buf: bytes, arch: ModelArchitecture) -> "Message":
        if len(buf) < _MSG_HEADER.size:
            raise UsageError("truncated message")
        magic, sender, rnd, weight, fp = _MSG_HEADER.unpack_from(buf)
        if magic != _MSG_MAGIC:
            raise UsageError("not a message")
        if fp != arch.fingerprint():
            raise ArchitectureError(f"message from agent {sender} has a foreign architecture")
        params, _ = decode_params(buf, arch, _MSG_HEADER.size)
        return cls(sender, rnd, weight, fp, params)
