"""Seed fan-out from a single master seed.

``derive_seed(master, role, index)`` XORs the master seed with a 63-bit
BLAKE2b digest of ``"{role}:{index}"``. Roles in use:

    init       per-agent parameter initialization
    shuffle    per-agent batch order (combined with the epoch number)
    split      per-agent train/test partition
    synthetic  synthetic window noise

Collaborative, isolated and centralized runs sharing a master seed therefore
start every agent from the same parameters.
"""
import hashlib

_MASK = (1 << 63) - 1


def derive_seed(master: int, role: str, index: int | str = 0) -> int:
    digest = hashlib.blake2b(f"{role}:{index}".encode(), digest_size=8).digest()
    return (int(master) & _MASK) ^ (int.from_bytes(digest, "little") & _MASK)
