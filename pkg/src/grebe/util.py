"""Small shared helpers: stable hashing, seeded RNG streams, logging."""

from __future__ import annotations

import hashlib
import logging
import sys

import numpy as np


def stable_hash64(key: str | bytes) -> int:
    """Deterministic 64-bit hash, stable across processes and runs.

    Used for partition assignment and shard placement, so it must never
    depend on PYTHONHASHSEED or the platform.
    """
    if isinstance(key, str):
        key = key.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent RNG stream derived from the global seed and context keys."""
    ints = [seed & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        ints.append(stable_hash64(k) if isinstance(k, str) else k & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(ints)))


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        datefmt="%H:%M:%S",
    )


def kv_line(event: str, **fields) -> str:
    """One structured stats line: event key=value ..."""
    parts = [event]
    for k, v in fields.items():
        if isinstance(v, float):
            parts.append(f"{k}={v:.6g}")
        else:
            parts.append(f"{k}={v}")
    return " ".join(parts)
