"""Named random sub-streams derived from one run seed.

Each stream is a ``random.Random`` seeded from ``sha256(f"{seed}:{name}")`` so
that adding draws to one stream never shifts another.  Sweeps that vary a
single factor therefore see identical mining times and emission times.
"""
from __future__ import annotations

import hashlib
import random


def stream_seed(seed: int, name: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:16], "big")


def substream(seed: int, name: str) -> random.Random:
    return random.Random(stream_seed(seed, name))
