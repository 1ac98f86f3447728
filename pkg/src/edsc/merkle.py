"""Binary Merkle tree over sorted leaves."""
from __future__ import annotations

import hashlib
from typing import Iterable

from .crypto import EMPTY_DIGEST, HashDigest

EMPTY_ROOT = EMPTY_DIGEST


def leaf_hash(key: bytes, value: bytes) -> bytes:
    return hashlib.sha256(b"\x00" + len(key).to_bytes(4, "big") + key + value).digest()


def merkle_root(leaf_hashes: Iterable[bytes], *, presorted: bool = False) -> HashDigest:
    """Root over the leaf hashes; odd levels duplicate their last node.

    Leaves are sorted unless ``presorted`` is set (ordered lists such as
    receipts pass their own order).
    """
    level = list(leaf_hashes)
    if not level:
        return EMPTY_ROOT
    if not presorted:
        level.sort()
    sha = hashlib.sha256
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha(b"\x01" + level[i] + level[i + 1]).digest() for i in range(0, len(level), 2)]
    return HashDigest(level[0])


def keyed_root(items: Iterable[tuple[bytes, bytes]]) -> HashDigest:
    """Root over (key, value) pairs, sorted by key."""
    pairs = sorted(items)
    return merkle_root((leaf_hash(k, v) for k, v in pairs), presorted=True)
