"""Square-root push gossip with hash announcements and delayed fetches.

A node that first learns a message sends the full message to ``ceil(sqrt(P))``
randomly chosen peers, where P counts the peers it does not already know to
hold the message, and sends only the message hash to the remaining P peers.
A node holding only hashes waits ``hash_wait`` and then fetches the message
from one announcer; the reply takes one more link delay.

Only the per-node arrival time matters to the simulator, so hash deliveries
are folded into a per-node "first hash" time instead of being scheduled as
individual events.  A fetch costs the same link-delay draw whichever
announcer is picked, so the announcer identity is not tracked.
"""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass


def split_targets(peers: list[int], rng: random.Random) -> tuple[list[int], list[int]]:
    """Pick ``ceil(sqrt(len(peers)))`` full-message targets; the rest get the hash."""
    if not peers:
        return [], []
    n = len(peers)
    k = math.isqrt(n - 1) + 1  # ceil(sqrt(P)) for P >= 1
    pool = list(peers)
    rnd = rng.random
    for i in range(k):  # partial Fisher-Yates
        j = i + int(rnd() * (n - i))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k], pool[k:]


@dataclass
class GossipResult:
    arrival: list[float]
    full_sends: int = 0
    hash_sends: int = 0
    fetches: int = 0


def gossip(origin: int, start: float, node_count: int, rng: random.Random, *,
           mean_delay: float, hash_wait: float) -> GossipResult:
    """Arrival time of one message at every node when ``origin`` learns it at ``start``.

    Delays are in seconds; each link delay is ``mean_delay`` times an Exp(1)
    draw so that scaling the mean scales every delay of a run alike.
    """
    inf = math.inf
    arrival = [inf] * node_count
    first_hash = [inf] * node_count
    fetch_delay: list[float | None] = [None] * node_count
    heard: list[list[tuple[float, int]]] = [[] for _ in range(node_count)]
    best = [inf] * node_count
    via_fetch = [False] * node_count
    result = GossipResult(arrival)
    heap: list[tuple[float, int, bool]] = [(start, origin, False)]
    best[origin] = start
    rnd = rng.random
    log = math.log
    everyone = range(node_count)

    while heap:
        t, x, fetched = heapq.heappop(heap)
        if arrival[x] != inf or t > best[x]:
            continue
        arrival[x] = t
        if fetched:
            result.fetches += 1
        hx = heard[x]
        if hx:
            known = {z for (ta, z) in hx if ta <= t}
            known.add(x)
            peers = [p for p in everyone if p not in known]
        else:
            peers = [p for p in everyone if p != x]
        full, hashes = split_targets(peers, rng)
        for y in full:
            if arrival[y] != inf:
                continue  # already informed: the send would be a no-op
            ta = t + -mean_delay * log(1.0 - rnd())
            result.full_sends += 1
            heard[y].append((ta, x))
            if ta < best[y]:
                best[y] = ta
                heapq.heappush(heap, (ta, y, False))
        for y in hashes:
            if arrival[y] != inf:
                continue
            ta = t + -mean_delay * log(1.0 - rnd())
            result.hash_sends += 1
            heard[y].append((ta, x))
            if ta < first_hash[y]:
                first_hash[y] = ta
                if fetch_delay[y] is None:
                    fetch_delay[y] = -mean_delay * log(1.0 - rnd())
                tf = ta + hash_wait + fetch_delay[y]
                if tf < best[y]:
                    best[y] = tf
                    heapq.heappush(heap, (tf, y, True))
    return result
