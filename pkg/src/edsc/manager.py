"""Per-node event buffer and the trigger factory.

``validate_and_filter_evts`` and ``create_tx_based_on_evts`` are the two steps
of the block-building loop that turn event updates into triggered executions.
Both are pure: they return new counters and a new event-state snapshot
instead of mutating their inputs.  ``EventBuffer`` is the mutable per-node
holding area for external updates awaiting inclusion.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import Origin, TRANSFER_EVENT, EventUpdate, TriggeredExecution
from .crypto import Address
from .eventstate import EventStateSnapshot, Subscription, active_subscriptions, replace_subscriptions, settle
from .matcher import EVAL_GAS_PER_NODE, Gate, MatchContext, publisher_allowed, should_trigger


class Reason:
    UNKNOWN_EVENT = "UnknownEvent"
    BAD_PAYLOAD = "BadPayload"
    BAD_SIGNATURE = "BadSignature"
    BAD_NONCE = "BadNonce"
    RATE_LIMITED = "RateLimited"
    DUPLICATE = "Duplicate"
    BUFFER_FULL = "BufferFull"


class BufferFull(Exception):
    pass


@dataclass(frozen=True)
class RateLimits:
    max_updates_per_account_per_epoch: int = 32
    max_triggers_per_event_update: int = 64  # k
    max_triggers_per_account_per_epoch: int = 16  # m
    epoch_length: int = 1
    buffer_capacity: int = 4096

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    def epoch_of(self, block: int) -> int:
        return block // self.epoch_length


@dataclass(frozen=True)
class EpochCounters:
    """Per-epoch tallies keyed by account: updates published, triggers created
    and triggered executions included in blocks."""
    epoch: int = 0
    updates: dict[Address, int] = field(default_factory=dict)
    triggers: dict[Address, int] = field(default_factory=dict)
    included: dict[Address, int] = field(default_factory=dict)

    def for_block(self, block: int, limits: RateLimits) -> "EpochCounters":
        epoch = limits.epoch_of(block)
        if epoch == self.epoch:
            return self
        return EpochCounters(epoch)


@dataclass(frozen=True)
class BlockContext:
    number: int
    timestamp: float
    miner: Address = Address(bytes(20))

    @property
    def time(self) -> int:
        return int(self.timestamp)


def structural_reason(update: EventUpdate, state: EventStateSnapshot) -> Optional[str]:
    """Checks that depend only on the registry: event, payload and signature."""
    defn = state.definitions.get(update.event_id)
    if defn is None:
        return Reason.UNKNOWN_EVENT
    if not defn.accepts(update.payload):
        return Reason.BAD_PAYLOAD
    if not update.signature_ok():
        return Reason.BAD_SIGNATURE
    return None


@dataclass(frozen=True)
class FilterResult:
    accepted: list[EventUpdate]
    rejected: list[tuple[EventUpdate, str]]
    counters: EpochCounters
    state: EventStateSnapshot  # publisher nonces advanced for accepted updates


def validate_and_filter_evts(updates: Iterable[EventUpdate], state: EventStateSnapshot,
                             limits: RateLimits, counters: EpochCounters) -> FilterResult:
    """Accept updates in the given order; nonces must advance by exactly one."""
    accepted: list[EventUpdate] = []
    rejected: list[tuple[EventUpdate, str]] = []
    nonces: dict = {}
    upd_counts: dict = {}
    for u in updates:
        reason = structural_reason(u, state)
        key = (u.event_id, u.publisher)
        if reason is None:
            last = nonces.get(key, state.last_nonce(*key))
            if u.nonce != last + 1:
                reason = Reason.BAD_NONCE
        counted = u.origin is not Origin.SYSTEM
        if reason is None and counted:
            used = upd_counts.get(u.publisher, counters.updates.get(u.publisher, 0))
            if used >= limits.max_updates_per_account_per_epoch:
                reason = Reason.RATE_LIMITED
        if reason is not None:
            rejected.append((u, reason))
            continue
        nonces[key] = u.nonce
        if counted:
            upd_counts[u.publisher] = upd_counts.get(u.publisher, counters.updates.get(u.publisher, 0)) + 1
        accepted.append(u)
    if upd_counts:
        merged = dict(counters.updates)
        merged.update(upd_counts)
        counters = dataclasses.replace(counters, updates=merged)
    if nonces:
        merged_n = dict(state.publisher_nonces)
        merged_n.update(nonces)
        state = dataclasses.replace(state, publisher_nonces=merged_n)
    return FilterResult(accepted, rejected, counters, state)


@dataclass(frozen=True)
class TriggerResult:
    executions: list[TriggeredExecution]
    state: EventStateSnapshot  # subscription bookkeeping advanced
    counters: EpochCounters
    eval_charges: list[tuple[Address, int]]  # (subscriber, gas) for constraint evaluation
    gates: list[tuple[TriggeredExecution | None, Subscription, Gate]] = field(default_factory=list)


def routes_to(sub: Subscription, update: EventUpdate) -> bool:
    """Default transfer subscriptions only see transfers addressed to their contract."""
    if not sub.is_default:
        return True
    return update.event_id == TRANSFER_EVENT.event_id and update.payload[1] == sub.subscriber


def create_tx_based_on_evts(state: EventStateSnapshot, updates: Iterable[EventUpdate], block_ctx: BlockContext,
                            limits: RateLimits, counters: EpochCounters, *,
                            gas_per_node: int = EVAL_GAS_PER_NODE,
                            trace: bool = False) -> TriggerResult:
    """Walk each update's subscriptions in priority order and emit executions.

    Per update at most k executions are emitted.  A subscription whose account
    already has m triggers this epoch is skipped before any gate runs, so it
    neither pays evaluation gas nor advances its instance counter.
    """
    k = limits.max_triggers_per_event_update
    m = limits.max_triggers_per_account_per_epoch
    state = settle(state, block_ctx.number)
    touched: dict[tuple, Subscription] = {}
    triggers = dict(counters.triggers)
    executions: list[TriggeredExecution] = []
    charges: list[tuple[Address, int]] = []
    gates: list = []
    for u in updates:
        defn = state.definitions.get(u.event_id)
        if defn is None:
            continue
        ctx = MatchContext(u, block_ctx.number, block_ctx.time)
        emitted = 0
        for sub in active_subscriptions(state, u.event_id, block_ctx.number):
            if emitted >= k:
                break
            if not routes_to(sub, u):
                continue
            sub = touched.get(sub.key, sub)
            if triggers.get(sub.subscriber, 0) >= m:
                continue
            ok, gas, gate = should_trigger(sub, ctx, defn, gas_per_node)
            if gas:
                charges.append((sub.subscriber, gas))
            if publisher_allowed(sub, u):
                sub = dataclasses.replace(sub, instance_counter=sub.instance_counter + 1)
            ex = None
            if ok:
                ex = TriggeredExecution(sub.ref, u.digest, sub.gas_price, sub.gas_limit,
                                        u.subscription_fee, sub.subscriber_data)
                executions.append(ex)
                sub = dataclasses.replace(sub, last_trigger_block=block_ctx.number)
                triggers[sub.subscriber] = triggers.get(sub.subscriber, 0) + 1
                emitted += 1
            if trace:
                gates.append((ex, sub, gate))
            touched[sub.key] = sub
    state = replace_subscriptions(state, touched.values())
    if triggers != counters.triggers:
        counters = dataclasses.replace(counters, triggers=triggers)
    return TriggerResult(executions, state, counters, charges, gates)


# -- the per-node buffer ------------------------------------------------------

def _drain_key(u: EventUpdate) -> tuple[int, bytes]:
    return (-u.inclusion_fee, bytes(u.digest))


class EventBuffer:
    """Validated external updates awaiting inclusion, queued per (event, publisher).

    Drain order is inclusion fee descending with ties broken by update
    digest, so every node holding the same updates drains them identically.
    Within one queue updates leave in nonce order.
    """

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._queues: dict[tuple[bytes, bytes], dict[int, EventUpdate]] = {}
        self._digests: set[bytes] = set()

    def __len__(self) -> int:
        return len(self._digests)

    def __contains__(self, update: EventUpdate) -> bool:
        return bytes(update.digest) in self._digests

    def updates(self) -> list[EventUpdate]:
        out = [u for q in self._queues.values() for u in q.values()]
        return sorted(out, key=_drain_key)

    def _remove(self, u: EventUpdate) -> None:
        key = (bytes(u.event_id), bytes(u.publisher))
        q = self._queues[key]
        del q[u.nonce]
        if not q:
            del self._queues[key]
        self._digests.discard(bytes(u.digest))

    def ingest(self, update: EventUpdate, state: EventStateSnapshot,
               limits: Optional[RateLimits] = None) -> tuple[bool, Optional[str]]:
        """Validate and enqueue; returns (accepted, reason).  Raises BufferFull."""
        reason = structural_reason(update, state)
        if reason is None and update.origin is not Origin.EXTERNAL:
            reason = Reason.BAD_SIGNATURE
        if reason is None and update.nonce <= state.last_nonce(update.event_id, update.publisher):
            reason = Reason.BAD_NONCE
        if reason is not None:
            return False, reason
        if update in self:
            return False, Reason.DUPLICATE
        key = (bytes(update.event_id), bytes(update.publisher))
        if update.nonce in self._queues.get(key, {}):
            return False, Reason.BAD_NONCE
        capacity = limits.buffer_capacity if limits is not None else self.capacity
        if len(self) >= capacity:
            victim = max(self.updates(), key=_drain_key)
            if update.inclusion_fee <= victim.inclusion_fee:
                raise BufferFull(f"buffer at capacity {capacity}; fee {update.inclusion_fee} too low")
            self._remove(victim)
        self._queues.setdefault(key, {})[update.nonce] = update
        self._digests.add(bytes(update.digest))
        return True, None

    def drain_for_block(self, budget: int, state: Optional[EventStateSnapshot] = None) -> list[EventUpdate]:
        """Remove up to ``budget`` updates in processing order.

        With ``state`` given, stale nonces are discarded and a queue only offers
        the update whose nonce follows the publisher's last on-chain nonce, so
        a gap holds the rest of that queue back.
        """
        if budget <= 0:
            return []
        heads: dict[tuple, int] = {}
        for key, q in list(self._queues.items()):
            if state is None:
                heads[key] = min(q)
                continue
            last = state.last_nonce(Address(key[0]), Address(key[1]))
            for stale in [n for n in q if n <= last]:
                self._remove(q[stale])
            if q and last + 1 in q:
                heads[key] = last + 1
        out: list[EventUpdate] = []
        while heads and len(out) < budget:
            key = min(heads, key=lambda kk: _drain_key(self._queues[kk][heads[kk]]))
            u = self._queues[key][heads[key]]
            self._remove(u)
            out.append(u)
            q = self._queues.get(key)
            nxt = None
            if q:
                nxt = u.nonce + 1 if state is not None else min(q)
            if nxt is not None and nxt in q:
                heads[key] = nxt
            else:
                del heads[key]
        return out
