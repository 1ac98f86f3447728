"""Authenticated registry of event definitions, subscriptions and publisher nonces.

Snapshots are immutable; every ``apply_*`` returns a new snapshot that shares
unchanged structure with its parent.  Subscription changes are queued as
pending changes that take effect ``activation delay`` blocks later, and
queries resolve them on the fly so that callers never observe a change early.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Optional

from . import codec
from .core import (
    EventCreateBody,
    EventDefinition,
    EventUpdate,
    MessageKind,
    ProtocolMessage,
    SubscribeBody,
    SubscriptionRef,
    SubscriptionUpdateBody,
    UnsubscribeBody,
    cached_encoding,
    define_event,
)
from .crypto import Address, HashDigest
from .matcher import parse_constraint
from .merkle import leaf_hash, merkle_root

ACTIVATION_DELAY = 2


class EventStateError(Exception):
    reason = "EventStateError"


class DuplicateEvent(EventStateError):
    reason = "DuplicateEvent"


class UnknownEvent(EventStateError):
    reason = "UnknownEvent"


class UnknownContract(EventStateError):
    reason = "UnknownContract"


class NotOwner(EventStateError):
    reason = "NotOwner"


class NoSuchSubscription(EventStateError):
    reason = "NoSuchSubscription"


class InvalidSignature(EventStateError):
    reason = "InvalidSignature"


@dataclass(frozen=True)
class Subscription:
    event_id: Address
    subscriber: Address
    ordinal: int
    gas_price: int
    gas_limit: int
    max_subscription_fee: int = 0
    publisher_filter: tuple[bytes, ...] = ()
    block_rate: int = 0
    event_rate: int = 0
    constraint: str = ""
    subscriber_data: bytes = b""
    activation_block: int = 0
    last_trigger_block: Optional[int] = None
    instance_counter: int = 0
    # the implicit transfer-event subscription every contract receives on deploy
    is_default: bool = False

    @property
    def ref(self) -> SubscriptionRef:
        return SubscriptionRef(self.event_id, self.subscriber, self.ordinal)

    @property
    def key(self) -> tuple[bytes, bytes, int]:
        return (bytes(self.event_id), bytes(self.subscriber), self.ordinal)

    @property
    def priority(self) -> tuple[int, int]:
        return (-self.gas_price, self.ordinal)

    def with_params(self, params: SubscribeBody) -> "Subscription":
        return dataclasses.replace(
            self,
            gas_price=params.gas_price,
            gas_limit=params.gas_limit,
            max_subscription_fee=params.max_subscription_fee,
            publisher_filter=params.publisher_filter,
            block_rate=params.block_rate,
            event_rate=params.event_rate,
            constraint=params.constraint,
            subscriber_data=params.subscriber_data,
        )


class ChangeKind(IntEnum):
    REMOVE = 0
    REPLACE = 1


@dataclass(frozen=True)
class PendingChange:
    effective_block: int
    kind: ChangeKind
    event_id: Address
    subscriber: Address
    ordinal: int
    params: Optional[SubscribeBody] = None

    @property
    def key(self) -> tuple[bytes, bytes, int]:
        return (bytes(self.event_id), bytes(self.subscriber), self.ordinal)


@dataclass(frozen=True)
class EventStateSnapshot:
    definitions: dict[Address, EventDefinition] = field(default_factory=dict)
    subscriptions: dict[Address, tuple[Subscription, ...]] = field(default_factory=dict)
    publisher_nonces: dict[tuple[Address, Address], int] = field(default_factory=dict)
    next_ordinal: int = 0
    pending: tuple[PendingChange, ...] = ()

    def last_nonce(self, event_id: Address, publisher: Address) -> int:
        return self.publisher_nonces.get((event_id, publisher), 0)

    def find(self, event_id: Address, subscriber: Address, ordinal: int) -> Optional[Subscription]:
        for sub in self.subscriptions.get(event_id, ()):
            if sub.ordinal == ordinal and sub.subscriber == subscriber:
                return sub
        return None

    def all_subscriptions(self) -> Iterable[Subscription]:
        for eid in sorted(self.subscriptions):
            yield from self.subscriptions[eid]


def empty_state() -> EventStateSnapshot:
    return EventStateSnapshot()


def _sorted(subs: Iterable[Subscription]) -> tuple[Subscription, ...]:
    return tuple(sorted(subs, key=lambda s: s.priority))


# -- definitions --------------------------------------------------------------

def register_definition(state: EventStateSnapshot, defn: EventDefinition) -> EventStateSnapshot:
    if defn.event_id in state.definitions:
        raise DuplicateEvent(f"event {defn.event_id} already registered")
    defs = dict(state.definitions)
    defs[defn.event_id] = defn
    return dataclasses.replace(state, definitions=defs)


def apply_event_create(state: EventStateSnapshot, msg: ProtocolMessage, block: int) -> EventStateSnapshot:
    if msg.kind is not MessageKind.EVENT_CREATE or not isinstance(msg.body, EventCreateBody):
        raise TypeError("apply_event_create needs an EventCreate message")
    if not msg.signature_ok():
        raise InvalidSignature(f"bad signature on {msg.digest}")
    body = msg.body
    return register_definition(state, define_event(msg.sender, body.variables, body.comments))


# -- subscriptions ------------------------------------------------------------

def add_subscription(state: EventStateSnapshot, params: SubscribeBody, block: int, *,
                     delay: int = ACTIVATION_DELAY, is_default: bool = False) -> EventStateSnapshot:
    """Register ``params`` without any message-level checks (scripts and genesis)."""
    defn = state.definitions.get(params.event_id)
    if defn is None:
        raise UnknownEvent(f"event {params.event_id} is not registered")
    parse_constraint(params.constraint, defn)
    sub = Subscription(
        event_id=params.event_id,
        subscriber=params.subscriber,
        ordinal=state.next_ordinal,
        gas_price=params.gas_price,
        gas_limit=params.gas_limit,
        activation_block=block + delay,
        is_default=is_default,
    ).with_params(params)
    subs = dict(state.subscriptions)
    subs[params.event_id] = _sorted(subs.get(params.event_id, ()) + (sub,))
    return dataclasses.replace(state, subscriptions=subs, next_ordinal=state.next_ordinal + 1)


def _check_contract(msg: ProtocolMessage, subscriber: Address, contracts: Optional[Mapping[Address, Address]]):
    if contracts is None:
        return
    owner = contracts.get(subscriber)
    if owner is None:
        raise UnknownContract(f"{subscriber} is not a deployed contract")
    if msg.sender != owner and msg.sender != subscriber:
        raise NotOwner(f"{msg.sender} does not control {subscriber}")


def apply_subscribe(state: EventStateSnapshot, msg: ProtocolMessage, block: int, *,
                    contracts: Optional[Mapping[Address, Address]] = None,
                    delay: int = ACTIVATION_DELAY) -> EventStateSnapshot:
    """``contracts`` maps each deployed contract to its owner; None skips that check."""
    if msg.kind is not MessageKind.SUBSCRIBE:
        raise TypeError("apply_subscribe needs a Subscribe message")
    if not msg.signature_ok():
        raise InvalidSignature(f"bad signature on {msg.digest}")
    if msg.body.event_id not in state.definitions:
        raise UnknownEvent(f"event {msg.body.event_id} is not registered")
    _check_contract(msg, msg.body.subscriber, contracts)
    return add_subscription(state, msg.body, block, delay=delay)


def _removal_pending(state: EventStateSnapshot, key) -> bool:
    return any(c.kind is ChangeKind.REMOVE and c.key == key for c in state.pending)


def _queue(state: EventStateSnapshot, change: PendingChange) -> EventStateSnapshot:
    return dataclasses.replace(state, pending=state.pending + (change,))


def apply_unsubscribe(state: EventStateSnapshot, msg: ProtocolMessage, block: int, *,
                      contracts: Optional[Mapping[Address, Address]] = None,
                      delay: int = ACTIVATION_DELAY) -> EventStateSnapshot:
    if msg.kind is not MessageKind.UNSUBSCRIBE or not isinstance(msg.body, UnsubscribeBody):
        raise TypeError("apply_unsubscribe needs an Unsubscribe message")
    if not msg.signature_ok():
        raise InvalidSignature(f"bad signature on {msg.digest}")
    body = msg.body
    sub = state.find(body.event_id, body.subscriber, body.ordinal)
    if sub is None or _removal_pending(state, sub.key):
        raise NoSuchSubscription(f"no subscription {body.ordinal} of {body.subscriber}")
    _check_contract(msg, body.subscriber, contracts)
    return _queue(state, PendingChange(block + delay, ChangeKind.REMOVE,
                                       sub.event_id, sub.subscriber, sub.ordinal))


def apply_subscription_update(state: EventStateSnapshot, msg: ProtocolMessage, block: int, *,
                              contracts: Optional[Mapping[Address, Address]] = None,
                              delay: int = ACTIVATION_DELAY) -> EventStateSnapshot:
    if msg.kind is not MessageKind.SUBSCRIPTION_UPDATE or not isinstance(msg.body, SubscriptionUpdateBody):
        raise TypeError("apply_subscription_update needs a SubscriptionUpdate message")
    if not msg.signature_ok():
        raise InvalidSignature(f"bad signature on {msg.digest}")
    params = msg.body.params
    sub = state.find(params.event_id, params.subscriber, msg.body.ordinal)
    if sub is None or _removal_pending(state, sub.key):
        raise NoSuchSubscription(f"no subscription {msg.body.ordinal} of {params.subscriber}")
    _check_contract(msg, params.subscriber, contracts)
    parse_constraint(params.constraint, state.definitions[params.event_id])
    return _queue(state, PendingChange(block + delay, ChangeKind.REPLACE,
                                       sub.event_id, sub.subscriber, sub.ordinal, params))


def _resolve(subs: tuple[Subscription, ...], changes: list[PendingChange]) -> tuple[Subscription, ...]:
    by_key = {s.key: s for s in subs}
    for ch in changes:
        cur = by_key.get(ch.key)
        if cur is None:
            continue
        if ch.kind is ChangeKind.REMOVE:
            del by_key[ch.key]
        else:
            by_key[ch.key] = cur.with_params(ch.params)
    return _sorted(by_key.values())


def active_subscriptions(state: EventStateSnapshot, event_id: Address, block: int) -> list[Subscription]:
    """Subscriptions in force at ``block`` in (gas_price desc, ordinal asc) order."""
    subs = state.subscriptions.get(event_id, ())
    due = [c for c in state.pending if c.event_id == event_id and c.effective_block <= block]
    if due:
        subs = _resolve(subs, due)
    return [s for s in subs if s.activation_block <= block]


def settle(state: EventStateSnapshot, block: int) -> EventStateSnapshot:
    """Fold every pending change effective at or before ``block`` into the lists."""
    due = [c for c in state.pending if c.effective_block <= block]
    if not due:
        return state
    subs = dict(state.subscriptions)
    for eid in sorted({c.event_id for c in due}):
        resolved = _resolve(subs.get(eid, ()), [c for c in due if c.event_id == eid])
        if resolved:
            subs[eid] = resolved
        else:
            subs.pop(eid, None)
    rest = tuple(c for c in state.pending if c.effective_block > block)
    return dataclasses.replace(state, subscriptions=subs, pending=rest)


def replace_subscriptions(state: EventStateSnapshot, updated: Iterable[Subscription]) -> EventStateSnapshot:
    """Swap in bookkeeping-updated records (same key, same priority)."""
    updated = list(updated)
    if not updated:
        return state
    subs = dict(state.subscriptions)
    by_event: dict[Address, dict] = {}
    for s in updated:
        by_event.setdefault(s.event_id, {})[s.key] = s
    for eid, repl in by_event.items():
        subs[eid] = tuple(repl.get(s.key, s) for s in subs[eid])
    return dataclasses.replace(state, subscriptions=subs)


def bump_nonces(state: EventStateSnapshot, updates: Iterable[EventUpdate]) -> EventStateSnapshot:
    nonces = None
    for u in updates:
        key = (u.event_id, u.publisher)
        cur = (nonces or state.publisher_nonces).get(key, 0)
        if u.nonce > cur:
            if nonces is None:
                nonces = dict(state.publisher_nonces)
            nonces[key] = u.nonce
    if nonces is None:
        return state
    return dataclasses.replace(state, publisher_nonces=nonces)


# -- authentication -----------------------------------------------------------

def _u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def state_leaves(state: EventStateSnapshot) -> list[bytes]:
    leaves = []
    for eid, defn in state.definitions.items():
        leaves.append(leaf_hash(b"D" + eid, cached_encoding(defn)))
    for eid, subs in state.subscriptions.items():
        for s in subs:
            leaves.append(leaf_hash(b"S" + eid + s.subscriber + _u64(s.ordinal), cached_encoding(s)))
    for (eid, pub), nonce in state.publisher_nonces.items():
        leaves.append(leaf_hash(b"N" + eid + pub, _u64(nonce)))
    if state.next_ordinal:
        leaves.append(leaf_hash(b"O", _u64(state.next_ordinal)))
    seen: dict[tuple, int] = {}
    for ch in state.pending:
        # changes to distinct subscriptions commute, so only the per-key sequence is keyed
        seq = seen.get(ch.key, 0)
        seen[ch.key] = seq + 1
        key = b"P" + _u64(ch.effective_block) + ch.event_id + ch.subscriber + _u64(ch.ordinal) + _u64(seq)
        leaves.append(leaf_hash(key, cached_encoding(ch)))
    return leaves


def root_hash(state: EventStateSnapshot) -> HashDigest:
    """Merkle root over all registry leaves; independent of insertion order."""
    return merkle_root(state_leaves(state))


def dump_json(state: EventStateSnapshot) -> str:
    """Deterministic debug dump of the whole registry."""
    return json.dumps(codec.to_json(state, EventStateSnapshot), sort_keys=True, indent=2)
