from __future__ import annotations

import dataclasses
import random

import pytest

from edsc.core import EventUpdate, Origin, SubscribeBody, VarType, define_event, sign_update
from edsc.crypto import Address, KeyPair
from edsc.eventstate import add_subscription, empty_state, register_definition
from edsc.manager import (
    BlockContext,
    BufferFull,
    EpochCounters,
    EventBuffer,
    RateLimits,
    Reason,
    create_tx_based_on_evts,
    validate_and_filter_evts,
)

PUB = KeyPair.from_seed("publisher")
DEFN = define_event(PUB.address, [("v", VarType.INT)])


def _state():
    return register_definition(empty_state(), DEFN)


def _signed(nonce, fee=0, sub_fee=0, key=PUB, v=1):
    return sign_update(EventUpdate(DEFN.event_id, key.address, key.public_key, nonce, (v,), sub_fee, fee), key)


def _addr(i):
    return Address(bytes([i]) * 20)


# -- validate_and_filter_evts --------------------------------------------------------

def test_valid_update_accepted_and_replay_rejected():
    st = _state()
    res = validate_and_filter_evts([_signed(1)], st, RateLimits(), EpochCounters())
    assert len(res.accepted) == 1 and res.state.last_nonce(DEFN.event_id, PUB.address) == 1
    again = validate_and_filter_evts([_signed(1)], res.state, RateLimits(), res.counters)
    assert [r for _, r in again.rejected] == [Reason.BAD_NONCE]


def test_rate_limit_walkthrough():
    limits = RateLimits(max_updates_per_account_per_epoch=10)
    res = validate_and_filter_evts([_signed(n) for n in range(1, 12)], _state(), limits, EpochCounters())
    assert len(res.accepted) == 10
    assert [(u.nonce, r) for u, r in res.rejected] == [(11, Reason.RATE_LIMITED)]
    assert res.counters.updates[PUB.address] == 10


def test_structural_rejections():
    st = _state()
    unknown = dataclasses.replace(_signed(1), event_id=_addr(9))
    bad_payload = sign_update(EventUpdate(DEFN.event_id, PUB.address, PUB.public_key, 1, (b"x",)), PUB)
    bad_sig = dataclasses.replace(_signed(1), signature=b"\x01" * 32)
    res = validate_and_filter_evts([unknown, bad_payload, bad_sig], st, RateLimits(), EpochCounters())
    assert [r for _, r in res.rejected] == [Reason.UNKNOWN_EVENT, Reason.BAD_PAYLOAD, Reason.BAD_SIGNATURE]


def test_system_updates_are_not_rate_limited():
    limits = RateLimits(max_updates_per_account_per_epoch=1)
    ups = [EventUpdate(DEFN.event_id, PUB.address, b"", n, (1,), origin=Origin.SYSTEM) for n in (1, 2, 3)]
    res = validate_and_filter_evts(ups, _state(), limits, EpochCounters())
    assert len(res.accepted) == 3


def test_counters_reset_on_new_epoch():
    limits = RateLimits(epoch_length=4)
    c = EpochCounters(1, {PUB.address: 3})
    assert c.for_block(7, limits) is c
    assert c.for_block(8, limits).updates == {}


def test_limits_must_be_positive():
    with pytest.raises(ValueError):
        RateLimits(epoch_length=0)


# -- create_tx_based_on_evts ------------------------------------------------------------

def _with_subs(prices_ordinals):
    st = _state()
    for price, ordinal in prices_ordinals:
        st = dataclasses.replace(st, next_ordinal=ordinal)
        st = add_subscription(st, SubscribeBody(DEFN.event_id, _addr(ordinal), price, 1000), 0, delay=0)
    return st


def test_priority_walk_with_k_cap():
    st = _with_subs([(7, 3), (5, 1), (5, 2)])
    limits = RateLimits(max_triggers_per_event_update=2)
    res = create_tx_based_on_evts(st, [_signed(1)], BlockContext(5, 0.0), limits, EpochCounters(5))
    assert [e.subscription_ref.ordinal for e in res.executions] == [3, 1]


def test_fee_gate_blocks_execution():
    st = _state()
    st = add_subscription(st, SubscribeBody(DEFN.event_id, _addr(1), 1, 1000, max_subscription_fee=40), 0, delay=0)
    res = create_tx_based_on_evts(st, [_signed(1, sub_fee=50)], BlockContext(5, 0.0), RateLimits(), EpochCounters(5))
    assert res.executions == []


def test_no_subscriptions_no_executions():
    res = create_tx_based_on_evts(_state(), [_signed(1)], BlockContext(5, 0.0), RateLimits(), EpochCounters(5))
    assert res.executions == [] and res.eval_charges == []


def test_m_cap_skips_before_gates():
    # one subscriber holds both subscriptions
    st = _state()
    for o in (1, 2):
        st = dataclasses.replace(st, next_ordinal=o)
        st = add_subscription(st, SubscribeBody(DEFN.event_id, _addr(1), 5, 1000, event_rate=1), 0, delay=0)
    limits = RateLimits(max_triggers_per_account_per_epoch=1)
    res = create_tx_based_on_evts(st, [_signed(1)], BlockContext(5, 0.0), limits, EpochCounters(5), trace=True)
    assert [e.subscription_ref.ordinal for e in res.executions] == [1]
    assert len(res.eval_charges) == 1
    skipped = res.state.find(DEFN.event_id, _addr(1), 2)
    assert skipped.instance_counter == 0


def test_bookkeeping_updates_counters_and_last_trigger():
    st = _with_subs([(5, 1)])
    res = create_tx_based_on_evts(st, [_signed(1), _signed(2)], BlockContext(9, 0.0), RateLimits(), EpochCounters(9))
    sub = res.state.find(DEFN.event_id, _addr(1), 1)
    assert sub.instance_counter == 2 and sub.last_trigger_block == 9
    assert res.counters.triggers[_addr(1)] == 2


# -- event buffer -----------------------------------------------------------------------------

def _keys(n):
    return [KeyPair.from_seed(f"p{i}") for i in range(n)]


def test_drain_by_fee_then_remaining_buffered():
    keys = _keys(3)
    st = _state()
    buf = EventBuffer()
    for k, fee in zip(keys, (1, 9, 5)):
        assert buf.ingest(_signed(1, fee=fee, key=k), st) == (True, None)
    out = buf.drain_for_block(2, st)
    assert [u.inclusion_fee for u in out] == [9, 5]
    assert [u.inclusion_fee for u in buf.updates()] == [1]


def test_zero_budget_leaves_buffer_unchanged():
    buf = EventBuffer()
    buf.ingest(_signed(1, fee=3), _state())
    assert buf.drain_for_block(0, _state()) == []
    assert len(buf) == 1


def test_eviction_rule():
    keys = _keys(3)
    st = _state()
    buf = EventBuffer(capacity=2)
    buf.ingest(_signed(1, fee=3, key=keys[0]), st)
    buf.ingest(_signed(1, fee=5, key=keys[1]), st)
    assert buf.ingest(_signed(1, fee=4, key=keys[2]), st)[0]
    assert sorted(u.inclusion_fee for u in buf.updates()) == [4, 5]
    with pytest.raises(BufferFull):
        buf.ingest(_signed(1, fee=4, key=keys[0]), st)


def test_ingest_rejections():
    st = _state()
    buf = EventBuffer()
    u = _signed(1)
    assert buf.ingest(u, st) == (True, None)
    assert buf.ingest(u, st) == (False, Reason.DUPLICATE)
    assert buf.ingest(dataclasses.replace(u, signature=b"\x00" * 32), st)[1] == Reason.BAD_SIGNATURE
    internal = EventUpdate(DEFN.event_id, PUB.address, b"", 2, (1,), origin=Origin.INTERNAL)
    assert buf.ingest(internal, st)[1] == Reason.BAD_SIGNATURE
    advanced = validate_and_filter_evts([_signed(1)], st, RateLimits(), EpochCounters()).state
    assert EventBuffer().ingest(_signed(1), advanced)[1] == Reason.BAD_NONCE


def test_nonce_gap_holds_queue_and_persists():
    st = _state()
    buf = EventBuffer()
    buf.ingest(_signed(2, fee=9), st)
    assert buf.drain_for_block(5, st) == []
    assert len(buf) == 1  # still there for the next block
    buf.ingest(_signed(1, fee=1), st)
    assert [u.nonce for u in buf.drain_for_block(5, st)] == [1, 2]


def test_drain_independent_of_arrival_order():
    rng = random.Random(12)
    keys = _keys(6)
    st = _state()
    ups = [_signed(n, fee=rng.choice([1, 2, 2, 3]), key=k, v=rng.randrange(100)) for k in keys for n in (1, 2, 3)]
    reference = None
    for _ in range(25):
        rng.shuffle(ups)
        buf = EventBuffer()
        for u in ups:
            buf.ingest(u, st)
        order = [bytes(u.digest) for u in buf.drain_for_block(len(ups), st)]
        reference = reference or order
        assert order == reference
