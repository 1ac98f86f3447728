"""Accounts, scripted contracts, block building, execution and block validation.

Block building follows the event-processing loop: each round validates the
pending event updates, turns them into triggered executions, merges those
into the pool, filters the pool by the per-account cap, sorts it by price and
executes whatever fits the remaining block gas.  Events emitted by the
executions feed the next round.  Validation re-runs the same loop over the
block's own messages and compares the outcome field by field.
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, Optional, Sequence

from . import codec
from .core import (
    BUILTIN_EVENTS,
    NEW_BLOCK_EVENT,
    SYSTEM_ADDRESS,
    TRANSFER_EVENT,
    Action,
    Block,
    ConsumeGas,
    DeployBody,
    EmitEvent,
    EventUpdate,
    MessageKind,
    Noop,
    Origin,
    ProtocolMessage,
    RevertIf,
    SendTokens,
    Splice,
    SubscribeBody,
    SubscribeTo,
    TransferBody,
    TriggeredExecution,
    cached_encoding,
    value_matches,
    wrap_update,
)
from .crypto import EMPTY_DIGEST, ZERO_ADDRESS, Address, HashDigest, hash_bytes
from .eventstate import (
    ACTIVATION_DELAY,
    EventStateError,
    EventStateSnapshot,
    add_subscription,
    apply_event_create,
    apply_subscribe,
    apply_subscription_update,
    apply_unsubscribe,
    bump_nonces,
    empty_state,
    register_definition,
    root_hash,
    settle,
)
from .manager import (
    BlockContext,
    EpochCounters,
    EventBuffer,
    RateLimits,
    create_tx_based_on_evts,
    validate_and_filter_evts,
)
from .matcher import ConstraintSyntaxError, ConstraintTypeError, MatchContext, evaluate, parse_constraint
from .merkle import keyed_root, leaf_hash, merkle_root


# -- errors -------------------------------------------------------------------

class LedgerError(Exception):
    reason = "LedgerError"


class BadNonce(LedgerError):
    reason = "BadNonce"


class BadSignature(LedgerError):
    reason = "BadSignature"


class InsufficientBalance(LedgerError):
    reason = "InsufficientBalance"


class InsufficientPrefund(LedgerError):
    reason = "InsufficientPrefund"


class UnknownContract(LedgerError):
    reason = "UnknownContract"


class MessageRejected(LedgerError):
    """Wraps an event-state error raised while applying a registry message."""

    def __init__(self, cause: EventStateError | Exception):
        super().__init__(str(cause))
        self.reason = getattr(cause, "reason", type(cause).__name__)


class _Revert(Exception):
    pass


# -- state types ----------------------------------------------------------------

class AccountKind(IntEnum):
    EXTERNAL = 0
    CONTRACT = 1


@dataclass(frozen=True)
class Account:
    address: Address
    balance: int = 0
    nonce: int = 0
    kind: AccountKind = AccountKind.EXTERNAL

    def __post_init__(self):
        if self.balance < 0:
            raise ValueError(f"negative balance for {self.address}")


@dataclass(frozen=True)
class ContractScript:
    address: Address
    owner: Address
    on_trigger: tuple[Action, ...] = ()


@dataclass(frozen=True)
class GasSchedule:
    event_create_gas: int = 50_000
    subscribe_gas: int = 30_000
    unsubscribe_gas: int = 10_000
    subscription_update_gas: int = 20_000
    deploy_gas: int = 100_000
    transfer_gas: int = 21_000
    external_update_gas: int = 25_000
    base_trigger_gas: int = 21_000
    emit_gas: int = 5_000
    eval_gas_per_node: int = 3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def message_gas(self, kind: MessageKind) -> int:
        return {
            MessageKind.EVENT_CREATE: self.event_create_gas,
            MessageKind.SUBSCRIBE: self.subscribe_gas,
            MessageKind.UNSUBSCRIBE: self.unsubscribe_gas,
            MessageKind.SUBSCRIPTION_UPDATE: self.subscription_update_gas,
            MessageKind.TRANSFER: self.transfer_gas,
            MessageKind.DEPLOY: self.deploy_gas,
            MessageKind.EXTERNAL_EVENT_UPDATE: self.external_update_gas,
        }[kind]


@dataclass(frozen=True)
class ConsensusParams:
    gas_limit: int = 8_000_000
    schedule: GasSchedule = field(default_factory=GasSchedule)
    limits: RateLimits = field(default_factory=RateLimits)
    activation_delay: int = ACTIVATION_DELAY
    block_reward: int = 0
    # price per gas unit for messages and for constraint evaluation
    system_gas_price: int = 1
    max_pending_triggers: int = 4096
    max_updates_per_block: int = 256


@dataclass(frozen=True)
class PendingTrigger:
    execution: TriggeredExecution
    update: EventUpdate


@dataclass(frozen=True)
class ChainState:
    accounts: dict[Address, Account] = field(default_factory=dict)
    contracts: dict[Address, ContractScript] = field(default_factory=dict)
    events: EventStateSnapshot = field(default_factory=empty_state)
    pending: tuple[PendingTrigger, ...] = ()
    counters: EpochCounters = field(default_factory=EpochCounters)

    def balance(self, addr: Address) -> int:
        acct = self.accounts.get(addr)
        return acct.balance if acct is not None else 0

    def nonce(self, addr: Address) -> int:
        acct = self.accounts.get(addr)
        return acct.nonce if acct is not None else 0

    def total_supply(self) -> int:
        return sum(a.balance for a in self.accounts.values())

    def owners(self) -> dict[Address, Address]:
        return {a: c.owner for a, c in self.contracts.items()}


def state_root(state: ChainState) -> HashDigest:
    leaves = [leaf_hash(b"A" + a, cached_encoding(acct)) for a, acct in state.accounts.items()]
    leaves += [leaf_hash(b"C" + a, cached_encoding(c)) for a, c in state.contracts.items()]
    leaves += [leaf_hash(b"T" + i.to_bytes(8, "big"), cached_encoding(p)) for i, p in enumerate(state.pending)]
    leaves.append(leaf_hash(b"E", codec.encode(state.counters)))
    return merkle_root(leaves)


class ReceiptStatus(IntEnum):
    SUCCESS = 0
    REVERTED = 1


@dataclass(frozen=True)
class Receipt:
    tx: HashDigest
    status: ReceiptStatus
    gas_used: int
    miner_fee: int
    subscription_fee: int = 0
    publisher: Address = ZERO_ADDRESS
    emitted: tuple[HashDigest, ...] = ()


def receipts_root(receipts: Sequence[Receipt]) -> HashDigest:
    return merkle_root((hash_bytes(cached_encoding(r)) for r in receipts), presorted=True)


# -- mutable working copy used while executing one block -------------------------

class _Work:
    """Copy-on-write view over a ChainState for the duration of one block."""

    def __init__(self, state: ChainState):
        self.base = state
        self.accounts: dict[Address, Account] = {}
        self.contracts: dict[Address, ContractScript] = {}
        self.events = state.events

    def account(self, addr: Address) -> Optional[Account]:
        acct = self.accounts.get(addr)
        return acct if acct is not None else self.base.accounts.get(addr)

    def balance(self, addr: Address) -> int:
        acct = self.account(addr)
        return acct.balance if acct is not None else 0

    def contract(self, addr: Address) -> Optional[ContractScript]:
        c = self.contracts.get(addr)
        return c if c is not None else self.base.contracts.get(addr)

    def credit(self, addr: Address, amount: int) -> None:
        if amount == 0:
            return
        acct = self.account(addr) or Account(addr)
        self.accounts[addr] = dataclasses.replace(acct, balance=acct.balance + amount)

    def debit(self, addr: Address, amount: int) -> None:
        if amount == 0:
            return
        acct = self.account(addr)
        if acct is None or acct.balance < amount:
            raise InsufficientBalance(f"{addr} cannot pay {amount}")
        self.accounts[addr] = dataclasses.replace(acct, balance=acct.balance - amount)

    def move(self, src: Address, dst: Address, amount: int) -> None:
        self.debit(src, amount)
        self.credit(dst, amount)

    def bump_nonce(self, addr: Address) -> None:
        acct = self.account(addr) or Account(addr)
        self.accounts[addr] = dataclasses.replace(acct, nonce=acct.nonce + 1)

    def snapshot(self):
        return dict(self.accounts), dict(self.contracts), self.events

    def restore(self, snap) -> None:
        self.accounts, self.contracts, self.events = dict(snap[0]), dict(snap[1]), snap[2]

    def commit(self, pending, counters) -> ChainState:
        accounts = self.base.accounts
        if self.accounts:
            accounts = dict(accounts)
            accounts.update(self.accounts)
        contracts = self.base.contracts
        if self.contracts:
            contracts = dict(contracts)
            contracts.update(self.contracts)
        return ChainState(accounts, contracts, self.events, pending, counters)


class _NonceAllocator:
    """Hands out per-(event, publisher) nonces for updates created inside a block."""

    def __init__(self):
        self.issued: dict[tuple[Address, Address], int] = {}

    def next(self, events: EventStateSnapshot, event_id: Address, publisher: Address) -> int:
        key = (event_id, publisher)
        n = max(self.issued.get(key, 0), events.last_nonce(event_id, publisher)) + 1
        self.issued[key] = n
        return n


def _transfer_update(work: _Work, alloc: _NonceAllocator, src: Address, dst: Address,
                     amount: int, data: bytes) -> EventUpdate:
    eid = TRANSFER_EVENT.event_id
    return EventUpdate(eid, SYSTEM_ADDRESS, b"", alloc.next(work.events, eid, SYSTEM_ADDRESS),
                       (src, dst, amount, data), origin=Origin.SYSTEM)


# -- executions -------------------------------------------------------------------

def _splice(template, update: EventUpdate, events: EventStateSnapshot):
    if not isinstance(template, Splice):
        return template
    defn = events.definitions[update.event_id]
    try:
        return update.payload[defn.index_of(template.field)]
    except KeyError:
        raise _Revert(f"no field {template.field!r} to splice") from None


def _run_script(work: _Work, contract: ContractScript, ex: TriggeredExecution, update: EventUpdate,
                block_ctx: BlockContext, schedule: GasSchedule, reserved: int,
                delay: int) -> tuple[int, list[tuple]]:
    """Run ``contract``'s actions; returns (gas, emissions, subscriptions) or raises _Revert.

    ``reserved`` tokens of the contract's balance are held back for the gas
    and subscription-fee settlement and cannot be spent by the script.
    """
    gas = schedule.base_trigger_gas
    emissions: list = []

    def charge(amount: int) -> None:
        nonlocal gas
        gas += amount
        if gas > ex.gas_limit:
            raise _Revert("out of gas", ex.gas_limit)

    charge(0)
    try:
        _run_actions(work, contract, ex, update, block_ctx, schedule, reserved, delay, charge, emissions)
    except _Revert as rev:
        if len(rev.args) == 1:
            raise _Revert(rev.args[0], gas) from None
        raise
    return gas, emissions


def _run_actions(work, contract, ex, update, block_ctx, schedule, reserved, delay, charge, emissions) -> None:
    me = contract.address
    for action in contract.on_trigger:
        if isinstance(action, ConsumeGas):
            charge(action.amount)
        elif isinstance(action, Noop):
            continue
        elif isinstance(action, EmitEvent):
            charge(schedule.emit_gas)
            defn = work.events.definitions.get(action.event_id)
            if defn is None:
                raise _Revert("emit of unregistered event")
            payload = tuple(_splice(t, update, work.events) for t in action.payload)
            if not defn.accepts(payload):
                raise _Revert("emitted payload does not match its definition")
            emissions.append(("emit", action.event_id, payload, action.subscription_fee))
        elif isinstance(action, SendTokens):
            charge(schedule.transfer_gas)
            if action.amount < 0 or work.balance(me) - reserved < action.amount:
                raise _Revert("insufficient balance for transfer")
            work.move(me, action.to, action.amount)
            emissions.append(("transfer", me, action.to, action.amount))
        elif isinstance(action, RevertIf):
            try:
                expr = parse_constraint(action.predicate, work.events.definitions.get(update.event_id),
                                        allow_self=True)
            except (ConstraintSyntaxError, ConstraintTypeError) as err:
                raise _Revert(f"bad predicate: {err}") from None
            ctx = MatchContext(update, block_ctx.number, block_ctx.time, work.balance(me) - reserved)
            hit, cost = evaluate(expr, ctx, schedule.eval_gas_per_node)
            charge(cost)
            if hit:
                raise _Revert("revert_if predicate held")
        elif isinstance(action, SubscribeTo):
            charge(schedule.subscribe_gas)
            params = dataclasses.replace(action.params, subscriber=me)
            try:
                work.events = add_subscription(work.events, params, block_ctx.number, delay=delay)
            except (EventStateError, ConstraintSyntaxError, ConstraintTypeError) as err:
                raise _Revert(f"subscribe failed: {err}") from None
        else:
            raise _Revert(f"unknown action {action!r}")


def _execute_execution(work: _Work, ex: TriggeredExecution, update: EventUpdate, block_ctx: BlockContext,
                       params: ConsensusParams, alloc: _NonceAllocator) -> tuple[Receipt, list[EventUpdate]]:
    sub_addr = ex.subscriber
    contract = work.contract(sub_addr)
    if contract is None:
        raise UnknownContract(f"{sub_addr} has no contract")
    prefund = ex.gas_limit * ex.gas_price + ex.subscription_fee_paid
    if work.balance(sub_addr) < prefund:
        raise InsufficientPrefund(f"{sub_addr} cannot prefund {prefund}")
    snap = work.snapshot()
    try:
        gas, emissions = _run_script(work, contract, ex, update, block_ctx, params.schedule,
                                     prefund, params.activation_delay)
    except _Revert as rev:
        work.restore(snap)
        gas = rev.args[1]
        fee = gas * ex.gas_price
        work.move(sub_addr, block_ctx.miner, fee)
        return Receipt(ex.digest, ReceiptStatus.REVERTED, gas, fee), []
    fee = gas * ex.gas_price
    work.move(sub_addr, block_ctx.miner, fee)
    work.move(sub_addr, update.publisher, ex.subscription_fee_paid)
    emitted = []
    for em in emissions:
        if em[0] == "emit":
            _, eid, payload, sub_fee = em
            emitted.append(EventUpdate(eid, sub_addr, b"", alloc.next(work.events, eid, sub_addr),
                                       payload, sub_fee, 0, Origin.INTERNAL))
        else:
            _, src, dst, amount = em
            emitted.append(_transfer_update(work, alloc, src, dst, amount, b""))
    receipt = Receipt(ex.digest, ReceiptStatus.SUCCESS, gas, fee, ex.subscription_fee_paid,
                      update.publisher, tuple(u.digest for u in emitted))
    return receipt, emitted


def execute_execution(state: ChainState, ex: TriggeredExecution, update: EventUpdate, block_ctx: BlockContext,
                      params: ConsensusParams = ConsensusParams()) -> tuple[ChainState, Receipt, list[EventUpdate]]:
    """Run one triggered execution against ``state``; see the module docstring for fee rules."""
    work = _Work(state)
    receipt, emitted = _execute_execution(work, ex, update, block_ctx, params, _NonceAllocator())
    return work.commit(state.pending, state.counters), receipt, emitted


def _execute_message(work: _Work, msg: ProtocolMessage, block_ctx: BlockContext, params: ConsensusParams,
                     alloc: _NonceAllocator, check_signature: bool = True) -> tuple[Receipt, list[EventUpdate]]:
    if msg.kind is MessageKind.EXTERNAL_EVENT_UPDATE:
        raise TypeError("external updates are charged through the update path")
    if check_signature and not msg.signature_ok():
        raise BadSignature(f"bad signature on {msg.digest}")
    sender = msg.sender
    expected = (work.account(sender).nonce if work.account(sender) else 0) + 1
    if msg.sender_nonce != expected:
        raise BadNonce(f"{sender} nonce {msg.sender_nonce}, expected {expected}")
    gas = params.schedule.message_gas(msg.kind)
    cost = msg.inclusion_fee + gas * params.system_gas_price
    body = msg.body
    value = 0
    if isinstance(body, TransferBody):
        value = body.amount
    elif isinstance(body, DeployBody):
        value = body.value
    if value < 0 or msg.inclusion_fee < 0:
        raise InsufficientBalance("negative amount")
    if work.balance(sender) < cost + value:
        raise InsufficientBalance(f"{sender} cannot cover {cost + value}")
    emitted: list[EventUpdate] = []
    n = block_ctx.number
    delay = params.activation_delay
    try:
        if msg.kind is MessageKind.EVENT_CREATE:
            work.events = apply_event_create(work.events, msg, n)
        elif msg.kind is MessageKind.SUBSCRIBE:
            work.events = apply_subscribe(work.events, msg, n, contracts=_OwnerView(work), delay=delay)
        elif msg.kind is MessageKind.UNSUBSCRIBE:
            work.events = apply_unsubscribe(work.events, msg, n, contracts=_OwnerView(work), delay=delay)
        elif msg.kind is MessageKind.SUBSCRIPTION_UPDATE:
            work.events = apply_subscription_update(work.events, msg, n, contracts=_OwnerView(work), delay=delay)
    except (EventStateError, ConstraintSyntaxError, ConstraintTypeError) as err:
        raise MessageRejected(err) from None
    work.move(sender, block_ctx.miner, cost)
    work.bump_nonce(sender)
    if isinstance(body, TransferBody):
        work.move(sender, body.to, body.amount)
        emitted.append(_transfer_update(work, alloc, sender, body.to, body.amount, body.data))
    elif isinstance(body, DeployBody):
        addr = contract_address(sender, msg.sender_nonce)
        if work.account(addr) is not None or work.contract(addr) is not None:
            raise MessageRejected(ValueError(f"address {addr} already in use"))
        _install_contract(work, addr, sender, body, n)
        work.move(sender, addr, body.value)
    return Receipt(msg.digest, ReceiptStatus.SUCCESS, gas, cost), emitted


class _OwnerView:
    """Read-only contract → owner mapping over a working copy."""

    def __init__(self, work: _Work):
        self.work = work

    def get(self, addr, default=None):
        c = self.work.contract(addr)
        return c.owner if c is not None else default


def contract_address(sender: Address, nonce: int) -> Address:
    return Address(hash_bytes(b"contract" + bytes(sender) + nonce.to_bytes(8, "big"))[:20])


def _install_contract(work: _Work, addr: Address, owner: Address, body: DeployBody, block: int) -> None:
    work.contracts[addr] = ContractScript(addr, owner, body.actions)
    acct = work.account(addr) or Account(addr, kind=AccountKind.CONTRACT)
    work.accounts[addr] = dataclasses.replace(acct, kind=AccountKind.CONTRACT)
    default = SubscribeBody(TRANSFER_EVENT.event_id, addr, body.transfer_gas_price, body.transfer_gas_limit)
    work.events = add_subscription(work.events, default, block, delay=0, is_default=True)


def execute_message(state: ChainState, msg: ProtocolMessage, block_ctx: BlockContext,
                    params: ConsensusParams = ConsensusParams()) -> tuple[ChainState, Receipt, list[EventUpdate]]:
    """Apply one signed protocol message; raises a LedgerError on rejection (no state change)."""
    work = _Work(state)
    receipt, emitted = _execute_message(work, msg, block_ctx, params, _NonceAllocator())
    return work.commit(state.pending, state.counters), receipt, emitted


# -- genesis ------------------------------------------------------------------------

def genesis_state(balances: dict[Address, int] | None = None) -> ChainState:
    events = empty_state()
    for defn in BUILTIN_EVENTS:
        events = register_definition(events, defn)
    accounts = {a: Account(a, b) for a, b in sorted((balances or {}).items())}
    return ChainState(accounts=accounts, events=events)


def genesis_block(state: ChainState, params: ConsensusParams = ConsensusParams(), timestamp: float = 0.0) -> Block:
    return Block(0, EMPTY_DIGEST, timestamp, ZERO_ADDRESS, params.gas_limit, 0, state_root(state),
                 root_hash(state.events), EMPTY_DIGEST)


def genesis_deploy(state: ChainState, owner: Address, actions: Sequence[Action], *, balance: int = 0,
                   salt: int = 0, transfer_gas_price: int = 1, transfer_gas_limit: int = 100_000) -> tuple[ChainState, Address]:
    """Install a contract directly into a genesis state."""
    work = _Work(state)
    addr = contract_address(owner, salt)
    body = DeployBody(tuple(actions), transfer_gas_price, transfer_gas_limit, balance)
    _install_contract(work, addr, owner, body, 0)
    work.credit(addr, balance)
    return work.commit(state.pending, state.counters), addr


def genesis_event(state: ChainState, creator: Address, variables, comments: str = "") -> tuple[ChainState, Address]:
    from .core import define_event

    defn = define_event(creator, variables, comments)
    events = register_definition(state.events, defn)
    return dataclasses.replace(state, events=events), defn.event_id


def genesis_subscribe(state: ChainState, params: SubscribeBody) -> ChainState:
    """Register a subscription that is already active at block 1."""
    return dataclasses.replace(state, events=add_subscription(state.events, params, 0, delay=0))


# -- block building -----------------------------------------------------------------

def _price(item) -> int:
    return item.execution.gas_price if isinstance(item, PendingTrigger) else item.inclusion_fee


def sort_key(item) -> tuple:
    """Priority: price desc, messages before triggers, then ordinal, then digest."""
    if isinstance(item, PendingTrigger):
        ex = item.execution
        return (-ex.gas_price, 1, ex.subscription_ref.ordinal, bytes(ex.digest))
    return (-item.inclusion_fee, 0, 0, bytes(item.digest))


@dataclass
class BuildResult:
    block: Block
    state: ChainState
    receipts: list[Receipt]
    skipped: list[tuple[object, str]] = field(default_factory=list)
    # the triggering update of each execution, aligned with block.executions
    trigger_updates: list[EventUpdate] = field(default_factory=list)


class _Strict(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason


def _new_block_update(number: int, timestamp: float) -> EventUpdate:
    return EventUpdate(NEW_BLOCK_EVENT.event_id, SYSTEM_ADDRESS, b"", number,
                       (number, int(timestamp)), origin=Origin.SYSTEM)


def canonical_update_order(updates: Iterable[EventUpdate], events: EventStateSnapshot,
                           budget: int | None = None) -> list[EventUpdate]:
    buf = EventBuffer(capacity=1 << 30)
    updates = list(updates)
    for u in updates:
        buf._queues.setdefault((bytes(u.event_id), bytes(u.publisher)), {})[u.nonce] = u
        buf._digests.add(bytes(u.digest))
    return buf.drain_for_block(len(updates) if budget is None else budget, events)


def _run_block(parent: Block, state: ChainState, messages: Iterable[ProtocolMessage],
               updates: Iterable[EventUpdate], params: ConsensusParams, timestamp: float,
               miner: Address, strict: bool) -> BuildResult:
    number = parent.number + 1
    block_ctx = BlockContext(number, timestamp, miner)
    limits = params.limits
    gas_limit = params.gas_limit
    sched = params.schedule
    skipped: list[tuple[object, str]] = []

    def skip(item, reason: str, detail: str = "") -> None:
        if strict:
            raise _Strict(reason, detail)
        skipped.append((item, reason))

    work = _Work(state)
    work.events = settle(state.events, number)
    counters = state.counters.for_block(number, limits)
    alloc = _NonceAllocator()
    if params.block_reward:
        work.credit(miner, params.block_reward)
    gas_used = 0
    receipts: list[Receipt] = []
    included_msgs: list[ProtocolMessage] = []
    executions: list[TriggeredExecution] = []
    trigger_updates: list[EventUpdate] = []
    round_sizes: list[int] = []

    # round-1 external updates: canonical order, affordability, then validation
    offered = [u for u in updates if u.origin is Origin.EXTERNAL]
    ext = canonical_update_order(offered, work.events, params.max_updates_per_block)
    if len(ext) < len(offered):
        kept = {bytes(u.digest) for u in ext}
        for u in offered:
            if bytes(u.digest) not in kept:
                skip(u, "Deferred", "nonce gap or per-block update budget")
    ugas = sched.external_update_gas
    spend: dict[Address, int] = {}
    affordable = []
    for u in ext:
        cost = u.inclusion_fee + ugas * params.system_gas_price
        if ugas * (len(affordable) + 1) > gas_limit:
            skip(u, "OverGasLimit")
            continue
        if work.balance(u.publisher) - spend.get(u.publisher, 0) < cost:
            skip(u, InsufficientBalance.reason)
            continue
        spend[u.publisher] = spend.get(u.publisher, 0) + cost
        affordable.append(u)
    fr = validate_and_filter_evts([_new_block_update(number, timestamp)] + affordable,
                                  work.events, limits, counters)
    for u, why in fr.rejected:
        skip(u, why)
    work.events, counters = fr.state, fr.counters
    for u in fr.accepted:
        if u.origin is Origin.EXTERNAL:
            msg = wrap_update(u)
            cost = u.inclusion_fee + ugas * params.system_gas_price
            work.move(u.publisher, miner, cost)
            gas_used += ugas
            receipts.append(Receipt(msg.digest, ReceiptStatus.SUCCESS, ugas, cost))
            included_msgs.append(msg)
    accepted = fr.accepted
    tmp_evts = accepted
    validated = True

    pool: list = list(state.pending)
    msg_queue: dict[Address, list[ProtocolMessage]] = {}
    for m in sorted(messages, key=lambda x: (bytes(x.sender), x.sender_nonce, bytes(x.digest))):
        if m.kind is MessageKind.EXTERNAL_EVENT_UPDATE:
            skip(m, "BadMessage", "external updates travel through the event buffer")
            continue
        msg_queue.setdefault(m.sender, []).append(m)
    m_cap = limits.max_triggers_per_account_per_epoch
    included_counts = dict(counters.included)

    while True:
        if not validated:
            fr = validate_and_filter_evts(tmp_evts, work.events, limits, counters)
            work.events, counters = fr.state, fr.counters
            # rejected internal updates still consume their nonce so later ones stay valid
            work.events = bump_nonces(work.events, [u for u, _ in fr.rejected if u.origin is not Origin.EXTERNAL])
            tmp_evts = fr.accepted
        validated = False
        if tmp_evts:
            tr = create_tx_based_on_evts(work.events, tmp_evts, block_ctx, limits, counters,
                                         gas_per_node=sched.eval_gas_per_node)
            work.events, counters = tr.state, tr.counters
            by_digest = {bytes(u.digest): u for u in tmp_evts}
            pool.extend(PendingTrigger(ex, by_digest[bytes(ex.triggering_update)]) for ex in tr.executions)
            for addr, egas in tr.eval_charges:
                work.move(addr, miner, min(work.balance(addr), egas * params.system_gas_price))
        # tx-filter: per-account trigger cap and next-nonce messages only
        ready: list = []
        for item in pool:
            if included_counts.get(item.execution.subscriber, 0) < m_cap:
                ready.append(item)
        for sender in sorted(msg_queue):
            queue = msg_queue[sender]
            if queue:
                ready.append(queue[0])
        ready.sort(key=sort_key)
        emitted_round: list[EventUpdate] = []
        ran = 0
        ran_triggers = 0
        for item in ready:
            if isinstance(item, PendingTrigger):
                ex = item.execution
                if included_counts.get(ex.subscriber, 0) >= m_cap:
                    continue
                if gas_used + ex.gas_limit > gas_limit:
                    continue
                pool.remove(item)
                try:
                    receipt, emitted = _execute_execution(work, ex, item.update, block_ctx, params, alloc)
                except (InsufficientPrefund, UnknownContract) as err:
                    skipped.append((item, err.reason))
                    continue
                included_counts[ex.subscriber] = included_counts.get(ex.subscriber, 0) + 1
                executions.append(ex)
                trigger_updates.append(item.update)
                ran_triggers += 1
            else:
                msg = item
                mgas = sched.message_gas(msg.kind)
                if gas_used + mgas > gas_limit:
                    if strict:
                        raise _Strict("OverGasLimit", f"message {msg.digest} does not fit")
                    continue
                msg_queue[msg.sender].pop(0)
                try:
                    receipt, emitted = _execute_message(work, msg, block_ctx, params, alloc)
                except LedgerError as err:
                    # a failing message blocks the rest of its sender's queue this block
                    skip(msg, "BadMessage", f"{err.reason}: {err}")
                    msg_queue[msg.sender] = []
                    continue
                included_msgs.append(msg)
            gas_used += receipt.gas_used
            receipts.append(receipt)
            emitted_round.extend(emitted)
            ran += 1
        round_sizes.append(ran_triggers)
        tmp_evts = emitted_round
        if ran == 0:
            break
    if strict:
        leftover = [m for q in msg_queue.values() for m in q]
        if leftover:
            raise _Strict("BadMessage", f"{len(leftover)} messages could not be included")
    while round_sizes and round_sizes[-1] == 0 and len(round_sizes) > 1:
        round_sizes.pop()
    pool.sort(key=sort_key)
    if len(pool) > params.max_pending_triggers:
        pool = pool[:params.max_pending_triggers]
    if included_counts != counters.included:
        counters = dataclasses.replace(counters, included=included_counts)
    new_state = work.commit(tuple(pool), counters)
    block = Block(number, parent.hash, timestamp, miner, gas_limit, gas_used, state_root(new_state),
                  root_hash(new_state.events), receipts_root(receipts), tuple(included_msgs),
                  tuple(executions), tuple(round_sizes))
    return BuildResult(block, new_state, receipts, skipped, trigger_updates)


def build_block(parent: Block, state: ChainState, messages: Iterable[ProtocolMessage] = (),
                updates: Iterable[EventUpdate] = (), params: ConsensusParams = ConsensusParams(), *,
                timestamp: float, miner: Address) -> BuildResult:
    """Build the next block on ``parent``; ``state`` is the post-state of ``parent``.

    ``messages`` is the miner's view of the transaction pool and ``updates``
    the external updates drained from its event buffer.  Items that cannot be
    included are reported in ``skipped`` and left to the caller's pools.
    """
    return _run_block(parent, state, messages, updates, params, timestamp, miner, strict=False)


def build_from_pools(parent: Block, state: ChainState, pool: "TxPool", buffer: EventBuffer,
                     params: ConsensusParams = ConsensusParams(), *, timestamp: float,
                     miner: Address) -> BuildResult:
    """Build from a node's pools, removing whatever the block consumed."""
    updates = buffer.drain_for_block(params.max_updates_per_block, state.events)
    result = build_block(parent, state, pool.messages(), updates, params, timestamp=timestamp, miner=miner)
    included = {bytes(m.digest) for m in result.block.external_messages}
    pool.remove(included)
    pool.prune(result.state)
    for u in updates:
        wrapped = bytes(wrap_update(u).digest)
        if wrapped not in included and u.nonce > result.state.events.last_nonce(u.event_id, u.publisher):
            try:
                buffer.ingest(u, result.state.events)
            except Exception:
                pass
    return result


# -- validation -------------------------------------------------------------------

class Verdict:
    ACCEPT = "Accept"
    UNKNOWN_PARENT = "UnknownParent"
    OVER_GAS_LIMIT = "OverGasLimit"
    BAD_SIGNATURE = "BadSignature"
    BAD_MESSAGE = "BadMessage"
    BAD_ORDER = "BadOrder"
    BAD_EXECUTION = "BadExecution"
    MISSING_EXECUTION = "MissingExecution"
    BAD_GAS_USED = "BadGasUsed"
    BAD_STATE_ROOT = "BadStateRoot"
    BAD_EVENT_STATE_ROOT = "BadEventStateRoot"
    BAD_RECEIPTS_ROOT = "BadReceiptsRoot"


@dataclass
class ValidationResult:
    ok: bool
    reason: str
    detail: str = ""
    state: Optional[ChainState] = None

    def __bool__(self) -> bool:
        return self.ok


def _reject(reason: str, detail: str = "") -> ValidationResult:
    return ValidationResult(False, reason, detail)


def _is_subsequence(short: Sequence, long: Sequence) -> bool:
    it = iter(long)
    return all(any(x == y for y in it) for x in short)


def validate_block(parent: Block, parent_state: ChainState, block: Block,
                   params: ConsensusParams = ConsensusParams()) -> ValidationResult:
    """Re-derive ``block`` from its parent state and messages and compare."""
    if block.parent != parent.hash or block.number != parent.number + 1:
        return _reject(Verdict.UNKNOWN_PARENT, f"block {block.number} does not extend {parent.hash}")
    if block.gas_limit != params.gas_limit or block.gas_used > block.gas_limit:
        return _reject(Verdict.OVER_GAS_LIMIT, f"gas {block.gas_used} / {block.gas_limit}")
    for msg in block.external_messages:
        if not msg.signature_ok():
            return _reject(Verdict.BAD_SIGNATURE, f"message {msg.digest}")
    n_ext = 0
    while n_ext < len(block.external_messages) and \
            block.external_messages[n_ext].kind is MessageKind.EXTERNAL_EVENT_UPDATE:
        n_ext += 1
    updates = [m.body for m in block.external_messages[:n_ext]]
    messages = block.external_messages[n_ext:]
    if any(m.kind is MessageKind.EXTERNAL_EVENT_UPDATE for m in messages):
        return _reject(Verdict.BAD_ORDER, "external updates must precede other messages")
    if [u.digest for u in canonical_update_order(updates, settle(parent_state.events, block.number))] != \
            [u.digest for u in updates]:
        return _reject(Verdict.BAD_ORDER, "external updates out of canonical order")
    try:
        honest = _run_block(parent, parent_state, messages, updates, params, block.timestamp, block.miner,
                            strict=True)
    except _Strict as err:
        return _reject(Verdict.BAD_MESSAGE if err.reason not in (Verdict.OVER_GAS_LIMIT,) else err.reason,
                       str(err))
    want = honest.block
    if want.external_messages != block.external_messages:
        return _reject(Verdict.BAD_ORDER, "message order differs from the deterministic rule")
    if want.executions != block.executions:
        got, exp = list(block.executions), list(want.executions)
        key = lambda e: bytes(e.digest)  # noqa: E731
        if sorted(got, key=key) == sorted(exp, key=key):
            return _reject(Verdict.BAD_ORDER, "executions reordered")
        if len(got) < len(exp) and _is_subsequence(got, exp):
            return _reject(Verdict.MISSING_EXECUTION, f"{len(exp) - len(got)} executions dropped")
        return _reject(Verdict.BAD_EXECUTION, "execution contents differ")
    if want.round_sizes != block.round_sizes:
        return _reject(Verdict.BAD_ORDER, "round boundaries differ")
    if want.gas_used != block.gas_used:
        return _reject(Verdict.BAD_GAS_USED, f"{block.gas_used} != {want.gas_used}")
    if want.state_root != block.state_root:
        return _reject(Verdict.BAD_STATE_ROOT)
    if want.event_state_root != block.event_state_root:
        return _reject(Verdict.BAD_EVENT_STATE_ROOT)
    if want.receipts_root != block.receipts_root:
        return _reject(Verdict.BAD_RECEIPTS_ROOT)
    return ValidationResult(True, Verdict.ACCEPT, "", honest.state)


def check_ordering(block: Block) -> bool:
    """Within each loop round: gas price nonincreasing, ordinal nondecreasing on ties."""
    start = 0
    sizes = block.round_sizes or (len(block.executions),)
    for size in sizes:
        chunk = block.executions[start:start + size]
        start += size
        for a, b in zip(chunk, chunk[1:]):
            if a.gas_price < b.gas_price:
                return False
            if a.gas_price == b.gas_price and a.subscription_ref.ordinal > b.subscription_ref.ordinal:
                return False
    return start == len(block.executions)


# -- the per-node transaction pool ---------------------------------------------------

class PoolFull(Exception):
    pass


class TxPool:
    """Pending protocol messages keyed by digest, capped per sender account."""

    def __init__(self, max_per_account: int = 256):
        self.max_per_account = max_per_account
        self._msgs: dict[bytes, ProtocolMessage] = {}
        self._per_account: dict[bytes, int] = {}

    def __len__(self) -> int:
        return len(self._msgs)

    def __contains__(self, msg: ProtocolMessage) -> bool:
        return bytes(msg.digest) in self._msgs

    def add(self, msg: ProtocolMessage) -> bool:
        d = bytes(msg.digest)
        if d in self._msgs:
            return False
        sender = bytes(msg.sender)
        if self._per_account.get(sender, 0) >= self.max_per_account:
            raise PoolFull(f"{msg.sender} already has {self.max_per_account} pending messages")
        self._msgs[d] = msg
        self._per_account[sender] = self._per_account.get(sender, 0) + 1
        return True

    def remove(self, digests: Iterable[bytes]) -> None:
        for d in digests:
            msg = self._msgs.pop(bytes(d), None)
            if msg is not None:
                sender = bytes(msg.sender)
                self._per_account[sender] -= 1
                if not self._per_account[sender]:
                    del self._per_account[sender]

    def prune(self, state: ChainState) -> None:
        """Drop messages whose sender nonce is already used on chain."""
        stale = [d for d, m in self._msgs.items() if m.sender_nonce <= state.nonce(m.sender)]
        self.remove(stale)

    def messages(self) -> list[ProtocolMessage]:
        return sorted(self._msgs.values(), key=lambda m: (bytes(m.sender), m.sender_nonce, bytes(m.digest)))


# -- block log ------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def block_log_lines(genesis: Block, state: ChainState, params: ConsensusParams,
                    blocks: Iterable[Block]) -> Iterator[str]:
    yield _line({"genesis": {"block": codec.to_json(genesis, Block), "state": codec.to_json(state, ChainState),
                             "params": codec.to_json(params, ConsensusParams)}})
    for b in blocks:
        yield _line({"block": codec.to_json(b, Block)})


def write_block_log(path: str, genesis: Block, state: ChainState, params: ConsensusParams,
                    blocks: Iterable[Block]) -> None:
    _atomic_write(path, "".join(line + "\n" for line in block_log_lines(genesis, state, params, blocks)))


class BlockLogError(ValueError):
    pass


def read_block_log(path: str) -> tuple[Block, ChainState, ConsensusParams, list[Block]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise BlockLogError("empty block log")
    try:
        head = json.loads(lines[0])["genesis"]
        genesis = codec.from_json(Block, head["block"])
        state = codec.from_json(ChainState, head["state"])
        params = codec.from_json(ConsensusParams, head["params"])
        blocks = []
        for i, ln in enumerate(lines[1:], start=2):
            try:
                blocks.append(codec.from_json(Block, json.loads(ln)["block"]))
            except (ValueError, KeyError, TypeError) as err:
                raise BlockLogError(f"line {i}: {err}") from None
    except BlockLogError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise BlockLogError(f"line 1: {err}") from None
    return genesis, state, params, blocks


def validate_chain(genesis: Block, state: ChainState, params: ConsensusParams,
                   blocks: Iterable[Block]) -> tuple[ValidationResult, Optional[Block]]:
    """Replay ``blocks`` from genesis; returns the first failure and its block."""
    parent = genesis
    for b in blocks:
        res = validate_block(parent, state, b, params)
        if not res.ok:
            return res, b
        parent, state = b, res.state
    return ValidationResult(True, Verdict.ACCEPT, "", state), None
