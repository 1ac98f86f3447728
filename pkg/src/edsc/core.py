"""Shared message and block vocabulary.

Every type here is a frozen value object.  Identity-bearing objects expose a
``digest`` computed over their canonical encoding (see :mod:`edsc.codec`).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

from . import codec
from .crypto import ZERO_ADDRESS, Address, HashDigest, KeyPair, address_of, hash_bytes, verify


def cached_digest(obj) -> HashDigest:
    """Digest of ``obj``'s canonical encoding, memoized on the instance."""
    d = obj.__dict__.get("_digest")
    if d is None:
        d = codec.digest(obj)
        object.__setattr__(obj, "_digest", d)
    return d


def cached_encoding(obj) -> bytes:
    enc = obj.__dict__.get("_encoding")
    if enc is None:
        enc = codec.encode(obj)
        object.__setattr__(obj, "_encoding", enc)
    return enc


class VarType(IntEnum):
    INT = 0
    BYTES = 1
    ADDRESS = 2
    BOOL = 3


PayloadValue = Union[bool, int, Address, bytes]

_PY_TYPES = {VarType.INT: int, VarType.BYTES: bytes, VarType.ADDRESS: Address, VarType.BOOL: bool}


def value_matches(vtype: VarType, value) -> bool:
    return type(value) is _PY_TYPES[vtype]


@dataclass(frozen=True)
class Variable:
    name: str
    type: VarType


@dataclass(frozen=True)
class EventDefinition:
    event_id: Address
    creator: Address
    variables: tuple[Variable, ...] = ()
    comments: str = ""

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")

    def schema(self) -> dict[str, VarType]:
        return {v.name: v.type for v in self.variables}

    def index_of(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if v.name == name:
                return i
        raise KeyError(name)

    def accepts(self, payload: tuple) -> bool:
        return len(payload) == len(self.variables) and all(
            value_matches(v.type, x) for v, x in zip(self.variables, payload)
        )


def definition_bytes(defn: EventDefinition) -> bytes:
    return codec.encode(dataclasses.replace(defn, event_id=ZERO_ADDRESS))


def derive_event_id(creator: Address, definition_bytes: bytes) -> Address:
    return Address(hash_bytes(bytes(creator) + definition_bytes)[:20])


def define_event(creator: Address, variables=(), comments: str = "") -> EventDefinition:
    variables = tuple(v if isinstance(v, Variable) else Variable(v[0], VarType(v[1])) for v in variables)
    draft = EventDefinition(ZERO_ADDRESS, creator, variables, comments)
    return dataclasses.replace(draft, event_id=derive_event_id(creator, definition_bytes(draft)))


class Origin(IntEnum):
    EXTERNAL = 0
    INTERNAL = 1
    SYSTEM = 2


@dataclass(frozen=True)
class EventUpdate:
    event_id: Address
    publisher: Address
    publisher_key: bytes
    nonce: int
    payload: tuple[PayloadValue, ...]
    subscription_fee: int = 0
    inclusion_fee: int = 0
    origin: Origin = Origin.EXTERNAL
    signature: bytes | None = None

    @property
    def digest(self) -> HashDigest:
        return cached_digest(self)

    def signing_digest(self) -> HashDigest:
        return codec.digest(dataclasses.replace(self, signature=None))

    def signature_ok(self) -> bool:
        if self.origin is not Origin.EXTERNAL:
            return self.signature is None
        return (address_of(self.publisher_key) == self.publisher
                and verify(self.publisher_key, self.signing_digest(), self.signature))


def sign_update(update: EventUpdate, key: KeyPair) -> EventUpdate:
    unsigned = dataclasses.replace(update, signature=None, publisher=key.address,
                                   publisher_key=key.public_key, origin=Origin.EXTERNAL)
    return dataclasses.replace(unsigned, signature=key.sign(unsigned.signing_digest()))


# -- contract scripts --------------------------------------------------------

@dataclass(frozen=True)
class Splice:
    """Payload template slot copied from the triggering update's field."""
    field: str


TemplateValue = Union[bool, int, Address, bytes, Splice]


@dataclass(frozen=True)
class ConsumeGas:
    amount: int


@dataclass(frozen=True)
class EmitEvent:
    event_id: Address
    payload: tuple[TemplateValue, ...]
    subscription_fee: int = 0


@dataclass(frozen=True)
class SendTokens:
    to: Address
    amount: int


@dataclass(frozen=True)
class RevertIf:
    """Revert when the constraint-language predicate holds.

    Fields available: the triggering update's ``payload.*``, ``block.*``,
    ``publisher`` and ``self.balance``.
    """
    predicate: str


@dataclass(frozen=True)
class SubscribeBody:
    event_id: Address
    subscriber: Address
    gas_price: int
    gas_limit: int
    max_subscription_fee: int = 0
    publisher_filter: tuple[bytes, ...] = ()
    block_rate: int = 0
    event_rate: int = 0
    constraint: str = ""
    subscriber_data: bytes = b""


@dataclass(frozen=True)
class SubscribeTo:
    params: SubscribeBody


@dataclass(frozen=True)
class Noop:
    pass


Action = Union[ConsumeGas, EmitEvent, SendTokens, RevertIf, SubscribeTo, Noop]


# -- protocol messages -------------------------------------------------------

class MessageKind(IntEnum):
    EVENT_CREATE = 0
    SUBSCRIBE = 1
    UNSUBSCRIBE = 2
    SUBSCRIPTION_UPDATE = 3
    TRANSFER = 4
    DEPLOY = 5
    EXTERNAL_EVENT_UPDATE = 6


@dataclass(frozen=True)
class EventCreateBody:
    variables: tuple[Variable, ...] = ()
    comments: str = ""


@dataclass(frozen=True)
class UnsubscribeBody:
    event_id: Address
    subscriber: Address
    ordinal: int


@dataclass(frozen=True)
class SubscriptionUpdateBody:
    ordinal: int
    params: SubscribeBody


@dataclass(frozen=True)
class TransferBody:
    to: Address
    amount: int
    data: bytes = b""


@dataclass(frozen=True)
class DeployBody:
    actions: tuple[Action, ...] = ()
    transfer_gas_price: int = 1
    transfer_gas_limit: int = 100_000
    value: int = 0


Body = Union[EventCreateBody, SubscribeBody, UnsubscribeBody, SubscriptionUpdateBody,
             TransferBody, DeployBody, EventUpdate]

BODY_TYPES = {
    MessageKind.EVENT_CREATE: EventCreateBody,
    MessageKind.SUBSCRIBE: SubscribeBody,
    MessageKind.UNSUBSCRIBE: UnsubscribeBody,
    MessageKind.SUBSCRIPTION_UPDATE: SubscriptionUpdateBody,
    MessageKind.TRANSFER: TransferBody,
    MessageKind.DEPLOY: DeployBody,
    MessageKind.EXTERNAL_EVENT_UPDATE: EventUpdate,
}


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: Address
    sender_key: bytes
    sender_nonce: int
    body: Body
    inclusion_fee: int = 0
    signature: bytes | None = None

    def __post_init__(self):
        if type(self.body) is not BODY_TYPES[self.kind]:
            raise TypeError(f"{self.kind.name} needs {BODY_TYPES[self.kind].__name__} body")

    @property
    def digest(self) -> HashDigest:
        return cached_digest(self)

    def signing_digest(self) -> HashDigest:
        if self.kind is MessageKind.EXTERNAL_EVENT_UPDATE:
            return self.body.signing_digest()
        return codec.digest(dataclasses.replace(self, signature=None))

    def signature_ok(self) -> bool:
        if self.kind is MessageKind.EXTERNAL_EVENT_UPDATE:
            upd = self.body
            return (upd.origin is Origin.EXTERNAL and upd.signature == self.signature
                    and upd.publisher == self.sender and upd.signature_ok())
        return (address_of(self.sender_key) == self.sender
                and verify(self.sender_key, self.signing_digest(), self.signature))


def make_message(kind: MessageKind, key: KeyPair, nonce: int, body, inclusion_fee: int = 0) -> ProtocolMessage:
    msg = ProtocolMessage(kind, key.address, key.public_key, nonce, body, inclusion_fee)
    return dataclasses.replace(msg, signature=key.sign(msg.signing_digest()))


def wrap_update(update: EventUpdate) -> ProtocolMessage:
    """On-chain carrier for an external update; it reuses the update's signature."""
    return ProtocolMessage(MessageKind.EXTERNAL_EVENT_UPDATE, update.publisher, update.publisher_key,
                           update.nonce, update, update.inclusion_fee, update.signature)


# -- executions and blocks ---------------------------------------------------

@dataclass(frozen=True)
class SubscriptionRef:
    event_id: Address
    subscriber: Address
    ordinal: int


@dataclass(frozen=True)
class TriggeredExecution:
    subscription_ref: SubscriptionRef
    triggering_update: HashDigest
    gas_price: int
    gas_limit: int
    subscription_fee_paid: int
    subscriber_data: bytes = b""

    @property
    def digest(self) -> HashDigest:
        return cached_digest(self)

    @property
    def subscriber(self) -> Address:
        return self.subscription_ref.subscriber


@dataclass(frozen=True)
class Block:
    number: int
    parent: HashDigest
    timestamp: float
    miner: Address
    gas_limit: int
    gas_used: int
    state_root: HashDigest
    event_state_root: HashDigest
    receipts_root: HashDigest
    external_messages: tuple[ProtocolMessage, ...] = ()
    executions: tuple[TriggeredExecution, ...] = ()
    round_sizes: tuple[int, ...] = field(default=())

    @property
    def hash(self) -> HashDigest:
        return cached_digest(self)


# -- built-in events ---------------------------------------------------------

SYSTEM_ADDRESS = ZERO_ADDRESS

NEW_BLOCK_EVENT = define_event(
    SYSTEM_ADDRESS, [("number", VarType.INT), ("timestamp", VarType.INT)],
    "emitted by the system once per block")
TRANSFER_EVENT = define_event(
    SYSTEM_ADDRESS,
    [("from", VarType.ADDRESS), ("to", VarType.ADDRESS), ("amount", VarType.INT), ("data", VarType.BYTES)],
    "token transfer; every contract is subscribed to transfers addressed to it")
BUILTIN_EVENTS = (NEW_BLOCK_EVENT, TRANSFER_EVENT)
