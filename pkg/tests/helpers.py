"""Shared builders for the test suite."""
from __future__ import annotations

from edsc.core import MessageKind, SubscribeBody, SubscriptionUpdateBody, UnsubscribeBody, VarType, make_message
from edsc.crypto import KeyPair

CREATOR = KeyPair.from_seed("creator")
OWNER = KeyPair.from_seed("owner")


def sub_msg(key: KeyPair, nonce: int, body: SubscribeBody):
    return make_message(MessageKind.SUBSCRIBE, key, nonce, body)


def unsub_msg(key: KeyPair, nonce: int, event_id, subscriber, ordinal: int):
    return make_message(MessageKind.UNSUBSCRIBE, key, nonce, UnsubscribeBody(event_id, subscriber, ordinal))


def update_msg(key: KeyPair, nonce: int, ordinal: int, body: SubscribeBody):
    return make_message(MessageKind.SUBSCRIPTION_UPDATE, key, nonce, SubscriptionUpdateBody(ordinal, body))


PRICE_SCHEMA = [("price", VarType.INT), ("tag", VarType.BYTES)]
