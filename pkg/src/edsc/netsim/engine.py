"""Discrete-event simulation of block production, gossip and the two oracle workloads.

Every node mines on its own head with exponential inter-block times, blocks
reach the other nodes after a constant delay, and each node follows the
highest chain it knows (first received wins a tie).  Gossiped items carry a
per-node arrival vector; a miner sees exactly the items that reached it by
its mining time and that are not yet included on its head chain, so node
pools are implicit and reorgs return abandoned items to them automatically.

Two workloads share this machinery:

* ``edsc``: the oracle publishes a signed external event update; ten
  subscriber contracts are triggered in the block that includes it.
* ``baseline``: ten consumers each send a request transaction to the oracle
  account; once the request block has the configured number of
  confirmations on the oracle's head chain, the oracle sends a response
  transaction to the consumer contract, whose transfer callback is measured.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

from ..core import (
    TRANSFER_EVENT,
    Block,
    ConsumeGas,
    EventUpdate,
    MessageKind,
    ProtocolMessage,
    SubscribeBody,
    TransferBody,
    VarType,
    make_message,
    sign_update,
)
from ..crypto import Address, KeyPair
from ..ledger import (
    ChainState,
    ConsensusParams,
    build_block,
    genesis_block,
    genesis_deploy,
    genesis_event,
    genesis_state,
    genesis_subscribe,
)
from .config import SimConfig
from .gossip import gossip
from .rng import substream

log = logging.getLogger(__name__)

RICH = 10 ** 15
CONTRACT_FUNDS = 10 ** 13

# event kinds in tie-break rank order
ARRIVE, MINE, EMIT, SEND = 0, 1, 2, 3


@dataclass(frozen=True)
class MetricsRecord:
    model: str
    trigger_id: str
    emit_time: float
    inclusion_time: float
    block_number: int

    @property
    def latency(self) -> float:
        return self.inclusion_time - self.emit_time


@dataclass
class BlockInfo:
    block: Block
    state: ChainState
    trigger_updates: list[EventUpdate]
    miner: int


@dataclass
class LiveItem:
    item: Union[EventUpdate, ProtocolMessage]
    arrival: list[float]


@dataclass
class SimResult:
    config: SimConfig
    records: list[MetricsRecord]
    chain: list[Block]
    blocks_mined: int
    expected_samples: int
    genesis_state: ChainState
    params: ConsensusParams
    node_heads: list[Block] = field(default_factory=list)

    @property
    def stale_rate(self) -> float:
        on_chain = len(self.chain) - 1
        return (self.blocks_mined - on_chain) / self.blocks_mined if self.blocks_mined else 0.0

    @property
    def missing(self) -> int:
        return self.expected_samples - len(self.records)

    def latencies(self) -> list[float]:
        return [r.latency for r in self.records]


def _request_id(k: int, j: int) -> bytes:
    return b"req" + k.to_bytes(8, "big") + j.to_bytes(2, "big")


def _parse_request(data: bytes) -> Optional[tuple[int, int]]:
    if len(data) != 13 or not data.startswith(b"req"):
        return None
    return int.from_bytes(data[3:11], "big"), int.from_bytes(data[11:13], "big")


class Simulation:
    def __init__(self, config: SimConfig):
        self.cfg = config
        self.params = config.consensus
        n = config.node_count
        self.n = n
        self.miner_addr = [KeyPair.from_seed(f"miner-{i}").address for i in range(n)]
        self.oracle = KeyPair.from_seed("oracle")
        self.owner = KeyPair.from_seed("owner")
        w = config.workload
        self.consumers = [KeyPair.from_seed(f"consumer-{j}") for j in range(w.subscribers)]
        self._build_genesis()

        self.blocks: dict[bytes, BlockInfo] = {bytes(self.genesis.hash): BlockInfo(self.genesis, self.state0, [], -1)}
        g = bytes(self.genesis.hash)
        self.head = [g] * n
        self.known: list[set[bytes]] = [{g} for _ in range(n)]
        self.orphans: list[dict[bytes, list[bytes]]] = [{} for _ in range(n)]
        self.live: list[LiveItem] = []
        self.heap: list = []
        self.seq = 0
        self.msg_seq = 0
        self.mined = 0
        self.stopped = False
        self.end_height = config.run_length + config.finality_margin + config.tail_blocks
        self.emit_times: list[float] = []
        self.mine_rng = [substream(config.seed, f"mining:{i}") for i in range(n)]
        self.work_rng = substream(config.seed, "workload")
        # baseline oracle bookkeeping
        self.scanned: set[bytes] = {g}
        self.answered: set[bytes] = set()
        self.oracle_nonce = 0

    # -- setup ----------------------------------------------------------------------

    def _build_genesis(self) -> None:
        cfg, w = self.cfg, self.cfg.workload
        balances = {self.oracle.address: RICH, self.owner.address: RICH}
        if cfg.model == "baseline":
            balances.update({c.address: RICH for c in self.consumers})
        state = genesis_state(balances)
        self.feed_id: Optional[Address] = None
        self.contracts: list[Address] = []
        if cfg.model == "edsc":
            state, self.feed_id = genesis_event(state, self.oracle.address,
                                                [("value", VarType.INT), ("request", VarType.INT)], "oracle feed")
        for j in range(w.subscribers):
            owner = self.owner.address if cfg.model == "edsc" else self.consumers[j].address
            state, addr = genesis_deploy(state, owner, [ConsumeGas(w.consume_gas)], balance=CONTRACT_FUNDS,
                                         salt=j, transfer_gas_price=w.gas_price, transfer_gas_limit=w.gas_limit)
            self.contracts.append(addr)
            if cfg.model == "edsc":
                state = genesis_subscribe(state, SubscribeBody(self.feed_id, addr, w.gas_price, w.gas_limit,
                                                               w.max_subscription_fee))
        self.contract_index = {bytes(a): j for j, a in enumerate(self.contracts)}
        self.state0 = state
        self.genesis = genesis_block(state, self.params)

    # -- event queue ----------------------------------------------------------------

    def _push(self, time: float, kind: int, payload) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (time, kind, self.seq, payload))

    def _schedule_mining(self, i: int, now: float) -> None:
        mean = self.cfg.block_interval / self.cfg.shares[i]
        self._push(now + mean * self.mine_rng[i].expovariate(1.0), MINE, i)

    def _schedule_emission(self, now: float) -> None:
        self._push(now + self.cfg.emit_interval * self.work_rng.expovariate(1.0), EMIT, None)

    def _gossip(self, item, origin: int, now: float) -> None:
        rng = substream(self.cfg.seed, f"gossip:{self.msg_seq}")
        self.msg_seq += 1
        res = gossip(origin, now, self.n, rng, mean_delay=self.cfg.msg_delay_ms / 1000.0,
                     hash_wait=self.cfg.hash_wait_ms / 1000.0)
        self.live.append(LiveItem(item, res.arrival))

    # -- chain tracking -------------------------------------------------------------

    def _height(self, h: bytes) -> int:
        return self.blocks[h].block.number

    def _accept(self, node: int, h: bytes, now: float) -> None:
        stack = [h]
        while stack:
            cur = stack.pop()
            if cur in self.known[node]:
                continue
            self.known[node].add(cur)
            if self._height(cur) > self._height(self.head[node]):
                self.head[node] = cur
                if node == self.cfg.workload.oracle_node and self.cfg.model == "baseline":
                    self._oracle_observe(now)
            stack.extend(self.orphans[node].pop(cur, []))

    def _arrive(self, node: int, h: bytes, now: float) -> None:
        if h in self.known[node]:
            return
        parent = bytes(self.blocks[h].block.parent)
        if parent not in self.known[node]:
            self.orphans[node].setdefault(parent, []).append(h)
            return
        self._accept(node, h, now)

    def _ancestor(self, h: bytes, height: int) -> bytes:
        while self._height(h) > height:
            h = bytes(self.blocks[h].block.parent)
        return h

    # -- mining ------------------------------------------------------------------------

    def _candidates(self, node: int, now: float, state: ChainState):
        msgs, upds = [], []
        for it in self.live:
            if it.arrival[node] > now:
                continue
            x = it.item
            if isinstance(x, EventUpdate):
                if x.nonce > state.events.last_nonce(x.event_id, x.publisher):
                    upds.append(x)
            elif x.sender_nonce > state.nonce(x.sender):
                msgs.append(x)
        return msgs, upds

    def _mine(self, i: int, now: float) -> None:
        parent = self.blocks[self.head[i]]
        msgs, upds = self._candidates(i, now, parent.state)
        res = build_block(parent.block, parent.state, msgs, upds, self.params, timestamp=now,
                          miner=self.miner_addr[i])
        h = bytes(res.block.hash)
        self.blocks[h] = BlockInfo(res.block, res.state, res.trigger_updates, i)
        self.mined += 1
        self._accept(i, h, now)
        arrive_at = now + self.cfg.block_delay
        for j in range(self.n):
            if j != i:
                self._push(arrive_at, ARRIVE, (j, h))
        if res.block.number >= self.end_height:
            self.stopped = True
        else:
            self._schedule_mining(i, now)
        if self.mined % 64 == 0:
            self._collect_garbage()

    def _collect_garbage(self) -> None:
        tip = self.head[0]
        depth = 12
        if self._height(tip) <= depth:
            return
        state = self.blocks[self._ancestor(tip, self._height(tip) - depth)].state

        def settled(x) -> bool:
            if isinstance(x, EventUpdate):
                return x.nonce <= state.events.last_nonce(x.event_id, x.publisher)
            return x.sender_nonce <= state.nonce(x.sender)

        self.live = [it for it in self.live if not settled(it.item)]

    # -- workloads -----------------------------------------------------------------------

    def _emit(self, now: float) -> None:
        k = len(self.emit_times)
        self.emit_times.append(now)
        w = self.cfg.workload
        if self.cfg.model == "edsc":
            upd = sign_update(EventUpdate(self.feed_id, self.oracle.address, b"", k + 1, (k, k),
                                          w.subscription_fee, w.inclusion_fee), self.oracle)
            self._gossip(upd, w.oracle_node, now)
        else:
            for j, consumer in enumerate(self.consumers):
                msg = make_message(MessageKind.TRANSFER, consumer, k + 1,
                                   TransferBody(self.oracle.address, 1, _request_id(k, j)), w.inclusion_fee)
                self._gossip(msg, (w.oracle_node + 1 + j) % self.n, now)
        self._schedule_emission(now)

    def _oracle_observe(self, now: float) -> None:
        """Answer requests whose block has enough confirmations on the oracle's head."""
        w = self.cfg.workload
        tip = self.head[w.oracle_node]
        top = self._height(tip) - w.oracle_confirmations + 1
        if top < 1:
            return
        h = self._ancestor(tip, top)
        fresh = []
        while h not in self.scanned:
            self.scanned.add(h)
            fresh.append(h)
            h = bytes(self.blocks[h].block.parent)
        for h in reversed(fresh):
            for msg in self.blocks[h].block.external_messages:
                body = msg.body
                if msg.kind is not MessageKind.TRANSFER or body.to != self.oracle.address:
                    continue
                req = _parse_request(body.data)
                if req is None or body.data in self.answered:
                    continue
                self.answered.add(body.data)
                self._push(now + w.oracle_response_latency, SEND, (req[0], req[1]))

    def _respond(self, k: int, j: int, now: float) -> None:
        w = self.cfg.workload
        self.oracle_nonce += 1
        msg = make_message(MessageKind.TRANSFER, self.oracle, self.oracle_nonce,
                           TransferBody(self.contracts[j], 1, _request_id(k, j)), w.inclusion_fee)
        self._gossip(msg, w.oracle_node, now)

    # -- driver ---------------------------------------------------------------------------

    def run(self) -> SimResult:
        for i in range(self.n):
            self._schedule_mining(i, 0.0)
        self._schedule_emission(0.0)
        while self.heap:
            now, kind, _, payload = heapq.heappop(self.heap)
            if kind == ARRIVE:
                self._arrive(payload[0], payload[1], now)
            elif self.stopped:
                continue
            elif kind == MINE:
                self._mine(payload, now)
            elif kind == EMIT:
                self._emit(now)
            elif kind == SEND:
                self._respond(payload[0], payload[1], now)
        return self._result()

    def final_chain(self, node: int = 0) -> list[Block]:
        chain = []
        h = self.head[node]
        while True:
            info = self.blocks[h]
            chain.append(info.block)
            if info.block.number == 0:
                break
            h = bytes(info.block.parent)
        chain.reverse()
        return chain

    def _result(self) -> SimResult:
        cfg = self.cfg
        chain = self.final_chain(0)
        cutoff_block = chain[min(cfg.run_length, len(chain) - 1)]
        cutoff = cutoff_block.timestamp
        model = cfg.model
        records = []
        for b in chain[1:]:
            info = self.blocks[bytes(b.hash)]
            for ex, upd in zip(b.executions, info.trigger_updates):
                rec = self._sample(ex.subscriber, upd)
                if rec is None:
                    continue
                k, j = rec
                t0 = self.emit_times[k]
                if t0 < cutoff:
                    records.append(MetricsRecord(model, f"{k}:{j}", t0, b.timestamp, b.number))
        records.sort(key=lambda r: (r.emit_time, r.trigger_id))
        expected = sum(1 for t in self.emit_times if t < cutoff) * cfg.workload.subscribers
        heads = [self.blocks[h].block for h in self.head]
        log.info("model=%s mined=%d chain=%d samples=%d/%d", model, self.mined, len(chain) - 1,
                 len(records), expected)
        return SimResult(cfg, records, chain, self.mined, expected, self.state0, self.params, heads)

    def _sample(self, subscriber: Address, upd: EventUpdate) -> Optional[tuple[int, int]]:
        j = self.contract_index.get(bytes(subscriber))
        if j is None:
            return None
        if self.cfg.model == "edsc":
            if upd.event_id == self.feed_id and upd.publisher == self.oracle.address:
                return int(upd.payload[1]), j
            return None
        if upd.event_id != TRANSFER_EVENT.event_id or upd.payload[0] != self.oracle.address:
            return None
        req = _parse_request(upd.payload[3])
        if req is None or req[1] != j:
            return None
        return req


def run_simulation(config: SimConfig) -> SimResult:
    return Simulation(config).run()
