"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The default-parameter comparison runs at full length (10k blocks).  The
parameter sweeps run 1000 blocks per point on a common seed so that every
point shares its mining and workload streams.
"""
from __future__ import annotations

import dataclasses
import os
import random
import subprocess
import sys
import time
from collections import Counter, defaultdict

import pytest

from conftest import VERDICTS
from oracles import brute_force, random_universe
from pipeline import indexed

from edsc.cli import main as cli_main
from edsc.core import (
    ConsumeGas,
    EmitEvent,
    EventUpdate,
    MessageKind,
    Noop,
    RevertIf,
    SendTokens,
    SubscribeBody,
    SubscribeTo,
    SubscriptionRef,
    SubscriptionUpdateBody,
    TriggeredExecution,
    UnsubscribeBody,
    VarType,
    make_message,
    sign_update,
)
from edsc.crypto import Address, HashDigest, KeyPair
from edsc.ledger import (
    ConsensusParams,
    ReceiptStatus,
    Verdict,
    build_block,
    execute_execution,
    genesis_block,
    genesis_deploy,
    genesis_event,
    genesis_state,
    genesis_subscribe,
    state_root,
    validate_block,
    validate_chain,
    write_block_log,
)
from edsc.manager import BlockContext, RateLimits
from edsc.netsim import SimConfig, run_simulation
from edsc.netsim.metrics import summarize

I = 12.42
SWEEP_BLOCKS = 1000
SWEEP_SEED = 0
ORACLE = KeyPair.from_seed("acceptance-oracle")
MINER = KeyPair.from_seed("acceptance-miner").address
SINK = Address(b"\x5a" * 20)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


# -- shared simulation runs ----------------------------------------------------------------

@pytest.fixture(scope="module")
def default_runs():
    out = {}
    start = time.perf_counter()
    for model in ("edsc", "baseline"):
        out[model] = run_simulation(SimConfig(model=model))
    return out, time.perf_counter() - start


_SWEEP: dict[tuple, float] = {}


def sweep_mean(model: str, **changes) -> float:
    key = (model, tuple(sorted(changes.items())))
    if key not in _SWEEP:
        cfg = SimConfig(model=model, run_length=SWEEP_BLOCKS, seed=SWEEP_SEED).replace(**changes)
        _SWEEP[key] = summarize(run_simulation(cfg))["mean"]
    return _SWEEP[key]


def _nondecreasing(xs):
    return all(a <= b for a, b in zip(xs, xs[1:]))


def _increasing(xs):
    return all(a < b for a, b in zip(xs, xs[1:]))


# -- 1-3: default comparison ----------------------------------------------------------------

def test_c01_default_ratio_and_runtime(default_runs):
    runs, elapsed = default_runs
    e, b = summarize(runs["edsc"]), summarize(runs["baseline"])
    ratio = b["mean"] / e["mean"]
    verdict(1, 2.0 <= ratio <= 5.0 and elapsed < 300,
            f"ratio {ratio:.3f} (edsc {e['mean']:.2f}s, baseline {b['mean']:.2f}s), both runs {elapsed:.0f}s")


def test_c02_baseline_mean_at_least_three_intervals(default_runs):
    runs, _ = default_runs
    mean = summarize(runs["baseline"])["mean"]
    verdict(2, mean >= 3.0 * I, f"baseline mean {mean:.2f}s = {mean / I:.2f} x interval")


def test_c03_edsc_median_near_one_interval(default_runs):
    runs, _ = default_runs
    med = summarize(runs["edsc"])["p50"]
    verdict(3, med <= 1.25 * I, f"edsc median {med:.2f}s = {med / I:.2f} x interval")


# -- 4-6: sweeps --------------------------------------------------------------------------------

def test_c04_interval_sweep():
    values = [8.0, 12.42, 20.0, 30.0, 45.0, 60.0]
    e = [sweep_mean("edsc", block_interval=v) for v in values]
    b = [sweep_mean("baseline", block_interval=v) for v in values]
    ratios = [y / x for x, y in zip(e, b)]
    ok = min(ratios) >= 2 and _nondecreasing(e) and _nondecreasing(b)
    verdict(4, ok, "ratios " + ", ".join(f"{v:g}:{r:.2f}" for v, r in zip(values, ratios)))


@pytest.mark.parametrize("axis,values", [
    ("block_delay", [0.5, 2.3, 5.0, 10.0]),
    ("msg_delay_ms", [10.0, 100.0, 500.0, 2000.0]),
])
def test_c05_gap_grows_with_delay(axis, values):
    gaps = [sweep_mean("baseline", **{axis: v}) - sweep_mean("edsc", **{axis: v}) for v in values]
    verdict(5, _increasing(gaps), f"{axis} gaps " + ", ".join(f"{v:g}:{g:.2f}" for v, g in zip(values, gaps)))


def test_c06_block_capacity():
    values = [8_000_000, 4_000_000, 2_000_000]
    e = [sweep_mean("edsc", block_gas_limit=v) for v in values]
    b = [sweep_mean("baseline", block_gas_limit=v) for v in values]
    ratios = [y / x for x, y in zip(e, b)]
    ok = _increasing(e) and _increasing(b) and min(ratios) >= 2
    verdict(6, ok, "edsc " + ", ".join(f"{x:.1f}" for x in e) + "; baseline "
            + ", ".join(f"{x:.1f}" for x in b) + "; ratios " + ", ".join(f"{r:.2f}" for r in ratios))


# -- 7: determinism -----------------------------------------------------------------------------

def test_c07_same_seed_same_bytes(tmp_path, capsys):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(f'{{"run_length": {SWEEP_BLOCKS}, "seed": {SWEEP_SEED}}}')
    assert cli_main(["run", str(scenario), "--out", str(tmp_path / "run0")]) == 0
    capsys.readouterr()
    # the second run is a fresh interpreter with a different string-hash seed
    env = dict(os.environ, PYTHONHASHSEED="12345")
    proc = subprocess.run([sys.executable, "-m", "edsc.cli", "run", str(scenario), "--out", str(tmp_path / "run1")],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    same = all((tmp_path / "run0" / name).read_bytes() == (tmp_path / "run1" / name).read_bytes()
               for name in ("edsc_metrics.csv", "baseline_metrics.csv"))
    verdict(7, same, "in-process and subprocess runs with one seed write byte-identical CSVs for both models")


# -- 8: validation and tampering ---------------------------------------------------------------------

def _tamper(block, kind: str, rng: random.Random):
    ex = list(block.executions)
    if kind == "swap":
        i, j = sorted(rng.sample(range(len(ex)), 2))
        ex[i], ex[j] = ex[j], ex[i]
        return dataclasses.replace(block, executions=tuple(ex)), Verdict.BAD_ORDER
    if kind == "drop":
        del ex[rng.randrange(len(ex))]
        return dataclasses.replace(block, executions=tuple(ex)), Verdict.MISSING_EXECUTION
    if kind == "fee":
        i = rng.randrange(len(ex))
        ex[i] = dataclasses.replace(ex[i], gas_price=ex[i].gas_price + rng.choice([-1, 1]))
        return dataclasses.replace(block, executions=tuple(ex)), Verdict.BAD_EXECUTION
    field, reason = rng.choice([("state_root", Verdict.BAD_STATE_ROOT),
                                ("event_state_root", Verdict.BAD_EVENT_STATE_ROOT),
                                ("receipts_root", Verdict.BAD_RECEIPTS_ROOT)])
    raw = bytearray(getattr(block, field))
    raw[rng.randrange(32)] ^= 1 << rng.randrange(8)
    return dataclasses.replace(block, **{field: HashDigest(bytes(raw))}), reason


def test_c08_honest_log_and_tampering(tmp_path, capsys):
    res = run_simulation(SimConfig(model="edsc", run_length=500, seed=8))
    genesis, blocks = res.chain[0], res.chain[1:501]
    assert len(blocks) == 500
    path = tmp_path / "honest.ndjson"
    write_block_log(str(path), genesis, res.genesis_state, res.params, blocks)
    honest_ok = cli_main(["validate", str(path)]) == 0
    capsys.readouterr()

    states, parent, state = [], genesis, res.genesis_state
    for b in blocks:
        states.append((parent, state))
        r = validate_block(parent, state, b, res.params)
        assert r.ok
        parent, state = b, r.state
    rng = random.Random(88)
    eligible = [i for i, b in enumerate(blocks) if len({e.digest for e in b.executions}) >= 2]
    wrong = []
    for t in range(50):
        kind = ("swap", "root", "fee", "drop")[t % 4]
        i = rng.choice(eligible)
        bad, want = _tamper(blocks[i], kind, rng)
        got = validate_block(*states[i], bad, res.params).reason
        if got != want:
            wrong.append((kind, i, got, want))
    verdict(8, honest_ok and not wrong,
            f"honest 500-block log valid={honest_ok}; {50 - len(wrong)}/50 tamperings rejected with the expected reason")


# -- 9: indexed matching equals brute force -----------------------------------------------------------

def test_c09_indexed_equals_brute_force():
    rng = random.Random(9)
    mismatches, fired = [], 0
    for n in range(1000):
        u = random_universe(rng, max_events=50, max_subs=200, max_updates=500)
        want, got = brute_force(u), indexed(u)
        fired += sum(len(b) for b in want[0])
        if want != got:
            mismatches.append(n)
    verdict(9, not mismatches, f"1000 universes, {fired} triggers, mismatches {mismatches[:5]}")


# -- 10: ordering and caps by full scan ----------------------------------------------------------------

def _scan(blocks, k: int, m: int, epoch: int) -> list[str]:
    problems = []
    per_epoch: dict[int, Counter] = defaultdict(Counter)
    for b in blocks:
        sizes = b.round_sizes or (len(b.executions),)
        if sum(sizes) != len(b.executions):
            problems.append(f"block {b.number}: round sizes do not cover executions")
        start = 0
        for size in sizes:
            chunk = b.executions[start:start + size]
            start += size
            for x, y in zip(chunk, chunk[1:]):
                if (-x.gas_price, x.subscription_ref.ordinal) > (-y.gas_price, y.subscription_ref.ordinal):
                    problems.append(f"block {b.number}: order")
        for upd, c in Counter(e.triggering_update for e in b.executions).items():
            if c > k:
                problems.append(f"block {b.number}: {c} triggers for one update")
        per_epoch[b.number // epoch].update(e.subscriber for e in b.executions)
    for ep, counts in per_epoch.items():
        for acct, c in counts.items():
            if c > m:
                problems.append(f"epoch {ep}: {c} triggers for one account")
    return problems


def _stress_chain(seed: int, k: int, m: int, epoch: int, n_blocks: int = 40):
    rng = random.Random(seed)
    limits = RateLimits(max_triggers_per_event_update=k, max_triggers_per_account_per_epoch=m,
                        epoch_length=epoch)
    params = ConsensusParams(limits=limits)
    st = genesis_state({ORACLE.address: 10**15})
    events = []
    for i in range(3):
        st, eid = genesis_event(st, ORACLE.address, [("v", VarType.INT)], f"stress{i}")
        events.append(eid)
    for c in range(30):
        actions = [ConsumeGas(rng.randrange(100, 3000))]
        if rng.random() < 0.3:
            actions.append(EmitEvent(rng.choice(events), (rng.randrange(10),)))
        st, addr = genesis_deploy(st, ORACLE.address, actions, balance=10**12, salt=1000 + c)
        for eid in rng.sample(events, rng.randint(1, 3)):
            st = genesis_subscribe(st, SubscribeBody(eid, addr, rng.choice([5, 5, 7, 9]), 60_000))
    parent, blocks, nonce = genesis_block(st, params), [], 0
    for n in range(1, n_blocks + 1):
        ups = []
        for _ in range(rng.randrange(0, 5)):
            nonce += 1
            ups.append(sign_update(EventUpdate(rng.choice(events), ORACLE.address, b"", nonce,
                                               (rng.randrange(10),), 0, 50), ORACLE))
        r = build_block(parent, st, (), ups, params, timestamp=n * 10.0, miner=MINER)
        blocks.append(r.block)
        parent, st = r.block, r.state
    return blocks


def test_c10_ordering_and_caps_full_scan(default_runs):
    runs, _ = default_runs
    chain = runs["edsc"].chain[1:]
    lim = runs["edsc"].params.limits
    problems = _scan(chain, lim.max_triggers_per_event_update, lim.max_triggers_per_account_per_epoch,
                     lim.epoch_length)
    scanned, capped = len(chain), 0
    for seed in range(6):
        k, m, epoch = (4, 3, 1) if seed % 2 else (8, 5, 2)
        blocks = _stress_chain(seed, k, m, epoch)
        scanned += len(blocks)
        problems += _scan(blocks, k, m, epoch)
        capped += sum(1 for b in blocks if len(b.executions) >= m)
    verdict(10, not problems and capped > 0,
            f"{scanned} blocks scanned, {capped} stress blocks at the cap, problems {problems[:3]}")


# -- 11: atomicity and conservation ------------------------------------------------------------------------

def test_c11_atomicity_and_conservation():
    rng = random.Random(11)
    st = genesis_state({ORACLE.address: 10**15})
    st, eid = genesis_event(st, ORACLE.address, [("v", VarType.INT)], "atomic")
    st, other = genesis_event(st, ORACLE.address, [("v", VarType.INT)], "atomic-out")
    contracts = []
    for c in range(20):
        actions = [ConsumeGas(rng.randrange(0, 5000)), SendTokens(SINK, rng.randrange(1, 100)),
                   EmitEvent(other, (rng.randrange(10),)),
                   SubscribeTo(SubscribeBody(other, Address(bytes(20)), 3, 50_000)),
                   RevertIf("payload.v < 3")]
        st, addr = genesis_deploy(st, ORACLE.address, actions, balance=10**13, salt=c)
        contracts.append(addr)
    supply = st.total_supply()
    reverted, bad = 0, []
    for n in range(1000):
        addr = rng.choice(contracts)
        upd = sign_update(EventUpdate(eid, ORACLE.address, b"", n + 1, (rng.randrange(10),),
                                      rng.randrange(0, 4), 0), ORACLE)
        ex = TriggeredExecution(SubscriptionRef(eid, addr, 0), upd.digest, rng.randint(1, 30),
                                150_000, upd.subscription_fee)
        before = st
        st, receipt, emitted = execute_execution(st, ex, upd, BlockContext(n + 1, 0.0, MINER))
        if st.total_supply() != supply:
            bad.append((n, "supply"))
        if receipt.status is ReceiptStatus.REVERTED:
            reverted += 1
            fee = receipt.gas_used * ex.gas_price
            expect = {a: x.balance for a, x in before.accounts.items()}
            expect[addr] -= fee
            expect[MINER] = expect.get(MINER, 0) + fee
            got = {a: x.balance for a, x in st.accounts.items()}
            if emitted or receipt.subscription_fee or receipt.miner_fee != fee or got != expect \
                    or st.contracts != before.contracts or st.events != before.events:
                bad.append((n, "revert left side effects"))
        else:
            cost = receipt.gas_used * ex.gas_price + ex.subscription_fee_paid
            sent = next(a.amount for a in st.contracts[addr].on_trigger if isinstance(a, SendTokens))
            if st.balance(addr) != before.balance(addr) - cost - sent or len(emitted) != 2 \
                    or st.balance(SINK) != before.balance(SINK) + sent \
                    or st.events.next_ordinal != before.events.next_ordinal + 1:
                bad.append((n, "success effects"))
    frac = reverted / 1000

    # the same scripts driven through whole blocks: supply is constant after every block
    for addr in contracts:
        st = genesis_subscribe(st, SubscribeBody(eid, addr, rng.randint(1, 30), 150_000, 3))
    parent, block_supply, executed = genesis_block(st), st.total_supply(), 0
    for n in range(1, 31):
        ups = [sign_update(EventUpdate(eid, ORACLE.address, b"", 3 * n + j - 2, (rng.randrange(10),),
                                       rng.randrange(0, 4), 20), ORACLE) for j in range(3)]
        r = build_block(parent, st, (), ups, timestamp=n * 10.0, miner=MINER)
        parent, st = r.block, r.state
        executed += len(r.block.executions)
        if r.skipped or st.total_supply() != block_supply:
            bad.append((n, "block supply"))
    verdict(11, not bad and 0.25 <= frac <= 0.35 and executed >= 30 * 3 * len(contracts),
            f"1000 executions, revert fraction {frac:.3f}, {executed} more across 30 blocks, violations {bad[:3]}")


# -- 12: activation delay under randomized schedules ----------------------------------------------------

def _schedule_run(seed: int):
    rng = random.Random(seed)
    delay = ConsensusParams().activation_delay
    owners = [KeyPair.from_seed(f"owner-{seed}-{i}") for i in range(5)]
    st = genesis_state({o.address: 10**12 for o in owners} | {ORACLE.address: 10**12})
    st, eid = genesis_event(st, ORACLE.address, [("v", VarType.INT)], "activation")
    addrs = []
    for i, o in enumerate(owners):
        st, a = genesis_deploy(st, o.address, [Noop()], balance=10**12, salt=i)
        addrs.append(a)
    g = genesis_block(st)
    # per contract: list of (effective block, op, ordinal, price)
    timeline: dict[Address, list] = {a: [] for a in addrs}
    status = {a: None for a in addrs}  # (ordinal, price) of the live subscription, if any
    nonces = {o.address: 0 for o in owners}
    parent, state, blocks, mismatches, fired = g, st, [], [], 0
    for n in range(1, 31):
        msgs, planned = [], []
        for o, a in zip(owners, addrs):
            if rng.random() > 0.35:
                continue
            nonces[o.address] += 1
            price = rng.randint(1, 9)
            if status[a] is None:
                msgs.append(make_message(MessageKind.SUBSCRIBE, o, nonces[o.address],
                                         SubscribeBody(eid, a, price, 50_000)))
                planned.append(("add", a, price))
            elif rng.random() < 0.5:
                msgs.append(make_message(MessageKind.UNSUBSCRIBE, o, nonces[o.address],
                                         UnsubscribeBody(eid, a, status[a][0])))
                planned.append(("remove", a, None))
            else:
                body = SubscriptionUpdateBody(status[a][0], SubscribeBody(eid, a, price, 50_000))
                msgs.append(make_message(MessageKind.SUBSCRIPTION_UPDATE, o, nonces[o.address], body))
                planned.append(("price", a, price))
        upd = sign_update(EventUpdate(eid, ORACLE.address, b"", n, (n,), 0, 10), ORACLE)
        r = build_block(parent, state, msgs, [upd], timestamp=n * 10.0, miner=MINER)
        assert not r.skipped
        for op, a, price in planned:
            if op == "add":
                ordinal = next(s.ordinal for s in r.state.events.subscriptions[eid] if s.subscriber == a
                               and all(s.ordinal != t[2] for t in timeline[a]))
                status[a] = (ordinal, price)
                timeline[a].append((n + delay, "add", ordinal, price))
            elif op == "remove":
                timeline[a].append((n + delay, "remove", status[a][0], None))
                status[a] = None
            else:
                timeline[a].append((n + delay, "price", status[a][0], price))
                status[a] = (status[a][0], price)
        expected = []
        for a in addrs:
            live = None
            for eff, op, ordinal, price in timeline[a]:
                if eff > n:
                    break
                live = None if op == "remove" else (ordinal, price)
            if live is not None:
                expected.append((-live[1], live[0], bytes(a)))
        expected.sort()
        got = [(-e.gas_price, e.subscription_ref.ordinal, bytes(e.subscriber))
               for e in r.block.executions if e.subscription_ref.event_id == eid]
        fired += len(got)
        if got != expected:
            mismatches.append((seed, n))
        blocks.append(r.block)
        parent, state = r.block, r.state
    replay, _ = validate_chain(g, st, ConsensusParams(), blocks)
    if not replay.ok or state_root(replay.state) != state_root(state):
        mismatches.append((seed, "replay"))
    return mismatches, fired


def test_c12_activation_delay_respected():
    mismatches, fired = [], 0
    for seed in range(25):
        bad, count = _schedule_run(seed)
        mismatches += bad
        fired += count
    verdict(12, not mismatches and fired > 0,
            f"25 randomized schedules x 30 blocks, {fired} triggers checked, mismatches {mismatches[:3]}")
