from __future__ import annotations

import bisect
import json
import math
import random
import statistics

import pytest

from edsc.core import EventUpdate
from edsc.ledger import build_block, validate_chain
from edsc.netsim import ConfigError, SimConfig, Simulation, WorkloadConfig, run_simulation, summarize
from edsc.netsim.config import from_mapping, to_mapping
from edsc.netsim.engine import BlockInfo, LiveItem
from edsc.netsim.gossip import gossip, split_targets
from edsc.netsim.metrics import percentile, read_records, records_csv, write_outputs
from edsc.netsim.rng import substream

QUIET = WorkloadConfig(emit_interval=1e12)  # no oracle traffic: pure mining


# -- gossip -------------------------------------------------------------------------------

def test_single_peer_gets_full_message():
    full, hashes = split_targets([1], random.Random(0))
    assert full == [1] and hashes == []
    res = gossip(0, 0.0, 2, random.Random(1), mean_delay=0.1, hash_wait=0.5)
    assert res.full_sends == 1 and res.hash_sends == 0 and res.fetches == 0


def test_sqrt_split_for_hundred_peers():
    full, hashes = split_targets(list(range(100)), random.Random(3))
    assert len(full) == 10 and len(hashes) == 90
    assert sorted(full + hashes) == list(range(100))


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5, 9, 10, 17, 99])
def test_split_size_is_ceil_sqrt(p):
    full, _ = split_targets(list(range(p)), random.Random(p))
    assert len(full) == math.ceil(math.sqrt(p))


def test_fast_full_copies_cancel_fetches():
    # with millisecond links, full copies always beat the 500 ms hash timer
    for seed in range(20):
        res = gossip(0, 0.0, 20, random.Random(seed), mean_delay=0.001, hash_wait=0.5)
        assert res.fetches == 0
        assert max(res.arrival) < 0.5


def test_slow_links_trigger_fetches_and_reach_everyone():
    res = gossip(3, 5.0, 20, random.Random(2), mean_delay=2.0, hash_wait=0.5)
    assert res.arrival[3] == 5.0
    assert all(t >= 5.0 and math.isfinite(t) for t in res.arrival)
    assert res.fetches > 0


def test_gossip_deterministic_per_seed():
    a = gossip(0, 0.0, 20, random.Random(7), mean_delay=0.1, hash_wait=0.5)
    b = gossip(0, 0.0, 20, random.Random(7), mean_delay=0.1, hash_wait=0.5)
    assert a == b


# -- mining process ------------------------------------------------------------------------

def test_single_miner_interval_mean():
    rng = substream(0, "mining:0")
    draws = [12.42 * rng.expovariate(1.0) for _ in range(10_000)]
    assert abs(statistics.fmean(draws) / 12.42 - 1) < 0.02


def test_two_equal_miners_superpose():
    rngs = [substream(1, f"mining:{i}") for i in range(2)]
    nxt = [24.84 * r.expovariate(1.0) for r in rngs]
    times = []
    for _ in range(10_000):
        i = 0 if nxt[0] <= nxt[1] else 1
        times.append(nxt[i])
        nxt[i] += 24.84 * rngs[i].expovariate(1.0)
    assert abs(times[-1] / 10_000 / 12.42 - 1) < 0.02


@pytest.fixture(scope="module")
def zero_delay_run():
    cfg = SimConfig(node_count=2, block_delay=0.0, msg_delay_ms=0.0, hash_wait_ms=0.0, run_length=10_000,
                    workload=QUIET, seed=5)
    return run_simulation(cfg)


def test_zero_delay_has_no_stale_blocks(zero_delay_run):
    assert zero_delay_run.stale_rate == 0.0


def test_zero_delay_chain_interval(zero_delay_run):
    chain = zero_delay_run.chain
    mean = chain[10_000].timestamp / 10_000
    assert abs(mean / 12.42 - 1) < 0.02


def test_stale_rate_tracks_delay_ratio():
    low = run_simulation(SimConfig(block_delay=0.1, run_length=3000, workload=QUIET, seed=2))
    mid = run_simulation(SimConfig(block_delay=2.3, run_length=3000, workload=QUIET, seed=2))
    high = run_simulation(SimConfig(block_delay=6.0, run_length=3000, workload=QUIET, seed=2))
    assert low.stale_rate < 0.01
    assert low.stale_rate < mid.stale_rate < high.stale_rate


# -- fork choice ------------------------------------------------------------------------------

def _fork_sim():
    cfg = SimConfig(node_count=3, run_length=10, workload=QUIET)
    sim = Simulation(cfg)
    g = sim.genesis
    return sim, g


def _mine(sim, parent_hash, miner, t, updates=()):
    info = sim.blocks[parent_hash]
    res = build_block(info.block, info.state, (), list(updates), sim.params, timestamp=t,
                      miner=sim.miner_addr[miner])
    h = bytes(res.block.hash)
    sim.blocks[h] = BlockInfo(res.block, res.state, res.trigger_updates, miner)
    return h


def test_longer_fork_wins_and_first_seen_breaks_ties():
    sim, g = _fork_sim()
    gh = bytes(g.hash)
    a = _mine(sim, gh, 0, 10.0)
    b = _mine(sim, gh, 1, 10.5)
    sim._arrive(2, a, 11.0)
    sim._arrive(2, b, 11.5)
    assert sim.head[2] == a  # tie: first received stays
    child_b = _mine(sim, b, 1, 20.0)
    sim._arrive(2, child_b, 21.0)
    assert sim.head[2] == child_b


def test_lower_block_leaves_head():
    sim, g = _fork_sim()
    gh = bytes(g.hash)
    a = _mine(sim, gh, 0, 10.0)
    a2 = _mine(sim, a, 0, 20.0)
    b = _mine(sim, gh, 1, 15.0)
    sim._arrive(2, a, 11.0)
    sim._arrive(2, a2, 21.0)
    sim._arrive(2, b, 22.0)
    assert sim.head[2] == a2


def test_orphan_buffered_until_parent():
    sim, g = _fork_sim()
    gh = bytes(g.hash)
    a = _mine(sim, gh, 0, 10.0)
    a2 = _mine(sim, a, 0, 20.0)
    sim._arrive(2, a2, 21.0)
    assert sim.head[2] == gh
    sim._arrive(2, a, 22.0)
    assert sim.head[2] == a2


def test_abandoned_fork_contents_return_to_pool():
    cfg = SimConfig(node_count=3, run_length=10)
    sim = Simulation(cfg)
    from edsc.core import sign_update

    upd = sign_update(EventUpdate(sim.feed_id, sim.oracle.address, b"", 1, (0, 0), 1, 50), sim.oracle)
    sim.live.append(LiveItem(upd, [0.0] * 3))
    gh = bytes(sim.genesis.hash)
    a = _mine(sim, gh, 0, 10.0)
    b = _mine(sim, gh, 1, 10.0, [upd])
    assert len(sim.blocks[b].block.executions) == cfg.workload.subscribers
    sim._arrive(2, b, 11.0)
    _, ups_on_b = sim._candidates(2, 12.0, sim.blocks[sim.head[2]].state)
    assert ups_on_b == []
    a2 = _mine(sim, a, 0, 20.0)
    sim._arrive(2, a, 21.0)
    sim._arrive(2, a2, 21.0)
    assert sim.head[2] == a2
    _, ups = sim._candidates(2, 22.0, sim.blocks[a2].state)
    assert ups == [upd]


# -- whole runs ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def edsc_run():
    sim = Simulation(SimConfig(model="edsc", run_length=300, seed=3))
    return sim, sim.run()


def test_records_sane(edsc_run):
    _, res = edsc_run
    assert res.records and res.missing == 0
    assert all(r.latency > 0 for r in res.records)
    s = summarize(res)
    assert s["samples"] == len(res.records) and s["p50"] <= s["p95"]


def test_eventual_consistency(edsc_run):
    sim, res = edsc_run
    chains = [sim.final_chain(i) for i in range(sim.n)]
    depth = min(len(c) for c in chains) - 1 - 6
    assert depth > 250
    for c in chains[1:]:
        assert [b.hash for b in c[:depth + 1]] == [b.hash for b in chains[0][:depth + 1]]
    prefix = chains[0][1:depth + 1]
    ok, _ = validate_chain(res.chain[0], res.genesis_state, res.params, prefix)
    assert ok.ok
    assert ok.state is not None and prefix[-1].state_root == sim.blocks[bytes(prefix[-1].hash)].block.state_root


def test_determinism_same_seed(edsc_run):
    _, res = edsc_run
    again = run_simulation(SimConfig(model="edsc", run_length=300, seed=3))
    assert records_csv(again.records) == records_csv(res.records)
    other = run_simulation(SimConfig(model="edsc", run_length=300, seed=4))
    assert records_csv(other.records) != records_csv(res.records)


def test_outputs_round_trip(edsc_run, tmp_path):
    _, res = edsc_run
    csv_path, json_path = write_outputs(res, str(tmp_path))
    back = read_records(csv_path)
    assert [r.trigger_id for r in back] == [r.trigger_id for r in res.records]
    assert all(abs(a.latency - b.latency) < 1e-5 for a, b in zip(back, res.records))
    summary = json.loads(open(json_path).read())
    assert {"mean", "p50", "p95", "stale_rate", "blocks"} <= set(summary)


def test_baseline_instant_network_needs_two_inclusions():
    cfg = SimConfig(model="baseline", node_count=4, block_delay=0.0, msg_delay_ms=0.0, hash_wait_ms=0.0,
                    run_length=200, seed=6, workload=WorkloadConfig(oracle_confirmations=1))
    res = run_simulation(cfg)
    stamps = [b.timestamp for b in res.chain]
    assert res.records
    for r in res.records:
        # blocks on the final chain mined after the emission, up to and including the callback block
        between = bisect.bisect_right(stamps, r.inclusion_time) - bisect.bisect_right(stamps, r.emit_time)
        assert between >= 2


def test_percentile_linear_interpolation():
    xs = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert percentile(xs, 50) == 3.0
    assert percentile(xs, 95) == pytest.approx(4.8)
    assert math.isnan(percentile([], 50))


# -- configuration ----------------------------------------------------------------------------

def test_config_round_trip_and_strictness():
    cfg = SimConfig(model="baseline", block_delay=1.5, workload=WorkloadConfig(subscribers=3))
    data = json.loads(json.dumps(to_mapping(cfg)))
    assert from_mapping(SimConfig, data) == cfg
    with pytest.raises(ConfigError, match="unknown keys"):
        from_mapping(SimConfig, {"bogus": 1})
    with pytest.raises(ConfigError, match="workload.subscribers"):
        from_mapping(SimConfig, {"workload": {"subscribers": "ten"}})
    with pytest.raises(ConfigError):
        from_mapping(SimConfig, {"model": "other"})
    with pytest.raises(ConfigError):
        from_mapping(SimConfig, {"hashpower": [0.5, 0.6], "node_count": 2})
    assert from_mapping(SimConfig, {}) == SimConfig()
