"""Randomized traces run end to end; every run must keep the charging laws whatever the traffic mix."""

import json
import random

import pytest

from src.cdr import export_ga, merge_partials, parse_ga, record_to_wire
from src.simulator import Simulator
from src.traffic import ingest_trace, validate_session

SEEDS = range(100)
HUGE_BALANCE = 10**12
HOUR_MS = 3_600_000
SHORT_GAPS = (1, 200, 700, 1500, 12_000)
LONG_GAPS = (1, 700, 12_000, 900_000, 2_400_000)


def _packet(rng: random.Random, ctx: str, ts: int) -> dict:
    flavour = rng.choice(["web", "web", "news", "stream", "portal", "download", "game", "free", "blocked"])
    packet = {"kind": "PACKET", "ctx": ctx, "ts": ts, "src": "10.0.0.9", "dst": "192.0.2.1", "sport": 4000,
              "dport": 80, "proto": "TCP", "dir": rng.choice(["UL", "DL", "DL"]),
              "bytes": rng.choice([40, 500, 1500, 6000, 25_000])}
    if flavour == "news":
        packet["dst"] = "198.51.100.10"
    elif flavour == "stream":
        packet["proto"] = "UDP"
    elif flavour == "portal":
        packet["url"] = rng.choice(["portal.example/a", "portal.example/b"])
    elif flavour == "download":
        packet["app"] = "download-complete"
    elif flavour == "game":
        packet["app"] = "game-session"
    elif flavour == "free":
        packet["url"] = "free.example/index"
    elif flavour == "blocked":
        packet["dst"] = "203.0.113.9"
    return packet


def random_trace(seed: int, subscriber: str = "pre", mode: str = "PREPAID", contexts: int = 3,
                 gaps=SHORT_GAPS) -> list:
    rng = random.Random(seed)
    per_context = []
    for i in range(contexts):
        ctx = f"c{i}"
        ts = rng.randrange(0, 5000)
        qos = "gold"
        events = [{"kind": "ACTIVATE", "ctx": ctx, "ts": ts, "subscriber": subscriber, "apn": "internet",
                   "qos": qos, "mode": mode}]
        for n in range(rng.randrange(1, 40)):
            ts += rng.choice(gaps)
            roll = rng.random()
            if roll < 0.08:
                qos = "silver" if qos == "gold" else "gold"
                events.append({"kind": "QOS_CHANGE", "ctx": ctx, "ts": ts, "qos": qos})
            elif roll < 0.12:
                events.append({"kind": "EVENT", "ctx": ctx, "ts": ts, "event_id": f"{ctx}-ev{n}",
                               "class": "movie", "bucket": "movies"})
            elif roll < 0.16:
                events.append({"kind": "EVENT", "ctx": ctx, "ts": ts, "event_id": f"{ctx}-ev{n}",
                               "class": "call", "bucket": "calls"})
            else:
                events.append(_packet(rng, ctx, ts))
        events.append({"kind": "DEACTIVATE", "ctx": ctx, "ts": ts + rng.randrange(1, 5000)})
        per_context.append(events)

    # stable sort keeps each context's own order on equal timestamps
    return sorted((e for events in per_context for e in events), key=lambda e: e["ts"])


def _run(config, trace: list, flush_interval=None):
    events = ingest_trace("".join(json.dumps(e) + "\n" for e in trace))
    assert validate_session(events).ok
    simulator = Simulator(config, flush_interval)
    return simulator, simulator.run(events)


def _of(trace: list, ctx: str, kind: str) -> list:
    return [e for e in trace if e.get("ctx") == ctx and e["kind"] == kind]


def _ga_by_id(simulator) -> dict:
    return {r.cdr_id: record_to_wire(r) for r in merge_partials(parse_ga(export_ga(simulator.exports)))}


# === Money laws === #

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("balance", [0, 3_000, 50_000])
def test_charges_are_conserved(small_config, seed, balance):
    simulator, summary = _run(small_config(balance=balance), random_trace(seed))

    assert summary.conserved
    assert summary.amount_due == 0
    assert summary.prepaid_settled <= balance


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("balance", [0, 700, 3_000])
def test_accounts_never_overdraw(small_config, seed, balance):
    simulator, _ = _run(small_config(balance=balance), random_trace(seed))
    account = simulator.audit()["accounts"]["pre"]

    assert account["balance"] >= 0
    assert account["reserved"] == 0


@pytest.mark.parametrize("seed", SEEDS)
def test_every_packet_is_accounted_once(small_config, seed):
    simulator, _ = _run(small_config(balance=2_000), random_trace(seed))

    for audit in simulator.audit()["contexts"].values():
        assert audit["offered_packets"] == audit["admitted_packets"] + audit["denied_packets"] + audit["gated_packets"]
        assert audit["offered_bytes"] == audit["admitted_bytes"] + audit["denied_bytes"] + audit["gated_bytes"]


# === Admission === #

@pytest.mark.parametrize("seed", SEEDS)
def test_funded_account_is_never_gated(small_config, seed):
    simulator, summary = _run(small_config(balance=HUGE_BALANCE), random_trace(seed))

    assert summary.gated_packets == 0
    assert simulator.credit.stats.denied == 0
    assert not [r for r in simulator.rejected if r.code == "GATED"]


@pytest.mark.parametrize("seed", SEEDS)
def test_empty_account_gates_everything_chargeable(small_config, seed):
    trace = random_trace(seed)
    simulator, summary = _run(small_config(balance=0), trace)

    for ctx, audit in simulator.audit()["contexts"].items():
        packets = _of(trace, ctx, "PACKET")
        free = sum(1 for p in packets if p.get("url") == "free.example/index")
        assert audit["admitted_packets"] == free
        assert audit["gated_packets"] == audit["offered_packets"] - audit["denied_packets"] - free

    events = [e for e in trace if e["kind"] == "EVENT"]
    assert [r.code for r in simulator.rejected] == ["GATED"] * len(events)
    assert summary.total_charge == summary.prepaid_settled == 0


@pytest.mark.parametrize("seed", SEEDS)
def test_prepaid_and_postpaid_agree(small_config, seed):
    _, prepaid = _run(small_config(balance=HUGE_BALANCE), random_trace(seed))
    _, postpaid = _run(small_config(), random_trace(seed, subscriber="post", mode="POSTPAID"))

    assert prepaid.total_charge == postpaid.total_charge
    assert prepaid.prepaid_settled == prepaid.total_charge
    assert postpaid.amount_due == postpaid.total_charge
    assert postpaid.prepaid_settled == 0


# === Records === #

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("limit", [1_000, 7_000, 40_000])
def test_container_count_follows_volume_and_qos(small_config, seed, limit):
    trace = random_trace(seed, subscriber="post", mode="POSTPAID")
    simulator, _ = _run(small_config(volume_limit=limit), trace)
    audit = simulator.audit()["contexts"]

    for record in simulator.closed:
        qos_changes = len(_of(trace, record.context_id, "QOS_CHANGE"))
        admitted = audit[record.context_id]["admitted_bytes"]
        assert len(record.containers) == 1 + admitted // limit + qos_changes


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("limit", [1_000, 40_000])
@pytest.mark.parametrize("cut_hours", [(1, 2, 5), tuple(range(24))])
def test_container_count_follows_time_of_day(small_config, seed, limit, cut_hours):
    trace = random_trace(seed, subscriber="post", mode="POSTPAID", gaps=LONG_GAPS)
    simulator, _ = _run(small_config(volume_limit=limit, cut_hours=cut_hours), trace)
    audit = simulator.audit()["contexts"]

    for record in simulator.closed:
        ctx = record.context_id
        opened = _of(trace, ctx, "ACTIVATE")[0]["ts"]
        closed = _of(trace, ctx, "DEACTIVATE")[0]["ts"]
        tod_cuts = sum(1 for hour in range(opened // HOUR_MS + 1, closed // HOUR_MS + 1) if hour % 24 in cut_hours)
        qos_changes = len(_of(trace, ctx, "QOS_CHANGE"))
        admitted = audit[ctx]["admitted_bytes"]
        assert len(record.containers) == 1 + admitted // limit + qos_changes + tod_cuts


@pytest.mark.parametrize("seed", SEEDS)
def test_runs_are_deterministic(small_config, seed):
    first, _ = _run(small_config(balance=3_000), random_trace(seed))
    second, _ = _run(small_config(balance=3_000), random_trace(seed))

    assert export_ga(first.exports) == export_ga(second.exports)
    assert first.audit() == second.audit()


# === Hot billing === #

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("interval", [500, 4_000])
def test_hot_billing_matches_batch(small_config, seed, interval):
    batch, batch_summary = _run(small_config(balance=3_000, volume_limit=5_000), random_trace(seed))
    hot, hot_summary = _run(small_config(balance=3_000, volume_limit=5_000), random_trace(seed), interval)

    assert _ga_by_id(hot) == _ga_by_id(batch)
    assert hot_summary == batch_summary


@pytest.mark.parametrize("effective_from, rejected, total", [
    (HOUR_MS, ["RETROACTIVE_CHANGE"], 4 * 1000),
    (HOUR_MS + 1, [], 3 * 1000 + 2500),
])
def test_hot_billing_matches_batch_across_a_swap_at_a_cut(small_config, effective_from, rejected, total):
    def packet(ts):
        return {"kind": "PACKET", "ctx": "c1", "ts": ts, "src": "10.0.0.9", "dst": "192.0.2.1", "sport": 4000,
                "dport": 80, "proto": "TCP", "dir": "DL", "bytes": 500}

    trace = [
        {"kind": "ACTIVATE", "ctx": "c1", "ts": 0, "subscriber": "post", "apn": "internet", "qos": "gold",
         "mode": "POSTPAID"},
        packet(1000),
        packet(HOUR_MS),
        {"kind": "TARIFF", "ts": HOUR_MS, "tariff": {"id": "t-web", "method": "PER_BYTE", "rate": 5},
         "effective_from": effective_from},
        packet(HOUR_MS),
        packet(HOUR_MS + 100_000),
        {"kind": "DEACTIVATE", "ctx": "c1", "ts": HOUR_MS + 200_000},
    ]
    batch, batch_summary = _run(small_config(cut_hours=(1,)), trace)
    hot, hot_summary = _run(small_config(cut_hours=(1,)), trace, 1000)

    assert _ga_by_id(hot) == _ga_by_id(batch)
    assert hot_summary == batch_summary
    assert [r.code for r in hot.rejected] == [r.code for r in batch.rejected] == rejected
    assert batch_summary.total_charge == total
