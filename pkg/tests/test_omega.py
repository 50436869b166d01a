from __future__ import annotations

import dataclasses
import itertools

import pytest

from twostep.model import OBJECT, Config
from twostep.omega import (
    HEARTBEAT,
    PRE_GST_RANDOM,
    HeartbeatState,
    OmegaError,
    OmegaView,
    on_beacon,
    on_heartbeat_tick,
)
from twostep.simnet import RANDOM, Scenario, make_sync_schedule, object_calls, run

D = 10


def test_oracle_lowest_survivor_after_gst():
    view = OmegaView(3, gst=50)
    view.crash(1)
    assert [view.leader(p, 60) for p in (2, 3)] == [2, 2]


def test_oracle_without_crashes_is_p1():
    view = OmegaView(4)
    assert {view.leader(p, 0) for p in range(1, 5)} == {1}


def test_oracle_refuses_crashed_caller():
    view = OmegaView(3)
    view.crash(2)
    with pytest.raises(OmegaError):
        view.leader(2, 0)


def test_oracle_pre_gst_is_adversarial_then_settles():
    view = OmegaView(5, gst=100, pre_gst=PRE_GST_RANDOM, seed=3)
    early = {view.leader(1, t) for t in range(100)}
    assert len(early) > 1
    assert {view.leader(1, t) for t in range(100, 200)} == {1}


def test_unknown_mode_rejected():
    with pytest.raises(OmegaError):
        OmegaView(3, "gossip")


def test_heartbeat_all_alive_elects_p1():
    states = {p: HeartbeatState(p, 3, D, 2 * D) for p in (1, 2, 3)}
    for now in range(0, 10 * D, D):
        for p in states:
            for q in states:
                if q != p:
                    on_beacon(states[p], q, now)
            on_heartbeat_tick(states[p], now)
    assert {s.estimate for s in states.values()} == {1}


def test_heartbeat_suspects_after_silence():
    hb = HeartbeatState(2, 3, D, timeout=D)
    on_beacon(hb, 1, 0)
    on_beacon(hb, 3, 4 * D)
    assert hb.suspected(3 * D) == set()
    assert hb.suspected(4 * D) == {1}
    _, fx = on_heartbeat_tick(hb, 4 * D)
    assert hb.estimate == 2 and len(fx) == 1


def _omega_changes(trace):
    return [ev for ev in trace.of("omega")]


def test_heartbeat_convergence_after_leader_crash():
    cfg = Config(3, 1, 1)
    sc = Scenario(cfg, proposals=(None, 1, 2), crash_plan=((0, 1),), omega=HEARTBEAT, omega_timeout=3 * D, horizon=200)
    tr = run(sc)
    to_p2 = [ev["t"] for ev in _omega_changes(tr) if ev["leader"] == 2]
    # p1 is last heard at time 0; suspicion needs more than 2*delta + timeout
    assert sorted(to_p2) == [6 * D, 6 * D]
    assert all(ev["t"] <= 6 * D for ev in _omega_changes(tr))


@pytest.mark.parametrize("seed", range(12))
def test_heartbeat_estimates_stabilize_on_a_correct_process(seed):
    cfg = Config(5, 2, 2, OBJECT, gst=60)
    calls = object_calls([(2, 1), (4, 0)], time=5)
    sc = Scenario(cfg, calls=calls, crash_plan=((0, 1), (30, 3)), schedule=RANDOM, seed=seed, omega=HEARTBEAT, horizon=400)
    tr = run(sc)
    last = {}
    for ev in tr.of("omega"):
        last[ev["pid"]] = (ev["leader"], ev["t"])
    correct = sc.correct()
    assert {last[p][0] for p in correct} == {2}
    # settled well before the horizon and no later flip-flops
    assert max(last[p][1] for p in correct) <= sc.gst + 6 * D


def test_oracle_and_heartbeat_agree_on_synchronous_runs():
    for cfg in (Config(3, 1, 1), Config(5, 1, 2)):
        for E in itertools.combinations(cfg.pids, cfg.e):
            correct = [p for p in cfg.pids if p not in E]
            for values in itertools.product((0, 1), repeat=len(correct)):
                props = [None] * cfg.n
                for p, v in zip(correct, values):
                    props[p - 1] = v
                favored = correct[values.index(max(values))]
                sc = make_sync_schedule(cfg, E, favored, props, horizon=30 * D)
                a = run(sc).decisions()
                b = run(dataclasses.replace(sc, omega=HEARTBEAT)).decisions()
                assert a == b
