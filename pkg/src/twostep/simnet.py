"""Deterministic discrete-event simulator for partially synchronous runs.

Time is measured in integer ticks; ``cfg.delta`` ticks make one round.  Three
schedule kinds are supported:

``sync``
    E-faulty synchronous runs: every message sent during a round is delivered
    exactly at the start of the next one and GST is 0.
``random``
    Seeded random delays.  Before GST a message takes up to 10 delta but is
    always delivered by GST + delta; from GST on it takes at most delta.
``splice``
    Groups run synchronous round prefixes in isolation (only intra-group
    messages and messages from the crash set are visible), the crash set
    then crashes and the run continues under the random schedule.

At one instant, events are processed as: crashes, propose() calls,
deliveries, then timers.  Deliveries at the same instant are ordered by the
scenario's sender priority list, then sender id, then send order.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from twostep import __version__
from twostep import protocol
from twostep.model import (
    TASK,
    Broadcast,
    Config,
    Decided,
    Send,
    SetTimer,
    StopTimer,
    Value,
    decode_value,
    encode_message,
    encode_value,
)
from twostep.omega import HEARTBEAT, ORACLE, PRE_GST_LOWEST, Beacon, OmegaView, on_beacon, on_heartbeat_tick

SYNC = "sync"
RANDOM = "random"
SPLICE = "splice"
SCHEDULES = (SYNC, RANDOM, SPLICE)

TRACE_MAGIC = "twostep-trace"

_CRASH, _CALL, _DELIVER, _TIMER, _TICK = range(5)


class ScenarioError(ValueError):
    pass


class HorizonExceeded(RuntimeError):
    pass


class TraceInvariantError(AssertionError):
    pass


class ReplayError(ValueError):
    pass


class ReplayDivergence(ReplayError):
    def __init__(self, index: int, expected: str | None, actual: str | None) -> None:
        self.index = index
        self.expected = expected
        self.actual = actual
        super().__init__(f"trace diverges at line {index}: recorded {expected!r}, replayed {actual!r}")


@dataclass(frozen=True)
class ProposeCall:
    time: int
    pid: int
    value: int


@dataclass(frozen=True)
class Splice:
    groups: tuple[tuple[int, ...], ...]
    rounds: tuple[int, ...]
    crash_set: tuple[int, ...] = ()

    def end(self, delta: int) -> int:
        return max(self.rounds) * delta


@dataclass(frozen=True)
class Scenario:
    cfg: Config
    # task: one initial value per process, None for a process crashed at 0
    proposals: tuple[Value | None, ...] = ()
    # object: explicit propose() invocations
    calls: tuple[ProposeCall, ...] = ()
    crash_plan: tuple[tuple[int, int], ...] = ()
    schedule: str = SYNC
    seed: int = 0
    order: tuple[int, ...] = ()
    horizon: int = 0
    omega: str = ORACLE
    omega_timeout: int | None = None
    omega_pre_gst: str = PRE_GST_LOWEST
    splice: Splice | None = None

    def __post_init__(self) -> None:
        cfg = self.cfg
        if self.schedule not in SCHEDULES:
            raise ScenarioError(f"unknown schedule {self.schedule!r}")
        if self.horizon <= 0:
            object.__setattr__(self, "horizon", self.gst + 20 * cfg.delta)
        crashed = [p for _, p in self.crash_plan]
        if len(set(crashed)) != len(crashed):
            raise ScenarioError("a process crashes at most once")
        if any(p not in cfg.pids for p in crashed):
            raise ScenarioError("crash plan names an unknown process")
        if any(t < 0 for t, _ in self.crash_plan):
            raise ScenarioError("negative crash time")
        if len(self.crashed_before(self.horizon)) > cfg.f:
            raise ScenarioError(f"more than f={cfg.f} crashes")
        if self.schedule == SYNC and any(t != 0 for t, _ in self.crash_plan):
            raise ScenarioError("synchronous runs crash processes at time 0 only")
        if self.schedule == SPLICE:
            if self.splice is None:
                raise ScenarioError("splice schedule needs a splice description")
            members = sorted(p for g in self.splice.groups for p in g)
            if members != list(cfg.pids):
                raise ScenarioError("splice groups must partition the processes")
            if len(self.splice.rounds) != len(self.splice.groups) or min(self.splice.rounds) < 0:
                raise ScenarioError("one non-negative round count per group")
        if cfg.variant == TASK:
            if len(self.proposals) != cfg.n:
                raise ScenarioError("task scenarios need one proposal per process")
            if self.calls:
                raise ScenarioError("propose() calls exist only in the object variant")
            at_zero = {p for t, p in self.crash_plan if t == 0}
            for p, v in zip(cfg.pids, self.proposals):
                if v is None and p not in at_zero:
                    raise ScenarioError(f"p{p} has no proposal but is not crashed at time 0")
                if v is not None and v not in cfg.value_domain:
                    raise ScenarioError(f"proposal {v!r} of p{p} outside the value domain")
        else:
            if self.proposals:
                raise ScenarioError("object scenarios use propose() calls, not proposals")
            pids = [c.pid for c in self.calls]
            if len(set(pids)) != len(pids):
                raise ScenarioError("at most one propose() per process")
            for c in self.calls:
                if c.pid not in cfg.pids or c.value not in cfg.value_domain or c.time < 0:
                    raise ScenarioError(f"bad propose() call {c}")

    @property
    def gst(self) -> int:
        if self.schedule == SYNC:
            return 0
        if self.schedule == SPLICE:
            assert self.splice is not None
            return self.splice.end(self.cfg.delta) + self.cfg.gst
        return self.cfg.gst

    def crash_times(self) -> dict[int, int]:
        times = dict((p, t) for t, p in self.crash_plan)
        if self.schedule == SPLICE and self.splice is not None:
            end = self.splice.end(self.cfg.delta)
            for p in self.splice.crash_set:
                times.setdefault(p, end)
        return times

    def crashed_before(self, t: int) -> set[int]:
        return {p for p, ct in self.crash_times().items() if ct <= t}

    def correct(self) -> list[int]:
        dead = self.crashed_before(self.horizon)
        return [p for p in self.cfg.pids if p not in dead]

    def proposed_values(self) -> set[Value]:
        if self.cfg.variant == TASK:
            return {v for v in self.proposals if v is not None}
        return {c.value for c in self.calls}

    def to_record(self) -> dict[str, Any]:
        return {
            "cfg": self.cfg.to_record(),
            "proposals": [encode_value(v) for v in self.proposals],
            "calls": [[c.time, c.pid, c.value] for c in self.calls],
            "crash_plan": [list(c) for c in self.crash_plan],
            "schedule": self.schedule,
            "seed": self.seed,
            "order": list(self.order),
            "horizon": self.horizon,
            "omega": self.omega,
            "omega_timeout": self.omega_timeout,
            "omega_pre_gst": self.omega_pre_gst,
            "splice": None
            if self.splice is None
            else {
                "groups": [list(g) for g in self.splice.groups],
                "rounds": list(self.splice.rounds),
                "crash_set": list(self.splice.crash_set),
            },
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> Scenario:
        sp = rec.get("splice")
        return cls(
            cfg=Config.from_record(rec["cfg"]),
            proposals=tuple(decode_value(v) for v in rec["proposals"]),
            calls=tuple(ProposeCall(*c) for c in rec["calls"]),
            crash_plan=tuple((t, p) for t, p in rec["crash_plan"]),
            schedule=rec["schedule"],
            seed=rec["seed"],
            order=tuple(rec["order"]),
            horizon=rec["horizon"],
            omega=rec["omega"],
            omega_timeout=rec["omega_timeout"],
            omega_pre_gst=rec["omega_pre_gst"],
            splice=None
            if sp is None
            else Splice(
                tuple(tuple(g) for g in sp["groups"]),
                tuple(sp["rounds"]),
                tuple(sp["crash_set"]),
            ),
        )


@dataclass
class Trace:
    header: dict[str, Any]
    events: list[dict[str, Any]] = field(default_factory=list)

    @property
    def scenario(self) -> Scenario:
        return Scenario.from_record(self.header["scenario"])

    def of(self, kind: str) -> Iterator[dict[str, Any]]:
        return (ev for ev in self.events if ev["ev"] == kind)

    def decisions(self) -> list[dict[str, Any]]:
        return list(self.of("decision"))

    def lines(self) -> list[str]:
        out = [json.dumps(self.header, separators=(",", ":"))]
        out += [json.dumps(ev, separators=(",", ":")) for ev in self.events]
        return out

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str) -> Trace:
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows:
            raise ReplayError("empty trace")
        try:
            header = json.loads(rows[0])
            events = [json.loads(ln) for ln in rows[1:]]
        except json.JSONDecodeError as exc:
            raise ReplayError(f"malformed trace: {exc}") from exc
        if not isinstance(header, dict) or header.get("trace") != TRACE_MAGIC:
            raise ReplayError("not a twostep trace")
        return cls(header, events)


class _Sim:
    def __init__(self, scenario: Scenario) -> None:
        self.sc = scenario
        self.cfg = cfg = scenario.cfg
        self.delta = cfg.delta
        self.gst = scenario.gst
        self.rng = random.Random(f"net-{scenario.seed}")
        self.queue: list[tuple] = []
        self.seq = 0
        self.now = 0
        self.events: list[dict[str, Any]] = []
        self.states: dict[int, protocol.ProcessState] = {}
        self.crashed: set[int] = set()
        self.timer_gen = {p: 0 for p in cfg.pids}
        self.in_flight = 0
        self.in_flight_correct = 0
        self.omega = OmegaView(
            cfg.n,
            scenario.omega,
            gst=self.gst,
            delta=cfg.delta,
            timeout=scenario.omega_timeout,
            pre_gst=scenario.omega_pre_gst,
            seed=scenario.seed,
        )
        self.last_leader: dict[int, int] = {}
        self.rank = {p: i for i, p in enumerate(scenario.order)}
        self.crash_at = scenario.crash_times()
        self.group_of: dict[int, int] = {}
        if scenario.splice is not None:
            for i, g in enumerate(scenario.splice.groups):
                for p in g:
                    self.group_of[p] = i

    # -- queue ------------------------------------------------------------

    def push(self, t: int, phase: int, key: int, kind: str, *payload: Any) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (t, phase, key, self.seq, kind, payload))

    def record(self, ev: str, **fields: Any) -> None:
        rec = {"t": self.now, "ev": ev}
        rec.update(fields)
        self.events.append(rec)

    # -- network model ----------------------------------------------------

    def _sync_time(self, t: int) -> int:
        return (t // self.delta + 1) * self.delta

    def _random_time(self, t: int) -> int:
        d = self.delta
        if t >= self.gst:
            return t + self.rng.randint(1, d)
        return min(t + self.rng.randint(0, 10 * d), self.gst + self.rng.randint(1, d))

    def delivery_time(self, src: int, dst: int, t: int) -> int:
        kind = self.sc.schedule
        if kind == SYNC:
            return self._sync_time(t)
        if kind == SPLICE:
            sp = self.sc.splice
            assert sp is not None
            end = sp.end(self.delta)
            if t < end:
                g = self.group_of[src]
                visible = dst in sp.groups[g] or src in sp.crash_set
                if visible and t < sp.rounds[g] * self.delta:
                    return self._sync_time(t)
                return self._random_time(end)
        return self._random_time(t)

    # -- effects ----------------------------------------------------------

    def send(self, src: int, dst: int, msg: Any, local: deque) -> None:
        self.seq += 1
        mid = self.seq
        self.record("sent", mid=mid, **{"from": src, "to": dst}, msg=encode_message(msg))
        if dst == src:
            local.append((src, mid, msg))
            return
        at = self.delivery_time(src, dst, self.now)
        key = self.rank.get(src, len(self.rank) + src)
        self.push(at, _DELIVER, key, "deliver", src, dst, mid, msg)
        self.in_flight += 1

    def apply(self, pid: int, effects: Iterable[Any], local: deque) -> None:
        for eff in effects:
            if isinstance(eff, Send):
                self.send(pid, eff.to, eff.msg, local)
            elif isinstance(eff, Broadcast):
                for q in self.cfg.pids:
                    if q != pid:
                        self.send(pid, q, eff.msg, local)
            elif isinstance(eff, Decided):
                self.record("decision", pid=pid, value=encode_value(eff.value))
            elif isinstance(eff, SetTimer):
                self.timer_gen[pid] += 1
                self.push(self.now + eff.duration, _TIMER, pid, "timer", pid, self.timer_gen[pid])
            elif isinstance(eff, StopTimer):
                self.timer_gen[pid] += 1
            else:
                raise TypeError(f"unknown effect {eff!r}")

    def step(self, pid: int, fn, *args: Any) -> None:
        """Run one handler on ``pid`` and flush its self-addressed messages."""
        local: deque = deque()
        self._guarded(pid, fn, args, local)
        while local:
            src, mid, msg = local.popleft()
            self.record("delivered", mid=mid, **{"from": src, "to": pid})
            self._guarded(pid, protocol.handle, (src, msg), local)

    def _guarded(self, pid: int, fn, args: tuple, local: deque) -> None:
        try:
            state, effects = fn(self.states[pid], *args)
        except (protocol.AgreementFault, protocol.ProtocolError) as exc:
            self.record("fault", pid=pid, detail=f"{type(exc).__name__}: {exc}")
            return
        self.states[pid] = state
        self.apply(pid, effects, local)

    # -- main loop --------------------------------------------------------

    def run(self) -> Trace:
        sc, cfg = self.sc, self.cfg
        for p, t in sorted(self.crash_at.items(), key=lambda x: (x[1], x[0])):
            self.push(t, _CRASH, p, "crash", p)
        for p in cfg.pids:
            self.push(0, _CALL, 0, "start", p)
        for c in sc.calls:
            self.push(c.time, _CALL, 1, "call", c.pid, c.value)
        if sc.omega == HEARTBEAT:
            for p in cfg.pids:
                self.push(0, _TICK, p, "tick", p)

        while self.queue and self.queue[0][0] <= sc.horizon:
            t, _, _, _, kind, payload = heapq.heappop(self.queue)
            self.now = t
            getattr(self, f"_on_{kind}")(*payload)

        for item in self.queue:
            if item[4] == "deliver":
                src, dst = item[5][0], item[5][1]
                if src not in self.crashed and dst not in self.crash_at:
                    self.in_flight_correct += 1
        self.now = sc.horizon
        self.record("end", in_flight=self.in_flight_correct)
        header = {
            "trace": TRACE_MAGIC,
            "version": __version__,
            "below_bound": cfg.below_bound,
            "scenario": sc.to_record(),
        }
        return Trace(header, self.events)

    def _on_crash(self, pid: int) -> None:
        self.crashed.add(pid)
        self.omega.crash(pid)
        self.record("crashed", pid=pid)

    def _on_start(self, pid: int) -> None:
        if pid in self.crashed:
            return
        initial = None
        if self.cfg.variant == TASK:
            initial = self.sc.proposals[pid - 1]
        state, effects = protocol.start(self.cfg, pid, initial)
        self.states[pid] = state
        local: deque = deque()
        self.apply(pid, effects, local)

    def _on_call(self, pid: int, value: int) -> None:
        if pid in self.crashed or pid not in self.states:
            return
        self.record("propose", pid=pid, value=value)
        self.step(pid, protocol.propose, value)

    def _on_deliver(self, src: int, dst: int, mid: int, msg: Any) -> None:
        self.in_flight -= 1
        if dst in self.crashed or dst not in self.states:
            return
        self.record("delivered", mid=mid, **{"from": src, "to": dst})
        if isinstance(msg, Beacon):
            on_beacon(self.omega.heartbeats[dst], src, self.now)
            return
        self.step(dst, protocol.handle, src, msg)

    def _on_timer(self, pid: int, gen: int) -> None:
        if pid in self.crashed or gen != self.timer_gen[pid]:
            return
        self.record("timer", pid=pid)
        leader = self.omega.leader(pid, self.now)
        self._note_leader(pid, leader)
        self.step(pid, protocol.on_timer, leader)

    def _on_tick(self, pid: int) -> None:
        if pid in self.crashed:
            return
        hb, effects = on_heartbeat_tick(self.omega.heartbeats[pid], self.now)
        self._note_leader(pid, hb.estimate)
        self.apply(pid, effects, deque())
        self.push(self.now + self.delta, _TICK, pid, "tick", pid)

    def _note_leader(self, pid: int, leader: int) -> None:
        if self.last_leader.get(pid) != leader:
            self.last_leader[pid] = leader
            self.record("omega", pid=pid, leader=leader)


def run(scenario: Scenario, *, strict: bool = False, check: bool = True) -> Trace:
    """Execute ``scenario`` up to its horizon and return the trace."""
    trace = _Sim(scenario).run()
    if check:
        problems = trace_violations(trace, scenario)
        if problems:
            raise TraceInvariantError("; ".join(problems[:5]))
    if strict and trace.events[-1]["in_flight"]:
        raise HorizonExceeded(
            f"{trace.events[-1]['in_flight']} messages between correct processes still in flight"
        )
    return trace


def trace_violations(trace: Trace, scenario: Scenario) -> list[str]:
    """Structural invariants every simulator trace must satisfy."""
    problems: list[str] = []
    delta = scenario.cfg.delta
    gst = scenario.gst
    sent: dict[int, dict[str, Any]] = {}
    crashed_at: dict[int, int] = {}
    for ev in trace.events:
        kind, t = ev["ev"], ev["t"]
        if kind == "crashed":
            crashed_at[ev["pid"]] = t
        elif kind == "sent":
            sent[ev["mid"]] = ev
            if ev["from"] in crashed_at:
                problems.append(f"p{ev['from']} sent after crashing (t={t})")
        elif kind == "delivered":
            s = sent.get(ev["mid"])
            if s is None or s["from"] != ev["from"] or s["to"] != ev["to"]:
                problems.append(f"delivery of unsent message {ev['mid']}")
                continue
            if ev["to"] in crashed_at:
                problems.append(f"delivery to crashed p{ev['to']} at t={t}")
            if s["from"] == s["to"]:
                if t != s["t"]:
                    problems.append(f"self-message {ev['mid']} not applied inline")
                continue
            if s["t"] >= gst and t - s["t"] > delta:
                problems.append(f"message {ev['mid']} took {t - s['t']} > delta after GST")
            if scenario.schedule == SYNC and t != (s["t"] // delta + 1) * delta:
                problems.append(f"message {ev['mid']} not delivered at the next round boundary")
        elif kind in ("decision", "timer", "propose") and ev["pid"] in crashed_at:
            problems.append(f"p{ev['pid']} acted after crashing (t={t})")
    return problems


def make_sync_schedule(
    cfg: Config,
    faulty: Iterable[int],
    favored: int,
    proposals: Sequence[Value | None] | None = None,
    calls: Iterable[ProposeCall] = (),
    *,
    horizon: int | None = None,
) -> Scenario:
    """E-faulty synchronous scenario delivering ``favored``'s messages first."""
    faulty = sorted(set(faulty))
    if favored in faulty:
        raise ScenarioError(f"favored p{favored} is faulty")
    if favored not in cfg.pids:
        raise ScenarioError(f"unknown process p{favored}")
    props: tuple[Value | None, ...] = ()
    if cfg.variant == TASK:
        if proposals is None:
            raise ScenarioError("task scenarios need proposals")
        props = tuple(None if p in faulty else v for p, v in zip(cfg.pids, proposals))
    return Scenario(
        cfg=cfg,
        proposals=props,
        calls=tuple(c for c in calls if c.pid not in faulty),
        crash_plan=tuple((0, p) for p in faulty),
        schedule=SYNC,
        order=(favored,),
        horizon=horizon if horizon is not None else 20 * cfg.delta,
    )


def make_splice_schedule(
    cfg: Config,
    groups: Sequence[Sequence[int]],
    rounds: Sequence[int],
    crash_set: Iterable[int],
    continuation_seed: int,
    proposals: Sequence[Value | None] | None = None,
    calls: Iterable[ProposeCall] = (),
    *,
    horizon: int | None = None,
) -> Scenario:
    """Adversarial scenario stitching group-local synchronous prefixes."""
    crash_set = tuple(sorted(set(crash_set)))
    if len(crash_set) > cfg.f:
        raise ScenarioError(f"crash set of size {len(crash_set)} exceeds f={cfg.f}")
    splice = Splice(tuple(tuple(g) for g in groups), tuple(rounds), crash_set)
    members = sorted(p for g in splice.groups for p in g)
    if members != list(cfg.pids):
        raise ScenarioError("groups must partition the processes")
    end = splice.end(cfg.delta)
    return Scenario(
        cfg=cfg,
        proposals=tuple(proposals) if cfg.variant == TASK and proposals is not None else (),
        calls=tuple(calls),
        schedule=SPLICE,
        seed=continuation_seed,
        splice=splice,
        horizon=horizon if horizon is not None else end + cfg.gst + 20 * cfg.delta,
    )


def replay(source: str | Path | Trace) -> Trace:
    """Re-execute a recorded trace and require byte-identical output."""
    if isinstance(source, Trace):
        recorded = source
        recorded_lines = source.lines()
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ReplayError(f"cannot read {path}: {exc}") from exc
        recorded = Trace.loads(text)
        recorded_lines = [ln for ln in text.splitlines() if ln.strip()]
    version = recorded.header.get("version")
    if version != __version__:
        raise ReplayError(f"trace version {version!r} does not match {__version__!r}")
    try:
        scenario = recorded.scenario
    except (KeyError, TypeError, ValueError) as exc:
        raise ReplayError(f"bad trace header: {exc}") from exc
    fresh = run(scenario, check=False)
    old, new = recorded_lines, fresh.lines()
    for i, (a, b) in enumerate(zip(old, new)):
        if a != b:
            raise ReplayDivergence(i, a, b)
    if len(old) != len(new):
        i = min(len(old), len(new))
        raise ReplayDivergence(
            i, old[i] if i < len(old) else None, new[i] if i < len(new) else None
        )
    return fresh


def object_calls(pairs: Iterable[tuple[int, int]], time: int = 0) -> tuple[ProposeCall, ...]:
    return tuple(ProposeCall(time, p, v) for p, v in pairs)

