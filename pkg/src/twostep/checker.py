"""Executable safety, liveness and two-step properties.

Trace predicates (agreement, validity, termination, slow-ballot safety) work
on :class:`~twostep.simnet.Trace` objects.  The two-step verifiers build
E-faulty synchronous scenarios and run them; :func:`lemma_oracle` enumerates
ballot-0 vote configurations and checks the recovery rule against them.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import random
from collections import defaultdict
from collections.abc import Iterable, Iterator, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import comb
from typing import Any

from twostep.model import BOTTOM, OBJECT, TASK, Config, OneB, Value, decode_value, encode_value, required_n
from twostep.omega import PRE_GST_LOWEST, PRE_GST_RANDOM
from twostep.protocol import compute_proposal
from twostep.simnet import (
    RANDOM,
    ProposeCall,
    Scenario,
    Trace,
    make_splice_schedule,
    make_sync_schedule,
    run,
)

# Termination bound after GST, in multiples of delta.
TERMINATION_DELTAS = 15

MAX_TWO_STEP_CASES = 250_000
MAX_ORACLE_N = 8


@dataclass
class Verdict:
    name: str
    passed: bool
    witness: dict[str, Any] | None = None
    stats: dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return {"property": self.name, "passed": self.passed, "witness": self.witness, "stats": self.stats}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"), default=str)

    def __bool__(self) -> bool:
        return self.passed


def summary_table(verdicts: Iterable[Verdict]) -> str:
    rows = [("property", "result", "details")]
    for v in verdicts:
        details = " ".join(f"{k}={v.stats[k]}" for k in sorted(v.stats))
        rows.append((v.name, "PASS" if v.passed else "FAIL", details))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{a:<{width}}  {b:<6}  {c}".rstrip() for a, b, c in rows)


def _witness(trace: Trace, event: dict[str, Any] | None = None, **extra: Any) -> dict[str, Any]:
    w: dict[str, Any] = {"scenario": trace.header["scenario"]}
    if event is not None:
        w["event"] = event
    w.update(extra)
    return w


# -- trace predicates -------------------------------------------------------


def check_agreement(trace: Trace) -> Verdict:
    decisions = trace.decisions()
    first = decisions[0] if decisions else None
    for ev in decisions[1:]:
        if ev["value"] != first["value"]:
            return Verdict("agreement", False, _witness(trace, ev, first=first))
    for ev in trace.of("fault"):
        if ev["detail"].startswith("AgreementFault"):
            return Verdict("agreement", False, _witness(trace, ev))
    return Verdict("agreement", True, stats={"decisions": len(decisions)})


def check_validity(trace: Trace, scenario: Scenario | None = None) -> Verdict:
    scenario = scenario or trace.scenario
    proposed = scenario.proposed_values()
    for ev in trace.decisions():
        if decode_value(ev["value"]) not in proposed:
            return Verdict("validity", False, _witness(trace, ev, proposals=sorted(proposed)))
    return Verdict("validity", True)


def check_termination(trace: Trace, bound: int, scenario: Scenario | None = None) -> Verdict:
    """Every correct process decides by ``bound``.

    In the object variant a decision is only owed once some correct process
    has invoked propose(); with no such invocation the check is vacuous.
    """
    scenario = scenario or trace.scenario
    if scenario.horizon < bound:
        raise ValueError(f"trace horizon {scenario.horizon} is shorter than bound {bound}")
    correct = scenario.correct()
    if scenario.cfg.variant == OBJECT and not any(c.pid in correct for c in scenario.calls):
        return Verdict("termination", True, stats={"vacuous": True})
    first: dict[int, int] = {}
    for ev in trace.decisions():
        first.setdefault(ev["pid"], ev["t"])
    late = [p for p in correct if first.get(p, bound + 1) > bound]
    latest = max((first[p] for p in correct if p in first), default=None)
    if late:
        return Verdict("termination", False, _witness(trace, None, undecided=late, bound=bound))
    return Verdict("termination", True, stats={"latest": latest, "bound": bound})


def slow_ballot_violations(trace: Trace, cfg: Config | None = None) -> list[dict[str, Any]]:
    """2A messages contradicting a value already accepted by n-f processes."""
    cfg = cfg or trace.scenario.cfg
    votes: dict[tuple[int, Any], set[int]] = defaultdict(set)
    two_a: list[dict[str, Any]] = []
    for ev in trace.of("sent"):
        msg = ev["msg"]
        if msg["kind"] == "2B" and msg["ballot"] > 0:
            votes[(msg["ballot"], msg["value"])].add(ev["from"])
        elif msg["kind"] == "2A":
            two_a.append(ev)
    chosen = [(b, v) for (b, v), who in votes.items() if len(who) >= cfg.n - cfg.f]
    bad = []
    for b, v in chosen:
        for ev in two_a:
            if ev["msg"]["ballot"] >= b and ev["msg"]["value"] != v:
                bad.append({"chosen": [b, v], "event": ev})
    return bad


def check_slow_ballot_safety(trace: Trace, cfg: Config | None = None) -> Verdict:
    bad = slow_ballot_violations(trace, cfg)
    if bad:
        return Verdict("slow-ballot-safety", False, _witness(trace, bad[0]["event"], chosen=bad[0]["chosen"]))
    return Verdict("slow-ballot-safety", True)


# -- two-step verifiers -----------------------------------------------------


def _decided_by(trace: Trace, t: int, pid: int | None = None) -> int | None:
    """Time of the first decision (by ``pid`` if given) no later than ``t``."""
    for ev in trace.decisions():
        if ev["t"] > t:
            break
        if pid is None or ev["pid"] == pid:
            return ev["t"]
    return None


def _guard_cases(count: int, limit: int) -> None:
    if count > limit:
        raise ValueError(f"{count} cases exceed the enumeration limit {limit}")


def check_two_step_task(cfg: Config, *, search_orders: bool = False, limit: int = MAX_TWO_STEP_CASES) -> Verdict:
    """Both items of the task two-step property, by enumeration.

    Item 1 runs the schedule where the highest-value correct process has its
    Propose delivered first.  With ``search_orders`` (n <= 4 only) item 1 is
    instead discharged by trying every sender priority order, which
    cross-checks that construction.
    """
    if cfg.variant != TASK:
        raise ValueError("task variant required")
    if search_orders and cfg.n > 4:
        raise ValueError("order search is limited to n <= 4")
    dom = cfg.value_domain
    two = 2 * cfg.delta
    item1_cases = comb(cfg.n, cfg.e) * len(dom) ** (cfg.n - cfg.e)
    item2_cases = comb(cfg.n, cfg.e) * len(dom) * (cfg.n - cfg.e)
    _guard_cases(item1_cases + item2_cases, limit)
    stats: dict[str, Any] = {"item1_cases": 0, "item2_cases": 0, "runs": 0, "max_decision_time": 0}
    item2_times: set[int] = set()

    def attempt(E, proposals, favored):
        sc = make_sync_schedule(cfg, E, favored, proposals, horizon=two)
        stats["runs"] += 1
        return sc, run(sc)

    for E in itertools.combinations(cfg.pids, cfg.e):
        correct = [p for p in cfg.pids if p not in E]
        for values in itertools.product(dom, repeat=len(correct)):
            stats["item1_cases"] += 1
            proposals: list[Value | None] = [None] * cfg.n
            for p, v in zip(correct, values):
                proposals[p - 1] = v
            top = max(values)
            favored = next(p for p, v in zip(correct, values) if v == top)
            orders = [(favored,)]
            if search_orders:
                orders = list(itertools.permutations(correct))
            hit = None
            for order in orders:
                sc = make_sync_schedule(cfg, E, order[0], proposals, horizon=two)
                sc = dataclasses.replace(sc, order=tuple(order))
                stats["runs"] += 1
                tr = run(sc)
                hit = _decided_by(tr, two)
                if hit is not None:
                    break
            if hit is None:
                return Verdict("two-step-task", False, {"item": 1, "E": list(E), "scenario": sc.to_record()}, stats)
            stats["max_decision_time"] = max(stats["max_decision_time"], hit)

        for v in dom:
            proposals = [None if p in E else v for p in cfg.pids]
            for p in correct:
                stats["item2_cases"] += 1
                sc, tr = attempt(E, proposals, p)
                hit = _decided_by(tr, two, p)
                if hit is None:
                    return Verdict(
                        "two-step-task", False, {"item": 2, "E": list(E), "p": p, "scenario": sc.to_record()}, stats
                    )
                item2_times.add(hit)
                stats["max_decision_time"] = max(stats["max_decision_time"], hit)
    stats["item2_decision_times"] = sorted(item2_times)
    assert stats["item1_cases"] == item1_cases and stats["item2_cases"] == item2_cases
    return Verdict("two-step-task", True, stats=stats)


def check_two_step_object(cfg: Config, *, limit: int = MAX_TWO_STEP_CASES) -> Verdict:
    """Both items of the object two-step property, by enumeration."""
    if cfg.variant != OBJECT:
        raise ValueError("object variant required")
    dom = cfg.value_domain
    two = 2 * cfg.delta
    per_item = comb(cfg.n, cfg.e) * len(dom) * (cfg.n - cfg.e)
    _guard_cases(2 * per_item, limit)
    stats: dict[str, Any] = {"item1_cases": 0, "item2_cases": 0, "runs": 0, "max_decision_time": 0}
    times = {1: set(), 2: set()}
    for E in itertools.combinations(cfg.pids, cfg.e):
        correct = [p for p in cfg.pids if p not in E]
        for v in dom:
            for p in correct:
                for item in (1, 2):
                    who = [p] if item == 1 else correct
                    calls = [ProposeCall(0, q, v) for q in who]
                    sc = make_sync_schedule(cfg, E, p, calls=calls, horizon=two)
                    stats[f"item{item}_cases"] += 1
                    stats["runs"] += 1
                    hit = _decided_by(run(sc), two, p)
                    if hit is None:
                        return Verdict(
                            "two-step-object",
                            False,
                            {"item": item, "E": list(E), "p": p, "value": v, "scenario": sc.to_record()},
                            stats,
                        )
                    times[item].add(hit)
                    stats["max_decision_time"] = max(stats["max_decision_time"], hit)
    stats["item1_decision_times"] = sorted(times[1])
    stats["item2_decision_times"] = sorted(times[2])
    assert stats["item1_cases"] == stats["item2_cases"] == per_item
    return Verdict("two-step-object", True, stats=stats)


# -- recovery-rule oracle ---------------------------------------------------


@dataclass(frozen=True)
class VoteConfig:
    """Final ballot-0 state of every process.

    ``votes[i]`` is the (value, proposer) pair process ``i+1`` holds, or None.
    Process ``fast_proposer`` decided ``fast_value`` on the fast path.
    """

    initial: tuple[Value, ...]
    votes: tuple[tuple[Value, int] | None, ...]
    fast_value: Value
    fast_proposer: int

    def reply(self, pid: int) -> OneB:
        vote = self.votes[pid - 1]
        val, who = vote if vote is not None else (None, None)
        decided = self.fast_value if pid == self.fast_proposer else None
        return OneB(1, 0, val, who, decided, self.initial[pid - 1])

    def to_record(self) -> dict[str, Any]:
        return {
            "initial": [encode_value(v) for v in self.initial],
            "votes": [None if v is None else [encode_value(v[0]), v[1]] for v in self.votes],
            "fast_value": encode_value(self.fast_value),
            "fast_proposer": self.fast_proposer,
        }


def _member_options(variant: str, dom: Sequence[int], pid: int, others: Sequence[int]):
    """Candidate (initial, vote-target) pairs for a process outside the fast quorum.

    vote-target is None (no vote), ``pid`` (own proposal) or another pid.
    """
    inits: list[Value] = list(dom)
    if variant == OBJECT:
        inits = [BOTTOM] + inits
    for init in inits:
        if init is BOTTOM:
            yield init, None
        else:
            yield init, pid
        for t in others:
            yield init, t


def enumerate_vote_configs(cfg: Config, domain: Sequence[int] | None = None) -> Iterator[VoteConfig]:
    """All fast-decided ballot-0 vote configurations, up to process renaming.

    The fast proposer is fixed to p_n and its explicit supporters to a prefix
    p_1..p_k; every other labelling is reachable by permuting ids, and both
    the recovery rule and the quorum enumeration are invariant under that.

    Voting rules follow the protocol: explicit ballot-0 votes are single-shot
    and go to a process that broadcast a Propose; task processes only accept
    values >= their own input; object processes only accept while unproposed
    or for their own value, so a process that voted for x broadcasts a
    Propose only if it later proposes x itself.
    """
    n, e = cfg.n, cfg.e
    dom = list(domain if domain is not None else cfg.value_domain)
    obj = cfg.variant == OBJECT
    r = n
    for v in dom:
        for k in range(n - e - 1, n):
            support = range(1, k + 1)
            rest = list(range(k + 1, n))
            s_inits = [BOTTOM, *dom] if obj else [x for x in dom if x <= v]
            rest_opts = [list(_member_options(cfg.variant, dom, p, [t for t in range(1, n) if t != p])) for p in rest]
            for s_init in itertools.product(s_inits, repeat=k):
                initial: list[Value] = [*s_init, *([BOTTOM] * (n - k - 1)), v]
                votes: list[tuple[Value, int] | None] = [(v, r)] * k + [None] * (n - k)
                votes[r - 1] = (v, r)
                proposes = {p: (not obj) or initial[p - 1] == v for p in support}
                proposes[r] = True
                for choice in itertools.product(*rest_opts):
                    for p, (x, _) in zip(rest, choice):
                        initial[p - 1] = x
                    ok = True
                    for p, (x, t) in zip(rest, choice):
                        if t is None:
                            proposes[p] = False
                            votes[p - 1] = None
                        elif t == p:
                            proposes[p] = True
                            votes[p - 1] = (x, p)
                        else:
                            tv = initial[t - 1]
                            if not obj and tv < x:
                                ok = False
                                break
                            proposes[p] = (not obj) or x == tv
                            votes[p - 1] = (tv, t)
                    if not ok:
                        continue
                    if any(vote is not None and not proposes[vote[1]] for vote in votes):
                        continue
                    yield VoteConfig(tuple(initial), tuple(votes), v, r)


def _value_key(x: Value) -> tuple[int, int]:
    return (0, 0) if x is BOTTOM else (1, x)


def lemma_oracle(
    cfg: Config, *, domain: Sequence[int] | None = None, stop_at_first: bool = True, max_n: int = MAX_ORACLE_N
) -> Verdict:
    """Recovery rule returns the fast-decided value for every quorum.

    Passes iff no counterexample exists among all enumerated configurations,
    all (n-f)-subsets Q and every coordinator in Q.
    """
    if cfg.n > max_n:
        raise ValueError(f"n={cfg.n} too large to enumerate (limit {max_n})")
    name = f"recovery-oracle[{cfg.variant} n={cfg.n} e={cfg.e} f={cfg.f}]"
    quorums = [frozenset(q) for q in itertools.combinations(cfg.pids, cfg.n - cfg.f)]
    stats = {"configs": 0, "checks": 0, "counterexamples": 0}
    witness = None
    for vc in enumerate_vote_configs(cfg, domain):
        stats["configs"] += 1
        replies = {p: vc.reply(p) for p in cfg.pids}
        for q in quorums:
            qr = {p: replies[p] for p in sorted(q)}
            for own in sorted({vc.initial[p - 1] for p in q}, key=_value_key):
                stats["checks"] += 1
                got = compute_proposal(qr, cfg, own)
                if got != vc.fast_value:
                    stats["counterexamples"] += 1
                    if witness is None:
                        witness = {
                            "config": vc.to_record(),
                            "quorum": sorted(q),
                            "own_initial": encode_value(own),
                            "selected": encode_value(got),
                        }
                    if stop_at_first:
                        return Verdict(name, False, witness, stats)
    return Verdict(name, witness is None, witness, stats)


def check_tightness(e: int, f: int, variant: str, *, domain: Sequence[int] = (0, 1)) -> Verdict:
    """Oracle passes at the bound and finds a counterexample one below it."""
    n = required_n(e, f, variant)
    at = lemma_oracle(Config(n, e, f, variant, value_domain=tuple(domain)), domain=domain)
    below = lemma_oracle(Config(n - 1, e, f, variant, value_domain=tuple(domain), allow_below_bound=True), domain=domain)
    return Verdict(
        f"tightness[{variant} e={e} f={f}]",
        at.passed and not below.passed,
        None if at.passed and not below.passed else {"at_bound": at.witness, "below_bound_found": not below.passed},
        {"n": n, "at_bound_pass": at.passed, "below_bound_counterexample": not below.passed},
    )


# -- fuzzing ----------------------------------------------------------------


def random_scenario(cfg: Config, seed: int, crash_budget: int | None = None, *, splice: bool = False) -> Scenario:
    """Seeded random (or spliced) scenario with up to ``crash_budget`` crashes."""
    rng = random.Random(f"fuzz-{seed}")
    d = cfg.delta
    budget = cfg.f if crash_budget is None else min(crash_budget, cfg.f)
    pids = list(cfg.pids)
    k = rng.randint(0, budget)
    victims = sorted(rng.sample(pids, k))
    pre = rng.choice([PRE_GST_RANDOM, PRE_GST_LOWEST])

    if splice:
        shuffled = pids[:]
        rng.shuffle(shuffled)
        cut = rng.randint(1, cfg.n - 1)
        groups = [sorted(shuffled[:cut]), sorted(shuffled[cut:])]
        rounds = [rng.randint(1, 3), rng.randint(1, 3)]
        end = max(rounds) * d
        extra = rng.randint(0, max(0, 20 * d - end))
        run_cfg = dataclasses.replace(cfg, gst=extra)
        proposals, calls = _random_inputs(run_cfg, rng, (), end + extra)
        sc = make_splice_schedule(
            run_cfg, groups, rounds, victims, seed, proposals, calls, horizon=end + extra + 20 * d
        )
        return dataclasses.replace(sc, omega_pre_gst=pre)

    gst = rng.randint(0, 20) * d
    run_cfg = dataclasses.replace(cfg, gst=gst)
    crash_plan = tuple(sorted(((rng.randint(0, gst) if rng.random() < 0.7 else 0), p) for p in victims))
    at_zero = {p for t, p in crash_plan if t == 0}
    proposals, calls = _random_inputs(run_cfg, rng, at_zero, gst)
    return Scenario(
        cfg=run_cfg,
        proposals=proposals,
        calls=calls,
        crash_plan=crash_plan,
        schedule=RANDOM,
        seed=seed,
        horizon=gst + 20 * d,
        omega_pre_gst=pre,
    )


def _random_inputs(cfg: Config, rng: random.Random, at_zero, latest: int):
    dom = cfg.value_domain
    if cfg.variant == TASK:
        return tuple(None if p in at_zero else rng.choice(dom) for p in cfg.pids), ()
    calls = []
    for p in cfg.pids:
        if rng.random() < 0.7:
            calls.append(ProposeCall(rng.randint(0, latest), p, rng.choice(dom)))
    return (), tuple(calls)


@dataclass
class FuzzOutcome:
    seed: int
    failures: list[Verdict]
    latency: int | None  # last correct decision minus GST


def fuzz_one(cfg: Config, seed: int, crash_budget: int | None = None, splice_every: int = 4) -> FuzzOutcome:
    splice = splice_every > 0 and seed % splice_every == splice_every - 1
    sc = random_scenario(cfg, seed, crash_budget, splice=splice)
    tr = run(sc)
    bound = sc.gst + TERMINATION_DELTAS * cfg.delta
    verdicts = [check_agreement(tr), check_validity(tr, sc), check_slow_ballot_safety(tr, sc.cfg), check_termination(tr, bound, sc)]
    first: dict[int, int] = {}
    for ev in tr.decisions():
        first.setdefault(ev["pid"], ev["t"])
    times = [first[p] for p in sc.correct() if p in first]
    latency = max(times) - sc.gst if times else None
    return FuzzOutcome(seed, [v for v in verdicts if not v.passed], latency)


def _fuzz_chunk(args) -> list[FuzzOutcome]:
    cfg, seeds, budget, splice_every = args
    return [fuzz_one(cfg, s, budget, splice_every) for s in seeds]


def fuzz(
    cfg: Config,
    seeds: Iterable[int],
    crash_budget: int | None = None,
    *,
    splice_every: int = 4,
    workers: int = 1,
    stop_at_first: bool = False,
) -> Verdict:
    """Random and spliced schedules; every fourth seed is spliced by default."""
    seeds = list(seeds)
    outcomes: list[FuzzOutcome] = []
    if workers > 1 and not stop_at_first:
        size = max(1, len(seeds) // (workers * 8))
        chunks = [(cfg, seeds[i : i + size], crash_budget, splice_every) for i in range(0, len(seeds), size)]
        with ProcessPoolExecutor(workers) as pool:
            for part in pool.map(_fuzz_chunk, chunks):
                outcomes.extend(part)
    else:
        for s in seeds:
            out = fuzz_one(cfg, s, crash_budget, splice_every)
            outcomes.append(out)
            if stop_at_first and out.failures:
                break
    outcomes.sort(key=lambda o: o.seed)
    failed = [o for o in outcomes if o.failures]
    counts: dict[str, int] = defaultdict(int)
    for o in failed:
        for v in o.failures:
            counts[v.name] += 1
    latencies = [o.latency for o in outcomes if o.latency is not None]
    stats = {
        "runs": len(outcomes),
        "failed_runs": len(failed),
        "max_latency_deltas": max(latencies) / cfg.delta if latencies else None,
        **{f"violations_{k}": c for k, c in sorted(counts.items())},
    }
    witness = None
    if failed:
        o = failed[0]
        witness = {"seed": o.seed, "property": o.failures[0].name, **(o.failures[0].witness or {})}
    name = f"fuzz[{cfg.variant} n={cfg.n} e={cfg.e} f={cfg.f}]"
    return Verdict(name, not failed, witness, stats)
