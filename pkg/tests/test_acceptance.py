"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible with
``pytest -v -s`` and in the captured output) and asserts its time budget.
"""

from __future__ import annotations

import dataclasses
import itertools
import time

import pytest

from twostep.checker import (
    TERMINATION_DELTAS,
    check_two_step_object,
    check_two_step_task,
    fuzz,
    lemma_oracle,
    random_scenario,
)
from twostep.model import OBJECT, TASK, Config, required_n
from twostep.omega import HEARTBEAT
from twostep.protocol import NO_VAL_GUARD
from twostep.simnet import make_splice_schedule, make_sync_schedule, object_calls, replay, run

DOMAIN = (0, 1)
D = 10


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")

    return emit


def _smallest_n(e: int, f: int, fast_term: int) -> int:
    # independent of required_n: scan upward for the first n meeting both floors
    n = 1
    while not (n >= fast_term and n >= 2 * f + 1):
        n += 1
    return n


def test_criterion_1_bound_table(report):
    t0 = time.perf_counter()
    mismatches = []
    for e, f in itertools.product(range(1, 5), repeat=2):
        if e > f:
            continue
        task = _smallest_n(e, f, 2 * e + f)
        obj = _smallest_n(e, f, 2 * e + f - 1)
        if required_n(e, f, TASK) != task or required_n(e, f, OBJECT) != obj:
            mismatches.append((e, f))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and required_n(2, 2, TASK) == 6 and required_n(2, 2, OBJECT) == 5 and elapsed < 1
    report(1, ok, f"grid e,f in 1..4 mismatches={mismatches} (2,2)->task 6/object 5 in {elapsed:.3f}s")
    assert ok


def test_criterion_2_two_step_task(report):
    t0 = time.perf_counter()
    rows = []
    for e, f, n in [(1, 1, 3), (1, 2, 5), (2, 2, 6), (2, 3, 7)]:
        v = check_two_step_task(Config(n, e, f, TASK, value_domain=DOMAIN))
        rows.append((n, e, f, v.passed, v.stats["item1_cases"], v.stats["item2_cases"], v.stats.get("item2_decision_times")))
    elapsed = time.perf_counter() - t0
    ok = all(r[3] and r[6] == [2 * D] for r in rows) and elapsed < 60
    summary = " ".join(f"n={r[0]}:{r[4]}+{r[5]}cases" for r in rows)
    report(2, ok, f"{summary}; item-2 decisions all at 2 delta; {elapsed:.1f}s")
    assert ok


def test_criterion_3_two_step_object(report):
    t0 = time.perf_counter()
    rows = []
    for e, f, n in [(1, 1, 3), (2, 2, 5), (2, 3, 7)]:
        v = check_two_step_object(Config(n, e, f, OBJECT, value_domain=DOMAIN))
        rows.append((n, v.passed, v.stats.get("item1_decision_times"), v.stats["item1_cases"]))
    elapsed = time.perf_counter() - t0
    ok = all(r[1] and r[2] == [2 * D] for r in rows) and elapsed < 60
    summary = " ".join(f"n={r[0]}:{r[3]}cases" for r in rows)
    report(3, ok, f"{summary}; item-1 decisions all at 2 delta; {elapsed:.1f}s")
    assert ok


def _oracle(n, e, f, variant):
    return lemma_oracle(Config(n, e, f, variant, value_domain=DOMAIN, allow_below_bound=True), domain=DOMAIN)


def test_criterion_4_recovery_oracle(report):
    t0 = time.perf_counter()
    failures, notes = [], []
    for e, f in [(1, 1), (1, 2), (2, 2), (2, 3)]:
        for variant, n in ((TASK, 2 * e + f), (OBJECT, 2 * e + f - 1)):
            if n - e - f < 1:
                # Below 2f+1 the fast quorum need not meet Q at all; the
                # recovery rule is only claimed inside f-resilient systems.
                literal = _oracle(n, e, f, variant)
                notes.append(f"{variant}({e},{f}) n={n} literal counterexample={not literal.passed}")
                n = required_n(e, f, variant)
            v = _oracle(n, e, f, variant)
            if not v.passed:
                failures.append((variant, e, f, n, v.witness))
    below = {variant: _oracle(n, 2, 2, variant) for variant, n in ((TASK, 5), (OBJECT, 4))}
    elapsed = time.perf_counter() - t0
    ok = not failures and all(not v.passed for v in below.values()) and elapsed < 300
    report(
        4,
        ok,
        f"zero counterexamples at the bound; below-bound (2,2) counterexamples "
        f"task={not below[TASK].passed} object={not below[OBJECT].passed}; "
        f"degenerate cells: {'; '.join(notes)}; {elapsed:.1f}s",
    )
    assert ok, failures


@pytest.fixture(scope="module")
def fuzz_runs():
    t0 = time.perf_counter()
    task = fuzz(Config(6, 2, 2, TASK), range(10_000))
    obj = fuzz(Config(5, 2, 2, OBJECT), range(10_000))
    return task, obj, time.perf_counter() - t0


def test_criterion_5_safety_fuzzing(report, fuzz_runs):
    task, obj, elapsed = fuzz_runs
    safety = ("violations_agreement", "violations_validity", "violations_slow-ballot-safety")
    counts = {k: task.stats.get(k, 0) + obj.stats.get(k, 0) for k in safety}
    ok = not any(counts.values()) and task.stats["runs"] == obj.stats["runs"] == 10_000 and elapsed < 600
    report(5, ok, f"20000 runs (every 4th spliced), violations={counts}; {elapsed:.1f}s")
    assert ok, (task.witness, obj.witness)


def test_criterion_6_termination(report, fuzz_runs):
    task, obj, _ = fuzz_runs
    late = task.stats.get("violations_termination", 0) + obj.stats.get("violations_termination", 0)
    worst = max(task.stats["max_latency_deltas"], obj.stats["max_latency_deltas"])
    ok = late == 0 and worst <= TERMINATION_DELTAS
    report(
        6,
        ok,
        f"bound GST+{TERMINATION_DELTAS} delta, late runs={late}, measured max "
        f"task={task.stats['max_latency_deltas']} object={obj.stats['max_latency_deltas']} delta after GST",
    )
    assert ok


def test_criterion_7_mutation_sensitivity(report):
    t0 = time.perf_counter()
    v = fuzz(Config(3, 1, 1, TASK, mutations={NO_VAL_GUARD}), range(1000), stop_at_first=True)
    elapsed = time.perf_counter() - t0
    found = not v.passed and v.witness["property"] == "agreement"
    ok = found and elapsed < 60
    report(7, ok, f"agreement violation at seed {v.witness and v.witness['seed']} within {v.stats['runs']} runs; {elapsed:.1f}s")
    assert ok


def _suite_scenarios():
    yield make_sync_schedule(Config(3, 1, 1), {3}, 2, (1, 2, None))
    yield make_sync_schedule(Config(6, 2, 2), {5, 6}, 2, (1, 2, 0, 2, None, None))
    yield make_sync_schedule(Config(5, 2, 2, OBJECT), {1, 2}, 3, calls=object_calls([(3, 1), (4, 1)]))
    cfg5 = Config(5, 2, 2, OBJECT)
    calls = object_calls([(1, 0), (2, 0), (3, 1), (4, 1), (5, 1)])
    for seed in range(6):
        yield make_splice_schedule(cfg5, [(1, 2), (3, 4, 5)], [2, 2], {4, 5}, seed, calls=calls)
    yield dataclasses.replace(random_scenario(Config(6, 2, 2), 7), omega=HEARTBEAT)
    shapes = [Config(6, 2, 2), Config(5, 2, 2, OBJECT), Config(3, 1, 1), Config(7, 2, 3, OBJECT)]
    seed = 0
    while True:
        for cfg in shapes:
            yield random_scenario(cfg, seed, splice=seed % 4 == 3)
        seed += 1


def test_criterion_8_determinism(report, tmp_path):
    t0 = time.perf_counter()
    mismatches = 0
    scenarios = list(itertools.islice(_suite_scenarios(), 100))
    for i, sc in enumerate(scenarios):
        path = run(sc).write(tmp_path / f"{i}.trace")
        recorded = path.read_bytes()
        fresh = replay(path)
        if fresh.dumps().encode() != recorded:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and len(scenarios) == 100 and elapsed < 60
    report(8, ok, f"{len(scenarios)} replays byte-identical, mismatches={mismatches}; {elapsed:.1f}s")
    assert ok
