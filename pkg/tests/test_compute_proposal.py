from __future__ import annotations

import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from twostep.checker import lemma_oracle
from twostep.model import BOTTOM, OBJECT, TASK, Config, OneB
from twostep.protocol import ProtocolError, compute_proposal

CFG = Config(6, 2, 2, TASK, value_domain=tuple(range(10)))


def _r(val=None, who=None, vbal=0, decided=None, initial=0, ballot=5):
    return OneB(ballot, vbal, val, who, decided, initial)


def test_decided_reply_wins():
    replies = {1: _r(3, 1), 2: _r(decided=7), 3: _r(), 4: _r(9, 5, vbal=4)}
    assert compute_proposal(replies, CFG, 1) == 7


def test_highest_slow_vote_wins():
    replies = {1: _r(1, 1), 2: _r(2, 2), 3: _r(), 4: _r(9, 6, vbal=3)}
    assert compute_proposal(replies, CFG, 1) == 9


def test_outside_proposer_majority_wins():
    replies = {1: _r(5, 6), 2: _r(5, 6), 3: _r(5, 6), 4: _r(3, 2)}
    assert compute_proposal(replies, CFG, 0, quorum={1, 2, 3, 4}) == 5


def test_tie_at_threshold_picks_greatest():
    replies = {1: _r(4, 5), 2: _r(4, 5), 3: _r(8, 6), 4: _r(8, 6)}
    assert compute_proposal(replies, CFG, 0) == 8


def test_falls_back_to_own_initial():
    replies = {p: _r() for p in (1, 2, 3, 4)}
    assert compute_proposal(replies, CFG, 6) == 6


def test_object_fallback_prefers_reported_values():
    cfg = Config(5, 2, 2, OBJECT)
    replies = {1: _r(initial=BOTTOM), 2: _r(initial=1), 3: _r(0, 3, initial=0)}
    assert compute_proposal(replies, cfg, BOTTOM) == 1
    empty = {p: _r(initial=BOTTOM) for p in (1, 2, 3)}
    assert compute_proposal(empty, cfg, BOTTOM) is None


def test_malformed_reply_sets_rejected():
    with pytest.raises(ProtocolError):
        compute_proposal({1: _r(), 2: _r()}, CFG, 0)
    with pytest.raises(ProtocolError):
        compute_proposal({p: _r() for p in (1, 2, 3, 4)}, CFG, 0, quorum={1, 2, 3, 5})


# -- independent brute force ------------------------------------------------
#
# Enumerates final ballot-0 states directly: pick the fast decider d and its
# supporter set, then every way the remaining processes could have voted
# under the variant's acceptance rule.  Written separately from the checker's
# enumerator so the two can be compared.


def _can_vote(variant, mine, theirs):
    if variant == TASK:
        return theirs >= mine
    return mine is BOTTOM or mine == theirs


def _fast_states(n, e, variant, dom):
    pids = range(1, n + 1)
    init_choices = dom if variant == TASK else (BOTTOM, *dom)
    for initials in itertools.product(init_choices, repeat=n):
        init = dict(zip(pids, initials))
        for d in pids:
            v = init[d]
            if v is BOTTOM:
                continue
            others = [q for q in pids if q != d]
            eligible = [q for q in others if _can_vote(variant, init[q], v)]
            for k in range(n - e - 1, len(eligible) + 1):
                for support in itertools.combinations(eligible, k):
                    rest = [q for q in others if q not in support]
                    options = []
                    for r in rest:
                        opts = []
                        if init[r] is not BOTTOM:
                            opts.append((init[r], r))  # kept its own implicit vote
                        else:
                            opts.append(None)
                        for q in pids:
                            if q not in (r, d) and init[q] is not BOTTOM and _can_vote(variant, init[r], init[q]):
                                opts.append((init[q], q))
                        options.append(opts)
                    for choice in itertools.product(*options):
                        votes = {d: (v, d), **{q: (v, d) for q in support}, **dict(zip(rest, choice))}
                        replies = {}
                        for p in pids:
                            val, who = votes[p] if votes[p] is not None else (None, None)
                            replies[p] = OneB(1, 0, val, who, v if p == d else None, init[p])
                        yield replies, v


def _counterexamples(n, e, f, variant, dom=(0, 1)):
    cfg = Config(n, e, f, variant, value_domain=dom, allow_below_bound=True)
    bad = 0
    for replies, v in _fast_states(n, e, variant, dom):
        for q in itertools.combinations(range(1, n + 1), n - f):
            sub = {p: replies[p] for p in q}
            for c in q:
                if compute_proposal(sub, cfg, replies[c].initial) != v:
                    bad += 1
    return bad


@pytest.mark.parametrize("n,e,f,variant", [(3, 1, 1, TASK), (5, 1, 2, TASK), (3, 1, 1, OBJECT), (5, 2, 2, OBJECT)])
def test_brute_force_no_counterexample_at_bound(n, e, f, variant):
    assert _counterexamples(n, e, f, variant) == 0


@pytest.mark.parametrize("n,e,f,variant", [(5, 2, 2, TASK), (4, 2, 2, OBJECT)])
def test_brute_force_counterexample_below_bound(n, e, f, variant):
    assert _counterexamples(n, e, f, variant) > 0


@pytest.mark.parametrize("n,e,f,variant", [(3, 1, 1, TASK), (5, 1, 2, TASK), (5, 2, 2, TASK), (5, 2, 2, OBJECT), (4, 2, 2, OBJECT)])
def test_brute_force_agrees_with_checker_oracle(n, e, f, variant):
    cfg = Config(n, e, f, variant, value_domain=(0, 1), allow_below_bound=True)
    assert lemma_oracle(cfg).passed == (_counterexamples(n, e, f, variant) == 0)


def test_derived_example_only_five_can_be_fast_decided():
    # Q = {p1..p4} observed; complete p5, p6 every way and ask which values
    # could hold a fast quorum of n-e = 4 with an undecided-in-Q proposer.
    dom = tuple(range(10))
    seen = {1: (5, 6), 2: (5, 6), 3: (5, 6), 4: (3, 2)}
    possible = set()
    outside = [None] + [(v, p) for v in dom for p in range(1, 7)]
    for v5, v6 in itertools.product(outside, repeat=2):
        votes = {**seen, 5: v5, 6: v6}
        for value in dom:
            for proposer in (5, 6):  # proposers in Q reported no decision
                backers = {p for p, x in votes.items() if x == (value, proposer)}
                if votes[proposer] == (value, proposer) and len(backers | {proposer}) >= 4:
                    possible.add(value)
    assert possible == {5}
    replies = {p: _r(*seen[p]) for p in seen}
    assert compute_proposal(replies, CFG, 0) == 5


@given(st.lists(st.sampled_from([None, 0, 1, 2]), min_size=4, max_size=4), st.integers(0, 2))
def test_result_is_always_a_reported_or_own_value(vals, own):
    replies = {p: _r(v, 6 if v is not None else None, initial=own) for p, v in zip((1, 2, 3, 4), vals)}
    got = compute_proposal(replies, CFG, own)
    assert got == own or got in vals
