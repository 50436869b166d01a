"""Two-step consensus as a pure, message-driven state machine.

Every handler takes a :class:`ProcessState` and an input and returns a fresh
state together with a list of effects; the input state is never modified.
One state machine instance runs per process.  The task variant starts with an
input value, the object variant starts idle and receives its value through
:func:`propose`.

Messages a process sends to itself (its own 1B and 2B as a coordinator) are
emitted as ordinary ``Send`` effects addressed to itself; the simulator
applies them inline.
"""

from __future__ import annotations

import copy
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from twostep.model import (
    BOTTOM,
    OBJECT,
    TASK,
    Broadcast,
    Config,
    Decide,
    Decided,
    Effect,
    OneA,
    OneB,
    Propose,
    Send,
    SetTimer,
    StopTimer,
    TwoA,
    TwoB,
    Value,
    owner,
)

NO_VAL_GUARD = "no-val-guard"
# A decided fast proposer must not lend its vote to another proposer.
NO_DECIDED_GUARD = "no-decided-guard"


class ProtocolError(ValueError):
    """Handler invoked outside its precondition."""


class AgreementFault(AssertionError):
    """A process learned a decision different from the one it holds."""


@dataclass
class ProcessState:
    pid: int
    cfg: Config
    bal: int = 0
    vbal: int = 0
    val: Value | None = None
    val_proposer: int | None = None
    initial_val: Value = BOTTOM
    decided: Value | None = None
    # True once the process accepted a Propose or a 2A; the proposer's
    # implicit self-vote does not count.
    voted: bool = False
    proposed: bool = False
    fast_votes: dict[Value, set[int]] = field(default_factory=dict)
    slow_votes: dict[tuple[int, Value], set[int]] = field(default_factory=dict)
    oneb_replies: dict[int, dict[int, OneB]] = field(default_factory=dict)
    # ballot -> value sent in our 2A for that ballot
    pending_2a: dict[int, Value] = field(default_factory=dict)

    def clone(self) -> ProcessState:
        new = copy.copy(self)
        new.fast_votes = {k: set(v) for k, v in self.fast_votes.items()}
        new.slow_votes = {k: set(v) for k, v in self.slow_votes.items()}
        new.oneb_replies = {k: dict(v) for k, v in self.oneb_replies.items()}
        new.pending_2a = dict(self.pending_2a)
        return new

    def snapshot(self) -> OneB:
        return OneB(self.bal, self.vbal, self.val, self.val_proposer, self.decided, self.initial_val)


Step = tuple[ProcessState, list[Effect]]


def _check_value(cfg: Config, v: Value) -> None:
    if v is BOTTOM:
        raise ProtocolError("bottom cannot be proposed")
    if v not in cfg.value_domain:
        raise ProtocolError(f"value {v!r} outside domain {cfg.value_domain}")


def _decide(s: ProcessState, v: Value) -> list[Effect]:
    s.decided = v
    return [Decided(v), Broadcast(Decide(v)), StopTimer()]


def start(cfg: Config, pid: int, initial: Value | None = None) -> Step:
    """Initial state of process ``pid`` plus its startup effects."""
    if pid not in cfg.pids:
        raise ProtocolError(f"pid {pid} outside 1..{cfg.n}")
    s = ProcessState(pid=pid, cfg=cfg)
    effects: list[Effect] = []
    if cfg.variant == TASK:
        if initial is None:
            raise ProtocolError("task processes need an initial value")
        _check_value(cfg, initial)
        s.initial_val = initial
        s.val, s.vbal, s.val_proposer = initial, 0, pid
        s.proposed = True
        effects.append(Broadcast(Propose(initial, pid)))
    elif initial is not None:
        raise ProtocolError("object processes start without a value; call propose()")
    effects.append(SetTimer(2 * cfg.delta))
    return s, effects


def propose(state: ProcessState, v: Value) -> Step:
    """Object-variant ``propose(v)`` invocation."""
    if state.cfg.variant != OBJECT:
        raise ProtocolError("propose() exists only in the object variant")
    if state.proposed:
        raise ProtocolError(f"p{state.pid} already invoked propose()")
    _check_value(state.cfg, v)
    s = state.clone()
    s.proposed = True
    s.initial_val = v
    if s.decided is not None or (s.val is not None and s.val != v):
        # voted for someone else's value: no Propose, wait for Decide
        return s, []
    if s.val is None:
        s.val, s.vbal, s.val_proposer = v, 0, s.pid
    return s, [Broadcast(Propose(v, s.pid))]


def on_propose(state: ProcessState, sender: int, v: Value) -> Step:
    if sender == state.pid:
        raise ProtocolError("a process does not receive its own Propose")
    s = state
    if s.decided is not None and NO_DECIDED_GUARD not in s.cfg.mutations:
        return s, []
    if s.bal != 0 or s.voted or v is BOTTOM:
        return s, []
    if v < s.initial_val:
        return s, []
    if s.cfg.variant == OBJECT and s.initial_val is not BOTTOM and s.initial_val != v:
        return s, []
    s = s.clone()
    s.val, s.vbal, s.val_proposer = v, 0, sender
    s.voted = True
    return s, [Send(sender, TwoB(0, v))]


def on_two_b(state: ProcessState, sender: int, b: int, v: Value) -> Step:
    s = state.clone()
    cfg = s.cfg
    if b == 0:
        voters = s.fast_votes.setdefault(v, set())
        voters.add(sender)
        if (
            s.decided is None
            and s.bal == 0
            and s.initial_val is not BOTTOM
            and v == s.initial_val
            and (s.val == v or NO_VAL_GUARD in cfg.mutations)
            and len(voters - {s.pid}) >= cfg.n - cfg.e - 1
        ):
            return s, _decide(s, v)
        return s, []
    voters = s.slow_votes.setdefault((b, v), set())
    voters.add(sender)
    if (
        s.decided is None
        and owner(b, cfg.n) == s.pid
        and s.pending_2a.get(b) == v
        and len(voters) >= cfg.n - cfg.f
    ):
        return s, _decide(s, v)
    return s, []


def next_ballot(bal: int, pid: int, n: int) -> int:
    """Smallest ballot above ``bal`` owned by ``pid``."""
    b = bal + 1
    return b + (pid - b) % n


def on_timer(state: ProcessState, leader: int) -> Step:
    """New-ballot timer expiry; ``leader`` is the current Omega output."""
    s = state
    effects: list[Effect] = [SetTimer(5 * s.cfg.delta)]
    if leader == s.pid and s.decided is None:
        b = next_ballot(s.bal, s.pid, s.cfg.n)
        effects += [Broadcast(OneA(b)), Send(s.pid, OneA(b))]
    return s, effects


def on_one_a(state: ProcessState, sender: int, b: int) -> Step:
    if b <= state.bal:
        return state, []
    s = state.clone()
    s.bal = b
    return s, [Send(sender, s.snapshot())]


def compute_proposal(
    replies: Mapping[int, OneB],
    cfg: Config,
    own_initial: Value,
    quorum: Iterable[int] | None = None,
) -> Value | None:
    """Value a slow-ballot coordinator may safely propose.

    ``replies`` maps each sender in the quorum Q to its 1B payload.  Returns
    ``None`` only when nothing was ever proposed (object variant).
    """
    q = frozenset(replies)
    if quorum is not None and frozenset(quorum) != q:
        raise ProtocolError("quorum does not match reply senders")
    if len(q) != cfg.n - cfg.f:
        raise ProtocolError(f"need exactly n-f={cfg.n - cfg.f} replies, got {len(q)}")
    rs = list(replies.values())

    for r in rs:
        if r.decided is not None:
            return r.decided

    b_max = max(r.vbal for r in rs)
    if b_max > 0:
        return next(r.val for r in rs if r.vbal == b_max and r.val is not None)

    # Only votes for proposers outside Q can belong to a fast decision.
    counts = Counter(
        r.val for r in rs if r.val is not None and r.val_proposer not in q
    )
    threshold = cfg.n - cfg.f - cfg.e
    above = [v for v, c in counts.items() if c > threshold]
    if above:
        return max(above)
    exact = [v for v, c in counts.items() if c == threshold]
    if exact:
        return max(exact)

    if own_initial is not BOTTOM:
        return own_initial
    seen = [r.val for r in rs if r.val is not None and r.val is not BOTTOM]
    seen += [r.initial for r in rs if r.initial is not BOTTOM]
    return max(seen) if seen else None


def on_one_b(state: ProcessState, sender: int, payload: OneB) -> Step:
    cfg = state.cfg
    b = payload.ballot
    if owner(b, cfg.n) != state.pid:
        raise ProtocolError(f"p{state.pid} does not own ballot {b}")
    if b in state.pending_2a or sender in state.oneb_replies.get(b, {}):
        return state, []
    s = state.clone()
    replies = s.oneb_replies.setdefault(b, {})
    need = cfg.n - cfg.f
    if len(replies) >= need:
        if cfg.variant == TASK:
            return s, []
        # Object coordinator abstained on the first quorum; any other
        # quorum of genuine replies is equally safe, so retry with this one.
        quorum = {sender: payload}
        quorum.update(list(replies.items())[: need - 1])
        replies[sender] = payload
    else:
        replies[sender] = payload
        if len(replies) < need:
            return s, []
        quorum = replies
    v = compute_proposal(quorum, cfg, s.initial_val)
    if v is None:
        return s, []
    s.pending_2a[b] = v
    return s, [Broadcast(TwoA(b, v)), Send(s.pid, TwoA(b, v))]


def on_two_a(state: ProcessState, sender: int, b: int, v: Value) -> Step:
    if b <= 0:
        raise ProtocolError("2A on the fast ballot")
    s = state
    if b < s.bal or not (s.vbal < b or (s.vbal == b and s.val == v)):
        return s, []
    s = s.clone()
    s.bal, s.vbal, s.val, s.val_proposer = b, b, v, sender
    s.voted = True
    return s, [Send(sender, TwoB(b, v))]


def on_decide(state: ProcessState, v: Value) -> Step:
    if state.decided is None:
        s = state.clone()
        return s, _decide(s, v)
    if state.decided != v:
        raise AgreementFault(f"p{state.pid} decided {state.decided!r} but received Decide({v!r})")
    return state, []


def handle(state: ProcessState, sender: int, msg: object) -> Step:
    """Dispatch a delivered protocol message to its handler."""
    match msg:
        case Propose(value=v):
            return on_propose(state, sender, v)
        case OneA(ballot=b):
            return on_one_a(state, sender, b)
        case OneB():
            return on_one_b(state, sender, msg)
        case TwoA(ballot=b, value=v):
            return on_two_a(state, sender, b, v)
        case TwoB(ballot=b, value=v):
            return on_two_b(state, sender, b, v)
        case Decide(value=v):
            return on_decide(state, v)
    raise ProtocolError(f"unknown message {msg!r}")
