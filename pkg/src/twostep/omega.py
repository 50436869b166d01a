"""Omega: eventual leader election.

Two interchangeable implementations:

* oracle -- reads the simulator's crash set; after GST every live process
  gets the lowest-id survivor, before GST the scenario picks (adversarially).
* heartbeat -- processes broadcast a :class:`Beacon` every delta and elect
  the lowest id they have not suspected.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from twostep.model import Broadcast

ORACLE = "oracle"
HEARTBEAT = "heartbeat"
MODES = (ORACLE, HEARTBEAT)

PRE_GST_LOWEST = "lowest"
PRE_GST_RANDOM = "random"


class OmegaError(RuntimeError):
    pass


@dataclass(frozen=True)
class Beacon:
    """Liveness beacon used by heartbeat Omega."""

    def to_record(self) -> dict[str, Any]:
        return {"kind": "Beacon"}


@dataclass
class HeartbeatState:
    pid: int
    n: int
    delta: int
    timeout: int
    last_heard: dict[int, int] = field(default_factory=dict)
    estimate: int = 1

    def __post_init__(self) -> None:
        if not self.last_heard:
            self.last_heard = {q: 0 for q in range(1, self.n + 1)}

    def suspected(self, now: int) -> set[int]:
        limit = 2 * self.delta + self.timeout
        return {q for q, t in self.last_heard.items() if q != self.pid and now - t > limit}


def on_beacon(state: HeartbeatState, sender: int, now: int) -> HeartbeatState:
    state.last_heard[sender] = max(state.last_heard[sender], now)
    return state


def on_heartbeat_tick(state: HeartbeatState, now: int) -> tuple[HeartbeatState, list]:
    """Broadcast a beacon and refresh the leader estimate."""
    state.last_heard[state.pid] = now
    suspects = state.suspected(now)
    state.estimate = min(q for q in range(1, state.n + 1) if q not in suspects)
    return state, [Broadcast(Beacon())]


class OmegaView:
    """Per-process leader estimates for one simulated run."""

    def __init__(
        self,
        n: int,
        mode: str = ORACLE,
        *,
        gst: int = 0,
        delta: int = 10,
        timeout: int | None = None,
        pre_gst: str = PRE_GST_LOWEST,
        seed: int = 0,
    ) -> None:
        if mode not in MODES:
            raise OmegaError(f"unknown omega mode {mode!r}")
        self.n = n
        self.mode = mode
        self.gst = gst
        self.pre_gst = pre_gst
        self.crashed: set[int] = set()
        self._rng = random.Random(f"omega-{seed}")
        timeout = 2 * delta if timeout is None else timeout
        self.heartbeats = {
            p: HeartbeatState(p, n, delta, timeout) for p in range(1, n + 1)
        }

    def crash(self, pid: int) -> None:
        self.crashed.add(pid)

    def leader(self, pid: int, now: int) -> int:
        """Current leader estimate of ``pid`` at time ``now``."""
        if pid in self.crashed:
            raise OmegaError(f"p{pid} is crashed")
        if self.mode == HEARTBEAT:
            return self.heartbeats[pid].estimate
        if now < self.gst and self.pre_gst == PRE_GST_RANDOM:
            return self._rng.randint(1, self.n)
        return min(q for q in range(1, self.n + 1) if q not in self.crashed)
