"""Core domain types: values, configuration, messages and effects.

Process ids are plain ints in ``1..n`` and ballots are non-negative ints;
ballot 0 is the fast ballot.  Values are ints drawn from a small ordered
domain, plus the distinguished :data:`BOTTOM` which sorts below every int.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Union

TASK = "task"
OBJECT = "object"
VARIANTS = (TASK, OBJECT)


@functools.total_ordering
class _Bottom:
    """Singleton "no proposal yet" value, lower than any other value."""

    _instance: _Bottom | None = None

    def __new__(cls) -> _Bottom:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __eq__(self, other: object) -> bool:
        return other is self

    def __lt__(self, other: object) -> bool:
        if other is self:
            return False
        if isinstance(other, int):
            return True
        return NotImplemented

    def __gt__(self, other: object) -> bool:
        if other is self or isinstance(other, int):
            return False
        return NotImplemented

    def __hash__(self) -> int:
        return hash("twostep.bottom")

    def __repr__(self) -> str:
        return "BOTTOM"

    def __reduce__(self) -> str:
        return "BOTTOM"


BOTTOM = _Bottom()

Value = Union[int, _Bottom]


class ConfigError(ValueError):
    """Inconsistent process counts, thresholds or value domains."""


def required_n(e: int, f: int, variant: str) -> int:
    """Smallest n admitting an f-resilient e-two-step protocol."""
    if e < 1 or e > f:
        raise ConfigError(f"need 1 <= e <= f, got e={e}, f={f}")
    if variant == TASK:
        return max(2 * e + f, 2 * f + 1)
    if variant == OBJECT:
        return max(2 * e + f - 1, 2 * f + 1)
    raise ConfigError(f"unknown variant {variant!r}")


def owner(ballot: int, n: int) -> int:
    """Process that coordinates ``ballot`` (``pid == ballot (mod n)``)."""
    r = ballot % n
    return n if r == 0 else r


@dataclass(frozen=True)
class Config:
    n: int
    e: int
    f: int
    variant: str = TASK
    delta: int = 10
    gst: int = 0
    value_domain: tuple[int, ...] = (0, 1, 2)
    allow_below_bound: bool = False
    # Protocol guards disabled for mutation testing, e.g. {"no-val-guard"}.
    mutations: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.e < 1 or self.e > self.f:
            raise ConfigError(f"need 1 <= e <= f, got e={self.e}, f={self.f}")
        if self.n < 2:
            raise ConfigError("need at least two processes")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.gst < 0:
            raise ConfigError("gst must be non-negative")
        if not self.value_domain:
            raise ConfigError("empty value domain")
        if list(self.value_domain) != sorted(set(self.value_domain)):
            raise ConfigError("value domain must be strictly increasing")
        if any(isinstance(v, bool) or not isinstance(v, int) for v in self.value_domain):
            raise ConfigError("values must be ints")
        object.__setattr__(self, "value_domain", tuple(self.value_domain))
        object.__setattr__(self, "mutations", frozenset(self.mutations))
        if not self.allow_below_bound and self.n < self.bound:
            raise ConfigError(
                f"n={self.n} is below the {self.variant} bound "
                f"{self.bound} for e={self.e}, f={self.f}"
            )

    @property
    def bound(self) -> int:
        return required_n(self.e, self.f, self.variant)

    @property
    def below_bound(self) -> bool:
        return self.n < self.bound

    @property
    def fast_quorum(self) -> int:
        return self.n - self.e

    @property
    def slow_quorum(self) -> int:
        return self.n - self.f

    @property
    def pids(self) -> range:
        return range(1, self.n + 1)

    def to_record(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "e": self.e,
            "f": self.f,
            "variant": self.variant,
            "delta": self.delta,
            "gst": self.gst,
            "value_domain": list(self.value_domain),
            "allow_below_bound": self.allow_below_bound,
            "mutations": sorted(self.mutations),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> Config:
        return cls(
            n=rec["n"],
            e=rec["e"],
            f=rec["f"],
            variant=rec["variant"],
            delta=rec["delta"],
            gst=rec["gst"],
            value_domain=tuple(rec["value_domain"]),
            allow_below_bound=rec["allow_below_bound"],
            mutations=frozenset(rec["mutations"]),
        )


# -- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class Propose:
    value: Value
    proposer: int


@dataclass(frozen=True)
class OneA:
    ballot: int


@dataclass(frozen=True)
class OneB:
    ballot: int
    vbal: int
    val: Value | None
    val_proposer: int | None
    decided: Value | None
    initial: Value

    def __post_init__(self) -> None:
        if self.vbal > self.ballot:
            raise ValueError("1B vote ballot exceeds its ballot")
        if (self.val is None) != (self.val_proposer is None):
            raise ValueError("1B val and val_proposer must be set together")


@dataclass(frozen=True)
class TwoA:
    ballot: int
    value: Value

    def __post_init__(self) -> None:
        if self.ballot <= 0:
            raise ValueError("2A only exists on slow ballots")


@dataclass(frozen=True)
class TwoB:
    ballot: int
    value: Value


@dataclass(frozen=True)
class Decide:
    value: Value


Message = Union[Propose, OneA, OneB, TwoA, TwoB, Decide]


# -- effects ----------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    to: int
    msg: Any


@dataclass(frozen=True)
class Broadcast:
    """Send ``msg`` to every process except the sender."""

    msg: Any


@dataclass(frozen=True)
class Decided:
    value: Value


@dataclass(frozen=True)
class SetTimer:
    duration: int


@dataclass(frozen=True)
class StopTimer:
    pass


Effect = Union[Send, Broadcast, Decided, SetTimer, StopTimer]


# -- canonical encoding -----------------------------------------------------


def encode_value(v: Value | None) -> Any:
    if v is None:
        return None
    if v is BOTTOM:
        return "bot"
    return v


def decode_value(raw: Any) -> Value | None:
    if raw is None:
        return None
    if raw == "bot":
        return BOTTOM
    return int(raw)


def encode_message(msg: Any) -> dict[str, Any]:
    """Message -> dict with a stable key order (kind first, then fields)."""
    if isinstance(msg, Propose):
        return {"kind": "Propose", "value": encode_value(msg.value), "proposer": msg.proposer}
    if isinstance(msg, OneA):
        return {"kind": "1A", "ballot": msg.ballot}
    if isinstance(msg, OneB):
        return {
            "kind": "1B",
            "ballot": msg.ballot,
            "vbal": msg.vbal,
            "val": encode_value(msg.val),
            "val_proposer": msg.val_proposer,
            "decided": encode_value(msg.decided),
            "initial": encode_value(msg.initial),
        }
    if isinstance(msg, TwoA):
        return {"kind": "2A", "ballot": msg.ballot, "value": encode_value(msg.value)}
    if isinstance(msg, TwoB):
        return {"kind": "2B", "ballot": msg.ballot, "value": encode_value(msg.value)}
    if isinstance(msg, Decide):
        return {"kind": "Decide", "value": encode_value(msg.value)}
    encoder = getattr(msg, "to_record", None)
    if encoder is None:
        raise TypeError(f"cannot encode {msg!r}")
    return encoder()


def decode_message(rec: dict[str, Any]) -> Any:
    kind = rec["kind"]
    if kind == "Propose":
        return Propose(decode_value(rec["value"]), rec["proposer"])
    if kind == "1A":
        return OneA(rec["ballot"])
    if kind == "1B":
        return OneB(
            rec["ballot"],
            rec["vbal"],
            decode_value(rec["val"]),
            rec["val_proposer"],
            decode_value(rec["decided"]),
            decode_value(rec["initial"]),
        )
    if kind == "2A":
        return TwoA(rec["ballot"], decode_value(rec["value"]))
    if kind == "2B":
        return TwoB(rec["ballot"], decode_value(rec["value"]))
    if kind == "Decide":
        return Decide(decode_value(rec["value"]))
    if kind == "Beacon":
        from twostep.omega import Beacon

        return Beacon()
    raise ValueError(f"unknown message kind {kind!r}")
