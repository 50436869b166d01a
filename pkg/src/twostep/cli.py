"""Command-line entry point.

Subcommands: ``run`` (one simulated scenario), ``check`` (two-step and
recovery-oracle suites), ``fuzz`` (seeded random and spliced schedules),
``oracle`` (recovery-rule enumeration) and ``replay`` (re-execute a trace).

Exit codes: 0 pass, 1 property violation, 2 usage or configuration error.
Every flag may also be given in an INI file passed with ``--config``; keys
live in a ``[twostep]`` section and use the long flag name without dashes
(``allow-below-bound = true``).  Flags on the command line win.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from twostep import __version__
from twostep.checker import (
    MAX_ORACLE_N,
    TERMINATION_DELTAS,
    Verdict,
    check_agreement,
    check_slow_ballot_safety,
    check_termination,
    check_two_step_object,
    check_two_step_task,
    check_validity,
    fuzz,
    lemma_oracle,
    summary_table,
)
from twostep.model import OBJECT, TASK, VARIANTS, Config, ConfigError, required_n
from twostep.omega import HEARTBEAT, ORACLE, PRE_GST_LOWEST, PRE_GST_RANDOM, OmegaError
from twostep.protocol import NO_DECIDED_GUARD, NO_VAL_GUARD
from twostep.simnet import (
    SCHEDULES,
    SPLICE,
    SYNC,
    ProposeCall,
    ReplayDivergence,
    ReplayError,
    Scenario,
    ScenarioError,
    Splice,
    Trace,
    replay,
    run,
)

OUT_DIR_ENV = "TWOSTEP_OUT_DIR"
CONFIG_SECTION = "twostep"
# (e, f) cells of the default check suite
DEFAULT_GRID = tuple((e, f) for f in (1, 2, 3) for e in (1, 2, 3) if e <= f)
MUTATIONS = (NO_VAL_GUARD, NO_DECIDED_GUARD)

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flag values or an unreadable input file."""


# -- flag parsing helpers ---------------------------------------------------


def parse_pid(raw: str) -> int:
    raw = raw.strip()
    try:
        return int(raw[1:] if raw[:1] in "pP" else raw)
    except ValueError:
        raise UsageError(f"bad process id {raw!r}") from None


def parse_pids(raw: str | None) -> list[int]:
    if not raw:
        return []
    return [parse_pid(x) for x in raw.split(",") if x.strip()]


def parse_values(raw: str | None) -> list[int | None]:
    """``1,2,_,0`` -> [1, 2, None, 0]."""
    if raw is None:
        return []
    out: list[int | None] = []
    for x in raw.split(","):
        x = x.strip()
        try:
            out.append(None if x in ("_", "") else int(x))
        except ValueError:
            raise UsageError(f"bad value {x!r}") from None
    return out


def parse_crashes(raw: str | None) -> list[tuple[int, int]]:
    """``0:p5,30:p2`` -> [(0, 5), (30, 2)]."""
    out = []
    for item in (raw or "").split(","):
        if not item.strip():
            continue
        t, sep, p = item.partition(":")
        if not sep:
            raise UsageError(f"crash {item!r} is not TIME:PID")
        try:
            out.append((int(t), parse_pid(p)))
        except ValueError:
            raise UsageError(f"bad crash time in {item!r}") from None
    return out


def parse_calls(raw: str | None) -> list[ProposeCall]:
    """``0:p1:2,15:p3:1`` -> propose() calls (time, pid, value)."""
    out = []
    for item in (raw or "").split(","):
        if not item.strip():
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise UsageError(f"call {item!r} is not TIME:PID:VALUE")
        try:
            out.append(ProposeCall(int(parts[0]), parse_pid(parts[1]), int(parts[2])))
        except ValueError:
            raise UsageError(f"bad call {item!r}") from None
    return out


def parse_domain(raw: str) -> tuple[int, ...]:
    vals = parse_values(raw)
    if not vals or None in vals:
        raise UsageError(f"bad value domain {raw!r}")
    return tuple(vals)  # type: ignore[arg-type]


# -- parser -----------------------------------------------------------------


def _add_sizing(p: argparse.ArgumentParser, domain: str) -> None:
    p.add_argument("--config", help="INI file with a [twostep] section mirroring the flags")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--n", type=int)
    p.add_argument("--e", type=int)
    p.add_argument("--f", type=int)
    p.add_argument("--delta", type=int, default=10)
    p.add_argument("--gst", type=int, default=0)
    p.add_argument("--domain", default=domain, help="comma-separated ordered values")
    p.add_argument("--allow-below-bound", action="store_true")
    p.add_argument("--verdicts", help=f"verdict JSON-lines output (default: ${OUT_DIR_ENV}/<cmd>-verdicts.jsonl)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="twostep", description="Two-step consensus simulator and checker.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("run", help="simulate one scenario")
    _add_sizing(p, "0,1,2")
    p.add_argument("--schedule", choices=SCHEDULES, default=SYNC)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--faulty", help="processes crashed at time 0, e.g. p5,p6")
    p.add_argument("--favored", help="process whose messages are delivered first (sync)")
    p.add_argument("--order", help="full sender priority list, e.g. p2,p1")
    p.add_argument("--proposals", help="task inputs per process, _ for crashed; object: propose() at time 0")
    p.add_argument("--calls", help="object propose() calls TIME:PID:VALUE,...")
    p.add_argument("--crash", help="extra crashes TIME:PID,...")
    p.add_argument("--horizon", type=int)
    p.add_argument("--omega", choices=(ORACLE, HEARTBEAT), default=ORACLE)
    p.add_argument("--omega-timeout", type=int)
    p.add_argument("--pre-gst", choices=(PRE_GST_LOWEST, PRE_GST_RANDOM), default=PRE_GST_LOWEST)
    p.add_argument("--splice-groups", help="group partition, e.g. p1,p2|p3,p4,p5")
    p.add_argument("--splice-rounds", help="synchronous rounds per group, e.g. 2,1")
    p.add_argument("--splice-crash", help="processes crashed when the splice ends")
    p.add_argument("--mutation", help=f"comma list of disabled guards: {', '.join(MUTATIONS)}")
    p.add_argument("--strict", action="store_true", help="fail if messages are still in flight at the horizon")
    p.add_argument("--trace", help=f"trace output (default: ${OUT_DIR_ENV}/run.trace)")
    subs["run"] = p

    p = sub.add_parser("check", help="two-step and recovery-oracle suites")
    _add_sizing(p, "0,1")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--search-orders", action="store_true", help="also try every delivery order (n <= 4)")
    subs["check"] = p

    p = sub.add_parser("fuzz", help="seeded random and spliced schedules")
    _add_sizing(p, "0,1,2")
    p.add_argument("--seeds", type=int, default=1000, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--crash-budget", type=int)
    p.add_argument("--splice-every", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mutation", help=f"comma list of disabled guards: {', '.join(MUTATIONS)}")
    p.add_argument("--stop-at-first", action="store_true")
    p.add_argument("--trace", help="where to write the first failing run's trace")
    subs["fuzz"] = p

    p = sub.add_parser("oracle", help="exhaustive recovery-rule check")
    _add_sizing(p, "0,1")
    subs["oracle"] = p

    p = sub.add_parser("replay", help="re-execute a trace and compare byte-for-byte")
    p.add_argument("trace")
    subs["replay"] = p
    return parser, subs


_BOOL_KEYS = {"allow_below_bound", "strict", "stop_at_first", "search_orders"}


def load_config(path: str, sub: argparse.ArgumentParser) -> dict[str, object]:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not cp.has_section(CONFIG_SECTION):
        raise UsageError(f"config {path} has no [{CONFIG_SECTION}] section")
    known = {a.dest for a in sub._actions}
    out: dict[str, object] = {}
    for key in cp.options(CONFIG_SECTION):
        dest = key.replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if dest in _BOOL_KEYS:
            try:
                out[dest] = cp.getboolean(CONFIG_SECTION, key)
            except ValueError:
                raise UsageError(f"{key} must be a boolean") from None
        else:
            out[dest] = cp.get(CONFIG_SECTION, key)
    return out


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = subs[args.cmd]
        sub.set_defaults(**load_config(args.config, sub))
        args = parser.parse_args(argv)
    return args


# -- shared plumbing --------------------------------------------------------


def _out_path(explicit: str | None, default_name: str) -> Path | None:
    if explicit:
        return Path(explicit)
    base = os.environ.get(OUT_DIR_ENV)
    return Path(base) / default_name if base else None


def _emit_verdicts(args: argparse.Namespace, verdicts: list[Verdict]) -> None:
    print(summary_table(verdicts))
    path = _out_path(args.verdicts, f"{args.cmd}-verdicts.jsonl")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(v.to_json() + "\n" for v in verdicts))
        print(f"verdicts: {path}")


def _mutations(raw: str | None) -> frozenset[str]:
    names = frozenset(x.strip() for x in (raw or "").split(",") if x.strip())
    bad = names - set(MUTATIONS)
    if bad:
        raise UsageError(f"unknown mutation(s): {', '.join(sorted(bad))}")
    return names


def _config(args: argparse.Namespace, variant: str, e: int, f: int, n: int | None = None) -> Config:
    return Config(
        n=n if n is not None else required_n(e, f, variant),
        e=e,
        f=f,
        variant=variant,
        delta=args.delta,
        gst=args.gst,
        value_domain=parse_domain(args.domain),
        allow_below_bound=args.allow_below_bound,
        mutations=_mutations(getattr(args, "mutation", None)),
    )


def _single_config(args: argparse.Namespace) -> Config:
    missing = [k for k in ("variant", "e", "f") if getattr(args, k) is None]
    if missing:
        raise UsageError(f"{args.cmd} needs --{', --'.join(missing)}")
    return _config(args, args.variant, args.e, args.f, args.n)


def _print_witness(w: dict | None) -> None:
    if w is None:
        return
    print("witness: " + json.dumps(w, sort_keys=True, default=str))


# -- run --------------------------------------------------------------------


def _default_favored(cfg: Config, faulty: set[int], proposals, calls) -> int:
    correct = [p for p in cfg.pids if p not in faulty]
    if cfg.variant == TASK:
        best = max(proposals[p - 1] for p in correct)
        return next(p for p in correct if proposals[p - 1] == best)
    callers = [c.pid for c in sorted(calls, key=lambda c: (c.time, c.pid)) if c.pid in correct]
    return callers[0] if callers else correct[0]


def build_scenario(args: argparse.Namespace) -> Scenario:
    cfg = _single_config(args)
    faulty = set(parse_pids(args.faulty))
    crashes = [(0, p) for p in sorted(faulty)] + parse_crashes(args.crash)
    values = parse_values(args.proposals)
    proposals: tuple = ()
    calls = parse_calls(args.calls)
    if cfg.variant == TASK:
        if calls:
            raise UsageError("--calls applies to the object variant only")
        if len(values) != cfg.n:
            raise UsageError(f"--proposals needs {cfg.n} entries")
        dead = {p for t, p in crashes if t == 0}
        proposals = tuple(None if p in dead else v for p, v in zip(cfg.pids, values))
    elif values:
        if len(values) != cfg.n:
            raise UsageError(f"--proposals needs {cfg.n} entries")
        calls = [ProposeCall(0, p, v) for p, v in zip(cfg.pids, values) if v is not None and p not in faulty] + calls

    order: tuple[int, ...] = tuple(parse_pids(args.order))
    if args.favored:
        favored = parse_pid(args.favored)
        if favored in faulty:
            raise UsageError(f"favored p{favored} is faulty")
        order = (favored,) + tuple(p for p in order if p != favored)
    elif not order and args.schedule == SYNC:
        order = (_default_favored(cfg, faulty, proposals, calls),)

    splice = None
    if args.schedule == SPLICE:
        if not args.splice_groups or not args.splice_rounds:
            raise UsageError("splice schedule needs --splice-groups and --splice-rounds")
        groups = tuple(tuple(parse_pids(g)) for g in args.splice_groups.split("|"))
        rounds = tuple(v for v in parse_values(args.splice_rounds) if v is not None)
        crash_set = tuple(sorted(set(parse_pids(args.splice_crash))))
        if len(crash_set) > cfg.f:
            raise UsageError(f"splice crash set exceeds f={cfg.f}")
        splice = Splice(groups, rounds, crash_set)

    return Scenario(
        cfg=cfg,
        proposals=proposals,
        calls=tuple(calls),
        crash_plan=tuple(sorted(crashes)),
        schedule=args.schedule,
        seed=args.seed,
        order=order,
        horizon=args.horizon or 0,
        omega=args.omega,
        omega_timeout=args.omega_timeout,
        omega_pre_gst=args.pre_gst,
        splice=splice,
    )


def trace_verdicts(trace: Trace, scenario: Scenario) -> list[Verdict]:
    out = [check_agreement(trace), check_validity(trace, scenario), check_slow_ballot_safety(trace, scenario.cfg)]
    bound = scenario.gst + TERMINATION_DELTAS * scenario.cfg.delta
    if scenario.horizon >= bound:
        out.append(check_termination(trace, bound, scenario))
    return out


def cmd_run(args: argparse.Namespace) -> int:
    scenario = build_scenario(args)
    trace = run(scenario, strict=args.strict)
    for ev in trace.decisions():
        print(f"decision p{ev['pid']} value={ev['value']} t={ev['t']}")
    verdicts = trace_verdicts(trace, scenario)
    failed = [v for v in verdicts if not v.passed]
    path = _out_path(args.trace, "run.trace")
    if path is None and failed:
        path = Path("witness.trace")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        trace.write(path)
        print(f"trace: {path}")
    _emit_verdicts(args, verdicts)
    if failed:
        print(f"witness: {path}")
        return EXIT_VIOLATION
    return EXIT_OK


# -- check ------------------------------------------------------------------


def check_cell(cfg: Config, search_orders: bool = False) -> list[Verdict]:
    """Two-step verdict, recovery oracle, and (where meaningful) a below-bound probe."""
    if cfg.variant == TASK:
        out = [check_two_step_task(cfg, search_orders=search_orders)]
    else:
        out = [check_two_step_object(cfg)]
    domain = cfg.value_domain
    if cfg.n <= MAX_ORACLE_N:
        out.append(lemma_oracle(cfg, domain=domain))
    else:
        out.append(Verdict(f"recovery-oracle[{cfg.variant} n={cfg.n} e={cfg.e} f={cfg.f}]", True, stats={"skipped": f"n>{MAX_ORACLE_N}"}))
    # Below a majority-dominated bound the recovery rule stays safe; only
    # probe cells where the fast-quorum term sets the bound.
    fast_term = 2 * cfg.e + cfg.f - (1 if cfg.variant == OBJECT else 0)
    if cfg.n == cfg.bound == fast_term and cfg.n - 1 <= MAX_ORACLE_N:
        below = Config(cfg.n - 1, cfg.e, cfg.f, cfg.variant, value_domain=domain, allow_below_bound=True)
        probe = lemma_oracle(below, domain=domain)
        out.append(
            Verdict(
                f"tightness[{cfg.variant} n={cfg.n - 1} e={cfg.e} f={cfg.f}]",
                not probe.passed,
                None if not probe.passed else {"note": "no counterexample below the bound"},
                {"counterexample_found": not probe.passed},
            )
        )
    return out


def _check_cell_args(item: tuple[Config, bool]) -> list[Verdict]:
    return check_cell(*item)


def cmd_check(args: argparse.Namespace) -> int:
    variants = [args.variant] if args.variant else list(VARIANTS)
    if args.e is None and args.f is None and args.n is None:
        cells = [(v, e, f, None) for v in variants for e, f in DEFAULT_GRID]
    else:
        if args.e is None or args.f is None:
            raise UsageError("check needs both --e and --f (or neither, for the default grid)")
        cells = [(v, args.e, args.f, args.n) for v in variants]
    cfgs = [_config(args, v, e, f, n) for v, e, f, n in cells]
    work = [(c, args.search_orders) for c in cfgs]
    if args.workers > 1 and len(work) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_check_cell_args, work))
    else:
        results = [_check_cell_args(w) for w in work]
    verdicts = [v for group in results for v in group]
    _emit_verdicts(args, verdicts)
    failed = [v for v in verdicts if not v.passed]
    for v in failed:
        print(f"FAIL {v.name}")
        _print_witness(v.witness)
    return EXIT_VIOLATION if failed else EXIT_OK


# -- fuzz -------------------------------------------------------------------


def cmd_fuzz(args: argparse.Namespace) -> int:
    cfg = _single_config(args)
    if args.seeds < 0:
        raise UsageError("--seeds must be non-negative")
    verdict = fuzz(
        cfg,
        range(args.seed, args.seed + args.seeds),
        args.crash_budget,
        splice_every=args.splice_every,
        workers=args.workers,
        stop_at_first=args.stop_at_first,
    )
    _emit_verdicts(args, [verdict])
    if verdict.passed:
        return EXIT_OK
    w = verdict.witness or {}
    scenario = Scenario.from_record(w["scenario"])
    path = _out_path(args.trace, f"fuzz-seed{w['seed']}.trace") or Path(f"fuzz-seed{w['seed']}.trace")
    path.parent.mkdir(parents=True, exist_ok=True)
    run(scenario, check=False).write(path)
    print(f"first failing seed {w['seed']}: {w['property']}")
    print(f"witness: {path}")
    return EXIT_VIOLATION


# -- oracle -----------------------------------------------------------------


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _single_config(args)
    if cfg.n > MAX_ORACLE_N:
        raise UsageError(f"oracle enumerates n <= {MAX_ORACLE_N} only")
    verdict = lemma_oracle(cfg, domain=cfg.value_domain)
    _emit_verdicts(args, [verdict])
    if verdict.passed:
        return EXIT_OK
    print("counterexample:")
    _print_witness(verdict.witness)
    return EXIT_VIOLATION


# -- replay -----------------------------------------------------------------


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        trace = replay(args.trace)
    except ReplayDivergence as exc:
        print(str(exc))
        return EXIT_VIOLATION
    print(f"replay identical: {len(trace.lines())} lines")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "check": cmd_check, "fuzz": cmd_fuzz, "oracle": cmd_oracle, "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"twostep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError, ScenarioError, ReplayError, OmegaError) as exc:
        print(f"twostep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
