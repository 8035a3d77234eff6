"""Command-line runner: ``gosig run|check|sigsize|sortition-stats``.

Exit status: 0 on success, 1 if any safety monitor reports a violation,
2 on configuration or trace-parse errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

from .monitor import MONITORS, any_safety_violation, metrics_report, run_monitors
from .sigagg import (SortitionState, encoded_size_for, has_potential_leader, keygen_group,
                     leadership_probability, naive_size_for)
from .simnet.config import ConfigError, load_config
from .simnet.scenario import default_genesis_q, run_scenario
from .trace import TraceError, read_trace

EXIT_OK, EXIT_VIOLATION, EXIT_ERROR = 0, 1, 2


@dataclass(frozen=True)
class RunManifest:
    scenario: str
    seeds: tuple[int, ...]
    out: str
    monitors: tuple[str, ...]
    format: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["monitors"] = list(self.monitors)
        return d


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"7"``, ``"1..100"`` (inclusive) or ``"1,4,9"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    return tuple(out)


def parse_monitors(text: Optional[str]) -> tuple[str, ...]:
    if not text:
        return MONITORS
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in names if m not in MONITORS]
    if bad:
        raise ValueError(f"unknown monitor(s): {', '.join(bad)}; choose from {', '.join(MONITORS)}")
    return names


def _summary_lines(rows: list[dict]) -> list[str]:
    lines = [f"{'seed':>6} {'height':>6} {'s1_ms':>8} {'s2_ms':>8} {'verdicts'}"]
    for row in rows:
        m = row["metrics"]
        s1 = "-" if m["stage1_mean_ms"] is None else f"{m['stage1_mean_ms']:.0f}"
        s2 = "-" if m["stage2_mean_ms"] is None else f"{m['stage2_mean_ms']:.0f}"
        verdicts = " ".join(f"{v['monitor']}={v['status']}" for v in row["verdicts"])
        lines.append(f"{row['seed']:>6} {m['committed_height']:>6} {s1:>8} {s2:>8} {verdicts}")
    return lines


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.scenario)
        if args.seeds:
            seeds = parse_seeds(args.seeds)
        else:
            seeds = (cfg.seed if args.seed is None else args.seed,)
        monitors = parse_monitors(args.monitors)
        configs = [cfg.with_seed(s) for s in seeds]
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(str(args.scenario), tuple(seeds), str(out), monitors, args.format)
    rows = []
    for c in sorted(configs, key=lambda c: c.seed):
        res = run_scenario(c, manifest=manifest.to_dict())
        (out / f"trace-seed{c.seed}.jsonl").write_bytes(res.trace_bytes)
        verdicts = run_monitors(res.header, res.records, monitors)
        rows.append({"seed": c.seed, "trace_hash": res.trace_hash,
                     "verdicts": [v.to_record() for v in verdicts],
                     "metrics": metrics_report(res.header, res.records),
                     "violation": any_safety_violation(verdicts)})
    if args.format in ("jsonl", "both"):
        with open(out / "report.jsonl", "w") as fh:
            fh.write(json.dumps({"kind": "manifest", **manifest.to_dict()}, sort_keys=True) + "\n")
            for row in rows:
                fh.write(json.dumps({"kind": "seed_report", **row}, sort_keys=True) + "\n")
    if args.format in ("text", "both"):
        text = "\n".join([f"manifest: {json.dumps(manifest.to_dict(), sort_keys=True)}"]
                         + _summary_lines(rows)) + "\n"
        (out / "summary.txt").write_text(text)
        print(text, end="")
    bad = [r["seed"] for r in rows if r["violation"]]
    if bad:
        print(f"safety violation in seed(s): {', '.join(map(str, bad))}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        header, records = read_trace(Path(args.trace))
        monitors = parse_monitors(args.monitors)
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    verdicts = run_monitors(header, records, monitors)
    for v in verdicts:
        if args.format == "text":
            print(f"{v.monitor:<12} {v.status}")
        else:
            print(json.dumps(v.to_record(), sort_keys=True))
    return EXIT_VIOLATION if any_safety_violation(verdicts) else EXIT_OK


def sigsize_table(n: int, sig_bits: int, counter_bits: int) -> dict:
    agg = encoded_size_for(n, sig_bits, counter_bits)
    naive = naive_size_for(n, sig_bits)
    return {"n_players": n, "sig_bits": sig_bits, "counter_bits": counter_bits,
            "naive_bytes": naive, "aggregated_bytes": agg, "ratio": agg / naive}


def cmd_sigsize(args) -> int:
    if min(args.n, args.sig_bits, args.counter_bits) <= 0:
        print("error: arguments must be positive", file=sys.stderr)
        return EXIT_ERROR
    row = sigsize_table(args.n, args.sig_bits, args.counter_bits)
    if args.format == "text":
        print(f"{'N':>8} {'naive_B':>10} {'aggregated_B':>13} {'ratio':>10}")
        print(f"{row['n_players']:>8} {row['naive_bytes']:>10} {row['aggregated_bytes']:>13} "
              f"{'1/' + format(1 / row['ratio'], '.1f'):>10}")
    else:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def sortition_stats(n: int, rounds: int, q_numerator: int = 7, seed: int = 0) -> dict:
    keys = keygen_group(seed, n)
    q = leadership_probability(n, q_numerator)
    state = SortitionState(default_genesis_q(seed))
    empty = sum(1 for r in range(1, rounds + 1) if not has_potential_leader(keys, r, state, q))
    expected = float((1 - q) ** n)
    return {"n_players": n, "rounds": rounds, "q": float(q), "no_leader_rounds": empty,
            "no_leader_fraction": empty / rounds, "expected_fraction": expected,
            "binomial_sigma": (expected * (1 - expected) / rounds) ** 0.5}


def cmd_sortition_stats(args) -> int:
    if args.n <= 0 or args.rounds <= 0:
        print("error: --n and --rounds must be positive", file=sys.stderr)
        return EXIT_ERROR
    row = sortition_stats(args.n, args.rounds, args.q_numerator, args.seed)
    if args.format == "text":
        print(f"N={row['n_players']} q={row['q']:.4f} rounds={row['rounds']} "
              f"no-leader={row['no_leader_fraction']:.5f} expected={row['expected_fraction']:.5f}")
    else:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gosig", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario for one or more seeds")
    run.add_argument("--scenario", required=True, help="YAML or JSON scenario file")
    g = run.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, help="single seed (default: the scenario's)")
    g.add_argument("--seeds", help="seed list: 1..100 or 1,2,3")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--monitors", help=f"comma list from {','.join(MONITORS)} (default all)")
    run.add_argument("--format", choices=["jsonl", "text", "both"], default="both")
    run.set_defaults(func=cmd_run)

    chk = sub.add_parser("check", help="replay monitors over a stored trace")
    chk.add_argument("trace")
    chk.add_argument("--monitors")
    chk.add_argument("--format", choices=["jsonl", "text"], default="jsonl")
    chk.set_defaults(func=cmd_check)

    sz = sub.add_parser("sigsize", help="aggregated vs naive signature footprint")
    sz.add_argument("n", type=int)
    sz.add_argument("sig_bits", type=int)
    sz.add_argument("counter_bits", type=int)
    sz.add_argument("--format", choices=["jsonl", "text"], default="text")
    sz.set_defaults(func=cmd_sigsize)

    st = sub.add_parser("sortition-stats", help="empirical fraction of rounds without a potential leader")
    st.add_argument("--n", type=int, default=100)
    st.add_argument("--rounds", type=int, default=100_000)
    st.add_argument("--q-numerator", type=int, default=7)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--format", choices=["jsonl", "text"], default="text")
    st.set_defaults(func=cmd_sortition_stats)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
