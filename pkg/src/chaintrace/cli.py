"""chaintrace command line.

Every subcommand writes its outputs plus ``config.json`` (the full argument
set, tool version and input digests) into ``--out``. ``--from-config`` replays
a snapshot. Exit codes: 0 ok, 2 bad input or usage, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import orjson

from . import __version__
from .cluster import (
    TagCategory, TagMap, build_relation_graph, change_cluster, multi_input_cluster,
    propagate_tags,
)
from .errors import ChainTraceError, InputError, InvariantViolation
from .evidence import LinkKind, read_evidence, write_evidence
from .ledger import ZEC, Address, Ledger, class_counts, load_chain_dir
from .matrix import DEFAULT_GAS, FillPolicy, dump_report, load_scenario, new_world, profit_report, run_scenario, write_event_log
from .synth import GenParams, generate, load_world, score, write_world
from .xchain import (
    BOT_MIN_SET, BOT_SPAN, BOT_TOL, UTURN_TOL, UTURN_WINDOW, XRT_TOL, WindowParams, detect_pass_through,
    detect_round_trip, detect_trading_bots, detect_uturn, load_oracle, load_shifts, parse_amount,
    pool_shift_interactions, trace_shifts,
)
from . import zcash

log = logging.getLogger("chaintrace")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3


# -- output helpers --------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    if isinstance(x, Address):
        return str(x)
    raise TypeError(type(x).__name__)


def write_json(path: Path, payload: dict, schema: str) -> Path:
    doc = {"schema": f"chaintrace.{schema}/{SCHEMA_VERSION}", **payload}
    path.write_bytes(orjson.dumps(doc, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS
                                  | orjson.OPT_NON_STR_KEYS, default=_jsonable))
    return path


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


INPUT_FLAGS = ("chains", "shifts", "oracle", "tags", "scenario", "pred", "truth", "params", "run")


def write_config(out: Path, args: argparse.Namespace, argv: Sequence[str]) -> Path:
    inputs = {}
    for name in INPUT_FLAGS:
        p = getattr(args, name, None)
        if p:
            p = Path(p)
            inputs[name] = {"path": str(p), "sha256": _digest(p) if p.exists() else None}
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "from_config")}
    return write_json(out / "config.json", {
        "tool": "chaintrace", "version": __version__, "command": args.command,
        "argv": list(argv), "settings": settings, "inputs": inputs,
    }, "config")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ledgers(args) -> dict[str, Ledger]:
    if not args.chains:
        raise InputError("--chains DIR is required", "USAGE")
    ledgers = load_chain_dir(args.chains)
    if not ledgers:
        raise InputError(f"no <SYMBOL>.json/.jsonl pairs under {args.chains}", "MISSING_FILE")
    return ledgers


def _tags(args) -> TagMap:
    return TagMap.load_csv(args.tags) if getattr(args, "tags", None) else TagMap()


def _zec(ledgers: dict[str, Ledger]) -> Ledger:
    z = ledgers.get("ZEC")
    if z is None:
        raise InputError("ZEC ledger not found in --chains", "CHAIN_MISSING")
    return z


# -- subcommands -------------------------------------------------------------------------------

def cmd_ingest(args) -> dict:
    out = _out(args)
    ledgers = _ledgers(args)
    summary = {}
    for sym, led in sorted(ledgers.items()):
        row = {"txs": len(led), "blocks": len(led.heights),
               "first_height": led.heights[0] if len(led) else None,
               "last_height": led.heights[-1] if len(led) else None}
        if led.chain.shielded:
            row["classes"] = {c.value: n for c, n in sorted(class_counts(led).items())}
            row["pool"] = zcash.zcash_summary(led)
        summary[sym] = row
    write_json(out / "ingest.json", {"chains": summary}, "ingest")
    return summary


def cmd_cluster(args) -> dict:
    out = _out(args)
    ledgers = _ledgers(args)
    tags = _tags(args)
    txs = [tx for sym in sorted(ledgers) for tx in ledgers[sym]]
    clusters = multi_input_cluster(txs, include_outputs=args.include_outputs)
    n_multi = len(clusters)
    if args.change:
        excluded = [a for a, _ in tags.items()] if args.change_exclude_tagged else ()
        clusters = change_cluster(txs, clusters, excluded, tags)
    clusters.to_csv(out / "clusters.csv")
    ct = propagate_tags(clusters, tags)
    write_json(out / "cluster_tags.json", {"clusters": {
        str(cid): {"size": c.size, "dominant": c.dominant, "labels": dict(c.labels),
                   "coverage": float(c.coverage), "conflicts": list(c.conflicts)}
        for cid, c in ct.items()
    }}, "cluster_tags")
    summary = {
        "addresses": clusters.n_addresses, "clusters": len(clusters),
        "clusters_after_multi_input": n_multi, "largest": clusters.sizes[:10],
        "tagged_clusters": len(ct),
        "guard_violations": [
            {"txid": g.txid, "left": sorted(g.left), "right": sorted(g.right)} for g in clusters.guard_violations
        ],
    }
    write_json(out / "cluster_summary.json", summary, "cluster_summary")
    return summary


def cmd_zcash(args) -> dict:
    out = _out(args)
    z = _zec(_ledgers(args))
    tags = _tags(args)
    known = [a for a, t in tags.items() if t.category is TagCategory.FOUNDER]
    ftags, flinks = zcash.tag_founders(z, known, args.founder_withdrawal, args.founder_deposit)
    mtags, mlinks = zcash.tag_miners(z, tags, args.min_outputs)
    h5 = zcash.round_trip_unique(z, args.max_interval)
    links = flinks + mlinks + h5
    write_evidence(links, out / "evidence.jsonl")
    anon = zcash.anonymity_reduction(z, links)
    write_json(out / "anonymity.json", anon.to_json(), "anonymity")
    report = zcash.founder_deposit_report(z, known or None, args.founder_deposit, args.founder_withdrawal)
    write_json(out / "founders.json", report.to_json(), "founders")
    sweep = zcash.round_trip_sweep(z, range(1, args.sweep_max + 1))
    write_json(out / "h5_sweep.json", {"points": [
        {"interval": k, "links": n, "value": ZEC.format_units(v)} for k, n, v in sweep
    ]}, "h5_sweep")
    derived = TagMap()
    for src in (tags, ftags, mtags):
        derived.merge(src)
    derived.save_csv(out / "tags.csv")
    summary = {
        "founder_withdrawals": len(flinks), "miner_payouts": len(mlinks), "round_trips": len(h5),
        "linked_share": float(anon.linked_share), "pool": zcash.zcash_summary(z),
    }
    if args.tsb:
        clusters = multi_input_cluster(z)
        res = zcash.tsb_filter(z, clusters, exclude=derived, tx_tol=args.tsb_tx_tol,
                               cluster_tol=args.tsb_cluster_tol, max_history=args.tsb_max_history)
        write_evidence(res.evidence(clusters), out / "tsb.jsonl")
        write_json(out / "tsb.json", {"counts": {m: {ZEC.format_units(a): n for a, n in row.items()}
                                                 for m, row in res.counts().items()}}, "tsb")
        summary["tsb_flagged"] = len(res.all_flagged())
    write_json(out / "zcash_summary.json", summary, "zcash_summary")
    return summary


def cmd_trace(args) -> dict:
    out = _out(args)
    ledgers = _ledgers(args)
    if not args.shifts or not args.oracle:
        raise InputError("trace needs --shifts and --oracle", "USAGE")
    shifts = load_shifts(args.shifts)
    oracle = load_oracle(args.oracle)
    w = WindowParams()
    if args.delta_b is not None or args.delta_a is not None:
        w = w.override(args.delta_b, args.delta_a)
    run = trace_shifts(shifts, ledgers, oracle, w)
    pt = detect_pass_through(run.resolved)
    ut = detect_uturn(run.resolved, ledgers, args.uturn_window, args.uturn_tol)
    xrt = detect_round_trip(run.resolved, args.uturn_window, args.xrt_tol)
    write_evidence(pt + ut + xrt, out / "evidence.jsonl")
    bots = detect_trading_bots(shifts, args.bot_min, args.bot_span, args.bot_tol)
    write_json(out / "bots.json", {"clusters": [
        {"pair": "-".join(b.key), "size": len(b.shifts), "shifts": [s.id for s in b.shifts]} for b in bots
    ]}, "bots")
    graph = build_relation_graph(pt)
    graph.to_csv(out / "relation_graph.csv")
    summary = run.summary()
    summary.update({
        "pass_through": len(pt), "xrt": len(xrt), "bots": len(bots),
        "uturn": {k.value: sum(1 for l in ut if l.kind == k)
                  for k in (LinkKind.UTURN_BASIC, LinkKind.UTURN_ADDR, LinkKind.UTURN_UTXO)},
        "graph": {"edges": len(graph.edges()), "skipped_links": graph.skipped},
    })
    if "ZEC" in ledgers:
        inter = pool_shift_interactions(run.resolved, ledgers["ZEC"])
        summary["pool_interactions"] = {str(k): {"count": v["count"], "share": float(v["share"])}
                                        for k, v in inter["types"].items()}
    write_json(out / "trace_summary.json", summary, "trace_summary")
    return summary


def cmd_simulate(args) -> dict:
    out = _out(args)
    if not args.scenario:
        raise InputError("simulate needs --scenario", "USAGE")
    world = new_world(gas_fee=args.gas, policy=args.policy)
    applied = run_scenario(world, load_scenario(args.scenario), strict=not args.lenient)
    world.check_invariants()
    write_event_log(world, out / "events.csv")
    report = profit_report(world)
    report["run"] = applied
    report["state_hash"] = world.state_hash()
    dump_report({"schema": f"chaintrace.profit/{SCHEMA_VERSION}", **report}, out / "profit_report.json")
    return {k: v for k, v in report.items() if k != "nets"}


def _gen_params(args) -> GenParams:
    base = GenParams.from_json(json.loads(Path(args.params).read_text())) if args.params else GenParams()
    for name in ("n_entities", "n_shifts", "collision_rate", "uturn_rate", "noise_txs",
                 "founder_withdrawals", "miner_payouts", "round_trips", "bot_bursts"):
        v = getattr(args, name)
        if v is not None:
            setattr(base, name, v)
    if args.chain_list:
        base.chains = tuple(args.chain_list.split(","))
    return base


def cmd_generate(args) -> dict:
    out = _out(args)
    world = generate(_gen_params(args), args.seed)
    write_world(world, out / "world")
    summary = {"seed": world.seed, "chains": {c: len(l) for c, l in world.ledgers.items()},
               "shifts": len(world.shifts), "truth_links": len(world.truth)}
    write_json(out / "generate.json", summary, "generate")
    return summary


def cmd_score(args) -> dict:
    out = _out(args)
    if not args.pred or not args.truth:
        raise InputError("score needs --pred and --truth", "USAGE")
    pred = read_evidence(args.pred)
    truth_path = Path(args.truth)
    truth = load_world(truth_path).truth if truth_path.is_dir() else read_evidence(truth_path)
    kinds = [LinkKind(k) for k in args.kinds.split(",")] if args.kinds else None
    s = score(pred, truth, kinds)
    write_json(out / "metrics.json", s.to_json(), "metrics")
    return s.to_json()


def cmd_report(args) -> dict:
    """Collect every versioned JSON under --run into one report."""
    out = _out(args)
    run = Path(args.run or args.out)
    if not run.is_dir():
        raise InputError(f"{run} is not a directory", "MISSING_FILE")
    sections = {}
    for p in sorted(run.rglob("*.json")):
        if p.name in ("report.json", "world.json") or p.parent.name == "world" or p.suffix != ".json":
            continue
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{p}: {exc}", "MALFORMED_RECORD") from None
        if isinstance(doc, dict) and str(doc.get("schema", "")).startswith("chaintrace."):
            sections[p.relative_to(run).as_posix()] = doc
    write_json(out / "report.json", {"sections": sections}, "report")
    return {"sections": sorted(sections)}


# -- parser ----------------------------------------------------------------------------------

def _frac(text: str) -> Fraction:
    try:
        v = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _units(symbol: str) -> Callable[[str], int]:
    def conv(text: str) -> int:
        try:
            return parse_amount(text, symbol)
        except InputError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    conv.__name__ = f"{symbol} amount"
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chaintrace", description="Cross-chain and shielded-pool tracing toolkit.",
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--from-config", metavar="FILE", help="replay the argv stored in a config.json snapshot")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp, chains=True):
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=0, help="RNG seed")
        if chains:
            sp.add_argument("--chains", metavar="DIR", help="directory of <SYM>.json manifests and <SYM>.jsonl ledgers")
        return sp

    fmt = argparse.ArgumentDefaultsHelpFormatter
    sp = common(sub.add_parser("ingest", help="validate ledgers and summarise them", formatter_class=fmt))
    sp.set_defaults(func=cmd_ingest)

    sp = common(sub.add_parser("cluster", help="multi-input (and change) clustering", formatter_class=fmt))
    sp.add_argument("--tags", metavar="FILE", help="tag CSV (address,chain,label,category)")
    sp.add_argument("--change", action="store_true", help="also apply the shielding-change heuristic")
    sp.add_argument("--change-exclude-tagged", action="store_true",
                    help="never treat a tagged address as change")
    sp.add_argument("--include-outputs", action="store_true", help="register output-only addresses too")
    sp.set_defaults(func=cmd_cluster)

    sp = common(sub.add_parser("zcash-analyze", help="founder/miner/round-trip heuristics and TSB filter",
                               formatter_class=fmt))
    sp.add_argument("--tags", metavar="FILE", help="tag CSV with POOL and FOUNDER entries")
    sp.add_argument("--founder-withdrawal", type=_units("ZEC"), default=zcash.FOUNDER_WITHDRAWAL,
                    help="exact founder withdrawal (ZEC)")
    sp.add_argument("--founder-deposit", type=_units("ZEC"), default=zcash.FOUNDER_DEPOSIT,
                    help="founder deposit value (ZEC)")
    sp.add_argument("--min-outputs", type=int, default=zcash.MINER_MIN_OUTPUTS,
                    help="a miner payout has more outputs than this")
    sp.add_argument("--max-interval", type=int, default=10, help="round-trip block interval")
    sp.add_argument("--sweep-max", type=int, default=100, help="largest interval in the round-trip sweep")
    sp.add_argument("--tsb", action="store_true", help="run the suspect-cluster filter")
    sp.add_argument("--tsb-tx-tol", type=_units("ZEC"), default=zcash.TSB_TX_TOL,
                    help="per-deposit tolerance around round values (zatoshi)")
    sp.add_argument("--tsb-cluster-tol", type=_units("ZEC"), default=zcash.TSB_CLUSTER_TOL,
                    help="per cluster-month tolerance (zatoshi)")
    sp.add_argument("--tsb-max-history", type=int, default=zcash.TSB_MAX_HISTORY,
                    help="clusters with more transactions are skipped")
    sp.set_defaults(func=cmd_zcash)

    sp = common(sub.add_parser("trace", help="phase-1 shift tracing and pattern detection", formatter_class=fmt))
    sp.add_argument("--shifts", metavar="FILE", help="shift CSV (id,cur_in,cur_out,amt,ts)")
    sp.add_argument("--oracle", metavar="FILE", help="oracle CSV")
    sp.add_argument("--delta-b", type=int, help="blocks before the anchor for all chains; %(default)s uses the per-chain table")
    sp.add_argument("--delta-a", type=int, help="blocks after the anchor for all chains; %(default)s uses the per-chain table")
    sp.add_argument("--uturn-window", type=int, default=UTURN_WINDOW, metavar="SECS",
                    help="max seconds between the two legs of a U-turn")
    sp.add_argument("--uturn-tol", type=_frac, default=UTURN_TOL, metavar="F", help="relative value tolerance for U-turns")
    sp.add_argument("--xrt-tol", type=_frac, default=XRT_TOL, metavar="F", help="relative value tolerance for round trips")
    sp.add_argument("--bot-min", type=int, default=BOT_MIN_SET, metavar="N", help="smallest bot cluster")
    sp.add_argument("--bot-span", type=int, default=BOT_SPAN, metavar="SECS", help="time span of a bot burst")
    sp.add_argument("--bot-tol", type=_frac, default=BOT_TOL, metavar="F", help="relative amount spread within a burst")
    sp.set_defaults(func=cmd_trace)

    sp = common(sub.add_parser("simulate", help="run a matrix-contract scenario", formatter_class=fmt), chains=False)
    sp.add_argument("--scenario", metavar="FILE", help="JSONL of register/buy calls")
    sp.add_argument("--gas", type=_units("ETH"), default=DEFAULT_GAS, metavar="AMT", help="gas per call (ETH)")
    sp.add_argument("--policy", choices=[x.value for x in FillPolicy], default=FillPolicy.PAY_THEN_BLOCK.value,
                    help="what happens to the payment that fills a slot")
    sp.add_argument("--lenient", action="store_true", help="count rejected calls instead of failing")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("generate", help="write a synthetic world bundle", formatter_class=fmt), chains=False)
    sp.add_argument("--params", metavar="FILE", help="GenParams JSON")
    sp.add_argument("--chain-list", metavar="SYMS", help="comma-separated chains")
    for name, typ in (("n_entities", int), ("n_shifts", int), ("collision_rate", float), ("uturn_rate", float),
                      ("noise_txs", int), ("founder_withdrawals", int), ("miner_payouts", int),
                      ("round_trips", int), ("bot_bursts", int)):
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ,
                        help="override the GenParams field" + (" (per chain)" if name == "noise_txs" else ""))
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("score", help="precision/recall of evidence against ground truth",
                               formatter_class=fmt), chains=False)
    sp.add_argument("--pred", metavar="FILE", help="evidence JSONL")
    sp.add_argument("--truth", metavar="PATH", help="world bundle directory or truth JSONL")
    sp.add_argument("--kinds", help="comma-separated link kinds to compare")
    sp.set_defaults(func=cmd_score)

    sp = common(sub.add_parser("report", help="merge a run directory's JSON outputs", formatter_class=fmt),
                chains=False)
    sp.add_argument("--run", metavar="DIR", help="directory to collect (default: --out)")
    sp.set_defaults(func=cmd_report)
    return p


def _setup_logging() -> None:
    level = os.environ.get("CHAINTRACE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.from_config:
        try:
            snap = json.loads(Path(args.from_config).read_text())
            argv = snap["argv"]
        except (OSError, ValueError, KeyError) as exc:
            print(f"chaintrace: cannot replay {args.from_config}: {exc}", file=sys.stderr)
            return EXIT_INPUT
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INPUT
    try:
        result = args.func(args)
        write_config(Path(args.out), args, argv)
    except InvariantViolation as exc:
        print(f"chaintrace: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, OSError) as exc:
        print(f"chaintrace: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ChainTraceError as exc:
        print(f"chaintrace: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
