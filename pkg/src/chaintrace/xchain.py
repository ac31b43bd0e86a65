"""Cross-chain shift tracing.

Phase 1 locates the deposit for an advertised shift on the source chain,
optionally confirmed against an exchange oracle that also names the payout
transaction on the destination chain. On top of resolved shifts sit the
pattern detectors: pass-through, U-turn, round trip, trading bots and
shielded-pool interactions.
"""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .dsu import DisjointSet
from .errors import InputError, TraceError
from .evidence import LinkEvidence, LinkKind
from .ledger import Address, Ledger, LedgerTx, get_chain, to_units

log = logging.getLogger(__name__)

UTURN_WINDOW = 1800
UTURN_TOL = Fraction(1, 100)
XRT_TOL = Fraction(5, 1000)
BOT_MIN_SET = 15
BOT_SPAN = 300
BOT_TOL = Fraction(1, 100)


def as_fraction(x) -> Fraction:
    """Exact fraction from a float/str/int tolerance (0.01 -> 1/100, not the binary float)."""
    if isinstance(x, Fraction):
        return x
    return Fraction(str(x))


def within(value: int, ref: int, tol: Fraction) -> bool:
    """|value - ref| <= tol * ref, exactly."""
    return abs(value - ref) * tol.denominator <= tol.numerator * ref


# -- records ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ShiftRecord:
    id: str
    cur_in: str
    cur_out: str
    amt: int
    t: int

    def __post_init__(self):
        if self.cur_in == self.cur_out:
            raise InputError(f"shift {self.id}: curIn equals curOut ({self.cur_in})")
        if self.amt <= 0:
            raise InputError(f"shift {self.id}: amount must be positive")

    @property
    def pair(self) -> tuple[str, str]:
        return self.cur_in, self.cur_out


class Status(str, enum.Enum):
    COMPLETE = "COMPLETE"
    ERROR = "ERROR"
    NO_DEPOSITS = "NO_DEPOSITS"


@dataclass(frozen=True)
class ShiftStatus:
    status: Status
    address: Address
    withdraw: Optional[Address] = None
    in_coin: int = 0
    in_type: str = ""
    out_coin: int = 0
    out_type: str = ""
    tx: Optional[str] = None
    error: Optional[str] = None
    ts: Optional[int] = None  # when the oracle reports one; used by the timing check

    def __post_init__(self):
        object.__setattr__(self, "status", Status(self.status))
        if self.status is Status.COMPLETE and (not self.tx or self.withdraw is None):
            raise InputError(f"COMPLETE status for {self.address} lacks tx or withdraw address")


DEFAULT_WINDOWS: dict[str, tuple[int, int]] = {
    "BTC": (0, 1), "BCH": (9, 4), "DASH": (5, 5), "DOGE": (1, 4),
    "ETH": (5, 0), "ETC": (5, 0), "LTC": (1, 2), "ZEC": (1, 3),
}


@dataclass(frozen=True)
class WindowParams:
    """Per-chain (blocks before, blocks after) the anchor block."""

    windows: Mapping[str, tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_WINDOWS))

    def __post_init__(self):
        for sym, (b, a) in self.windows.items():
            if not (0 <= b <= 30 and 0 <= a <= 30):
                raise InputError(f"window for {sym} out of range: {(b, a)}")

    def __getitem__(self, symbol: str) -> tuple[int, int]:
        try:
            return self.windows[symbol]
        except KeyError:
            raise TraceError(f"no window parameters for {symbol}", "NO_WINDOW") from None

    def override(self, delta_b: int | None = None, delta_a: int | None = None,
                 chains: Iterable[str] | None = None) -> "WindowParams":
        new = dict(self.windows)
        for sym in (chains if chains is not None else list(new)):
            b, a = new.get(sym, (0, 0))
            new[sym] = (b if delta_b is None else delta_b, a if delta_a is None else delta_a)
        return WindowParams(new)


# -- oracles ---------------------------------------------------------------------------

class ShiftOracle(Protocol):
    def query(self, addr: Address) -> Optional[ShiftStatus]: ...


class DictOracle:
    """Oracle answering from an in-memory table keyed by deposit address."""

    def __init__(self, table: Mapping[Address, ShiftStatus] | Iterable[ShiftStatus] = ()):
        if isinstance(table, Mapping):
            self._t = dict(table)
        else:
            self._t = {s.address: s for s in table}
        self.queries = 0

    def query(self, addr: Address) -> Optional[ShiftStatus]:
        self.queries += 1
        return self._t.get(addr)

    def __len__(self) -> int:
        return len(self._t)

    def records(self) -> list[ShiftStatus]:
        return list(self._t.values())


ORACLE_COLUMNS = ["addr_s", "status", "withdraw", "in_coin", "in_type", "out_coin", "out_type", "out_txid"]


def load_oracle(path: str | Path) -> DictOracle:
    """Fixture CSV: addr_s,status,withdraw,in_coin,in_type,out_coin,out_type,out_txid[,ts].

    Addresses are ``CHAIN:value``; coin amounts are decimal strings in the
    named chain's units.
    """
    table: dict[Address, ShiftStatus] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ORACLE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: oracle file missing columns {sorted(missing)}", "MALFORMED_RECORD")
        for n, row in enumerate(reader, 2):
            try:
                addr = Address.parse(row["addr_s"])
                in_type, out_type = row["in_type"], row["out_type"]
                st = ShiftStatus(
                    status=Status(row["status"]),
                    address=addr,
                    withdraw=Address.parse(row["withdraw"]) if row["withdraw"] else None,
                    in_coin=get_chain(in_type).to_units(row["in_coin"]) if row["in_coin"] else 0,
                    in_type=in_type,
                    out_coin=get_chain(out_type).to_units(row["out_coin"]) if row["out_coin"] else 0,
                    out_type=out_type,
                    tx=row["out_txid"] or None,
                    ts=int(row["ts"]) if row.get("ts") else None,
                )
            except ValueError as exc:
                raise InputError(f"{path}:{n}: {exc}", "MALFORMED_RECORD") from None
            table[addr] = st
    return DictOracle(table)


def save_oracle(oracle: DictOracle, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ORACLE_COLUMNS + ["ts"])
        for s in sorted(oracle.records(), key=lambda s: s.address):
            w.writerow([
                str(s.address), s.status.value, str(s.withdraw) if s.withdraw else "",
                get_chain(s.in_type).format_units(s.in_coin) if s.in_type else "", s.in_type,
                get_chain(s.out_type).format_units(s.out_coin) if s.out_type else "", s.out_type,
                s.tx or "", "" if s.ts is None else s.ts,
            ])


def load_shifts(path: str | Path) -> list[ShiftRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "cur_in", "cur_out", "amt", "ts"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: shift file missing columns {sorted(missing)}", "MALFORMED_RECORD")
        for n, row in enumerate(reader, 2):
            try:
                out.append(ShiftRecord(row["id"], row["cur_in"], row["cur_out"],
                                       get_chain(row["cur_in"]).to_units(row["amt"]), int(row["ts"])))
            except ValueError as exc:
                raise InputError(f"{path}:{n}: {exc}", "MALFORMED_RECORD") from None
    return out


def save_shifts(shifts: Iterable[ShiftRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cur_in", "cur_out", "amt", "ts"])
        for s in shifts:
            w.writerow([s.id, s.cur_in, s.cur_out, get_chain(s.cur_in).format_units(s.amt), s.t])


# -- phase 1 ----------------------------------------------------------------------------------

class HitClass(str, enum.Enum):
    ZERO_HITS = "ZERO_HITS"
    SINGLE_HIT = "SINGLE_HIT"
    MULTI_HIT = "MULTI_HIT"


@dataclass(frozen=True)
class Candidate:
    tx: LedgerTx
    out_idx: int  # -1 for an account transfer

    @property
    def address(self) -> Address:
        tx = self.tx
        addr = tx.xfer.to if self.out_idx < 0 else tx.vout[self.out_idx].addr
        return Address(tx.chain.symbol, addr)

    @property
    def value(self) -> int:
        return self.tx.xfer.value if self.out_idx < 0 else self.tx.vout[self.out_idx].value


@dataclass(frozen=True)
class Phase1Result:
    shift: ShiftRecord
    anchor: int
    lo: int
    hi: int
    candidates: tuple[Candidate, ...]

    @property
    def outcome(self) -> HitClass:
        n = len(self.candidates)
        return HitClass.ZERO_HITS if n == 0 else HitClass.SINGLE_HIT if n == 1 else HitClass.MULTI_HIT


def _ledger_for(ledgers: Mapping[str, Ledger] | Ledger | None, symbol: str) -> Ledger:
    if isinstance(ledgers, Ledger):
        if ledgers.chain.symbol != symbol:
            raise TraceError(f"need the {symbol} ledger, got {ledgers.chain.symbol}", "CHAIN_MISSING")
        return ledgers
    led = ledgers.get(symbol) if ledgers is not None else None
    if led is None:
        raise TraceError(f"no ledger loaded for {symbol}", "CHAIN_MISSING")
    return led


def phase1_basic(shift: ShiftRecord, ledgers: Mapping[str, Ledger] | Ledger,
                 w: WindowParams = WindowParams()) -> Phase1Result:
    """Outputs of exactly ``shift.amt`` in blocks around the one closest to ``shift.t``."""
    ledger = _ledger_for(ledgers, shift.cur_in)
    before, after = w[shift.cur_in]
    anchor = ledger.closest_block(shift.t)
    lo, hi = anchor - before, anchor + after
    cands = []
    for pos, k in ledger.outputs_by_value.get(shift.amt, ()):
        tx = ledger[pos]
        if lo <= tx.height <= hi:
            cands.append(Candidate(tx, k))
    return Phase1Result(shift, anchor, lo, hi, tuple(cands))


@dataclass(frozen=True)
class ResolvedShift:
    shift: ShiftRecord
    deposit: LedgerTx
    out_idx: int
    status: ShiftStatus

    @property
    def deposit_address(self) -> Address:
        return Candidate(self.deposit, self.out_idx).address

    @property
    def input_addresses(self) -> tuple[Address, ...]:
        sym = self.deposit.chain.symbol
        return tuple(Address(sym, a) for a in self.deposit.input_addresses())

    @property
    def payout_txid(self) -> str:
        return self.status.tx  # type: ignore[return-value]

    @property
    def withdraw(self) -> Address:
        return self.status.withdraw  # type: ignore[return-value]

    @property
    def out_coin(self) -> int:
        return self.status.out_coin


def _confirms(shift: ShiftRecord, cand: Candidate, st: Optional[ShiftStatus],
              p1: Phase1Result, ledger: Ledger | None) -> bool:
    if st is None or st.status is not Status.COMPLETE:
        return False
    if (st.in_type, st.out_type) != shift.pair:
        return False
    if st.in_coin != shift.amt or cand.value != shift.amt:
        return False
    if st.withdraw is None or st.withdraw.chain != shift.cur_out:
        return False
    if st.ts is not None and ledger is not None:
        if not p1.lo <= ledger.closest_block(st.ts) <= p1.hi:
            return False
    return True


def phase1_augmented(shift: ShiftRecord, p1: Phase1Result, oracle: ShiftOracle,
                     ledger: Ledger | None = None) -> Optional[ResolvedShift]:
    """Keep the single candidate the oracle confirms on pair, amount and timing.

    Raises ``TraceError(AMBIGUOUS)`` when more than one candidate is confirmed.
    """
    hits = []
    for cand in p1.candidates:
        st = oracle.query(cand.address)
        if _confirms(shift, cand, st, p1, ledger):
            hits.append(ResolvedShift(shift, cand.tx, cand.out_idx, st))
    if len(hits) > 1:
        raise TraceError(f"shift {shift.id}: {len(hits)} candidates confirmed", "AMBIGUOUS")
    return hits[0] if hits else None


@dataclass
class TraceRun:
    basic: list[Phase1Result]
    resolved: list[ResolvedShift]
    ambiguous: list[str]
    skipped: list[str]

    def outcome_counts(self) -> Counter:
        return Counter(r.outcome for r in self.basic)

    def summary(self) -> dict:
        n = len(self.basic) + len(self.skipped)
        return {
            "shifts": n,
            "hit_classes": {k.value: v for k, v in sorted(self.outcome_counts().items())},
            "resolved": len(self.resolved),
            "ambiguous": len(self.ambiguous),
            "skipped_missing_chain": len(self.skipped),
        }


def trace_shifts(shifts: Iterable[ShiftRecord], ledgers: Mapping[str, Ledger], oracle: ShiftOracle,
                 w: WindowParams = WindowParams()) -> TraceRun:
    """Run both phase-1 steps over a stream; shifts on unloaded chains are skipped."""
    basic, resolved, amb, skipped = [], [], [], []
    for s in shifts:
        if s.cur_in not in ledgers:
            skipped.append(s.id)
            continue
        p1 = phase1_basic(s, ledgers, w)
        basic.append(p1)
        try:
            r = phase1_augmented(s, p1, oracle, ledgers[s.cur_in])
        except TraceError as exc:
            if exc.code != "AMBIGUOUS":
                raise
            amb.append(s.id)
            continue
        if r is not None:
            resolved.append(r)
    return TraceRun(basic, resolved, amb, skipped)


# -- phase 2 fallback -------------------------------------------------------------------------

def expected_payout(shift: ShiftRecord, rate: Fraction, fee: int) -> Fraction:
    """amt * rate - fee, rescaled into curOut units."""
    d_in = get_chain(shift.cur_in).decimals
    d_out = get_chain(shift.cur_out).decimals
    return Fraction(shift.amt) * as_fraction(rate) * Fraction(10) ** (d_out - d_in) - fee


def phase2_estimate(shift: ShiftRecord, ledgers: Mapping[str, Ledger] | Ledger, rate, fee: int,
                    tol=Fraction(1, 100), w: WindowParams = WindowParams()) -> list[Candidate]:
    """Payout candidates on curOut without the oracle: value within ``tol`` of
    the rate-implied amount, in the curOut window around ``shift.t``."""
    ledger = _ledger_for(ledgers, shift.cur_out)
    tol = as_fraction(tol)
    exp = expected_payout(shift, rate, fee)
    before, after = w[shift.cur_out]
    anchor = ledger.closest_block(shift.t)
    out = []
    for tx in ledger.txs_in_heights(anchor - before, anchor + after):
        if tx.xfer is not None:
            outs = [(-1, tx.xfer.value)]
        else:
            outs = list(enumerate(o.value for o in tx.vout))
        for k, v in outs:
            if abs(v - exp) <= tol * exp:
                out.append(Candidate(tx, k))
    return out


# -- pattern detectors --------------------------------------------------------------------------

def detect_pass_through(resolved: Iterable[ResolvedShift]) -> list[LinkEvidence]:
    return [
        LinkEvidence(
            LinkKind.PASS_THROUGH,
            src_txids=(r.deposit.txid,), src_addrs=r.input_addresses,
            dst_txids=(r.payout_txid,), dst_addrs=(r.withdraw,),
            value=r.shift.amt, unit=r.shift.cur_in, meta={"shift": r.shift.id},
        )
        for r in resolved
    ]


def _payout_outpoints(r: ResolvedShift, ledger: Ledger) -> list[tuple[str, int]]:
    tx = ledger.get(r.payout_txid)
    if tx is None:
        return []
    return [(tx.txid, k) for k, o in enumerate(tx.vout) if o.addr == r.withdraw.value]


def uturn_utxo(first: ResolvedShift, second: ResolvedShift, ledger: Ledger) -> bool:
    """Does the second shift's deposit spend the exact output the first shift paid out?"""
    if not ledger.chain.is_utxo:
        raise TraceError(f"UTXO tier needs a UTXO chain, {ledger.chain.symbol} is account-based",
                         "NOT_APPLICABLE")
    spent = {(i.src_txid, i.src_idx) for i in second.deposit.vin}
    return any(op in spent for op in _payout_outpoints(first, ledger))


def _by_time(resolved: Iterable[ResolvedShift]) -> list[ResolvedShift]:
    return sorted(resolved, key=lambda r: (r.shift.t, r.shift.id))


def _reverse_pairs(resolved: Iterable[ResolvedShift], window: int, tol: Fraction):
    """(first, second) with second = reverse direction, 0 <= dt <= window and
    second.amt within tol of first.out_coin."""
    rs = _by_time(resolved)
    by_pair: dict[tuple[str, str], list[ResolvedShift]] = defaultdict(list)
    for r in rs:
        by_pair[r.shift.pair].append(r)
    for r1 in rs:
        back = by_pair.get((r1.shift.cur_out, r1.shift.cur_in), ())
        t1 = r1.shift.t
        for r2 in back:
            dt = r2.shift.t - t1
            if dt < 0:
                continue
            if dt > window:
                break
            if r2 is r1 or r1.out_coin <= 0:
                continue
            if within(r2.shift.amt, r1.out_coin, tol):
                yield r1, r2


def detect_uturn(resolved: Iterable[ResolvedShift], ledgers: Mapping[str, Ledger] | None = None,
                 window: int = UTURN_WINDOW, tol=UTURN_TOL) -> list[LinkEvidence]:
    """One BASIC link per qualifying pair, plus ADDR and UTXO links for the
    tiers it also meets. UTXO is only tested on UTXO chains with a ledger."""
    tol = as_fraction(tol)
    params = {"window": window, "tol": tol}
    out = []
    for r1, r2 in _reverse_pairs(resolved, window, tol):
        base = dict(
            src_txids=(r1.payout_txid,), src_addrs=(r1.withdraw,),
            dst_txids=(r2.deposit.txid,), dst_addrs=r2.input_addresses,
            value=r2.shift.amt, unit=r2.shift.cur_in, params=params,
            meta={"first": r1.shift.id, "second": r2.shift.id},
        )
        out.append(LinkEvidence(LinkKind.UTURN_BASIC, **base))
        if r1.withdraw in r2.input_addresses:
            out.append(LinkEvidence(LinkKind.UTURN_ADDR, **base))
        mid = ledgers.get(r1.shift.cur_out) if ledgers else None
        if mid is not None and mid.chain.is_utxo and uturn_utxo(r1, r2, mid):
            out.append(LinkEvidence(LinkKind.UTURN_UTXO, **base))
    return out


def detect_round_trip(resolved: Iterable[ResolvedShift], window: int = UTURN_WINDOW,
                      tol=XRT_TOL) -> list[LinkEvidence]:
    """X -> Y followed by Y -> X: links the first sender to the final recipient on X."""
    tol = as_fraction(tol)
    params = {"window": window, "tol": tol}
    out = []
    for r1, r2 in _reverse_pairs(resolved, window, tol):
        same = r2.withdraw in r1.input_addresses
        out.append(LinkEvidence(
            LinkKind.XRT,
            src_txids=(r1.deposit.txid,), src_addrs=r1.input_addresses,
            dst_txids=(r2.payout_txid,), dst_addrs=(r2.withdraw,),
            value=r1.shift.amt, unit=r1.shift.cur_in, params=params,
            meta={"first": r1.shift.id, "second": r2.shift.id, "same_address": same},
        ))
    return out


@dataclass(frozen=True)
class BotCluster:
    key: tuple[str, ...]
    shifts: tuple[ShiftRecord, ...]

    @property
    def pairs(self) -> Counter:
        return Counter(s.pair for s in self.shifts)


def _group_key(s: ShiftRecord, group_by: str) -> tuple[str, ...]:
    if group_by == "pair":
        return s.pair
    if group_by == "cur_in":
        return (s.cur_in,)
    if group_by == "cur_out":
        return (s.cur_out,)
    raise InputError(f"unknown grouping {group_by!r}")


def bot_windows(group: Sequence[ShiftRecord], span: int, tol: Fraction) -> list[list[int]]:
    """For each anchor a (time-sorted group), indices b with t_a <= t_b <= t_a + span
    and value within tol of v_a."""
    out = []
    n = len(group)
    for i, a in enumerate(group):
        members = []
        j = i
        # walk back over equal timestamps, they fall inside the window too
        while j > 0 and group[j - 1].t == a.t:
            j -= 1
        while j < n and group[j].t <= a.t + span:
            if within(group[j].amt, a.amt, tol):
                members.append(j)
            j += 1
        out.append(members)
    return out


def detect_trading_bots(shifts: Iterable[ShiftRecord], min_set: int = BOT_MIN_SET, span: int = BOT_SPAN,
                        tol=BOT_TOL, group_by: str = "pair", odd_share=Fraction(1, 10)) -> list[BotCluster]:
    """Bursts of at least ``min_set`` similar-value shifts within ``span`` seconds.

    Every anchor shift defines a window of later shifts in its group whose
    value is within ``tol`` of its own; windows of size ``min_set`` or more
    qualify, and overlapping qualifying windows are merged. With a shared-leg
    grouping, pairs making up less than ``odd_share`` of a cluster are
    dropped as outliers and the cluster re-checked against ``min_set``.
    """
    tol, odd_share = as_fraction(tol), as_fraction(odd_share)
    groups: dict[tuple[str, ...], list[ShiftRecord]] = defaultdict(list)
    for s in shifts:
        groups[_group_key(s, group_by)].append(s)
    clusters = []
    for key in sorted(groups):
        g = sorted(groups[key], key=lambda s: (s.t, s.id))
        dsu: DisjointSet[int] = DisjointSet()
        for members in bot_windows(g, span, tol):
            if len(members) >= min_set:
                dsu.union_all(members)
        for idxs in dsu.groups():
            members = [g[i] for i in sorted(idxs)]
            if group_by != "pair":
                counts = Counter(s.pair for s in members)
                members = [s for s in members if counts[s.pair] >= odd_share * len(members)]
                if len(members) < min_set:
                    continue
            clusters.append(BotCluster(key, tuple(members)))
    clusters.sort(key=lambda c: (c.shifts[0].t, c.shifts[0].id))
    return clusters


def pool_shift_interactions(resolved: Iterable[ResolvedShift], zledger: Ledger) -> dict:
    """Three ways a shift touches the shielded pool.

    1. payout straight to a z-address;
    2. payout to a t-address whose output is next spent by a t-to-z;
    3. deposit paid directly out of the pool (a z-to-t).
    Shares of 1 and 2 are against all value received on the pool chain
    through shifts, share of 3 against all value sent from it.
    """
    if not zledger.chain.shielded:
        raise InputError(f"{zledger.chain.symbol} has no shielded pool", "NOT_SHIELDED")
    sym = zledger.chain.symbol
    rows = {k: {"count": 0, "value": 0} for k in (1, 2, 3)}
    received = sent = 0
    for r in resolved:
        if r.shift.cur_out == sym:
            received += r.out_coin
            if r.withdraw.shielded:
                rows[1]["count"] += 1
                rows[1]["value"] += r.out_coin
                continue
            payout = zledger.get(r.payout_txid)
            if payout is None:
                continue
            for txid, k in _payout_outpoints(r, zledger):
                nxt = zledger.spender_of(txid, k)
                if nxt is not None and nxt.is_deposit:
                    rows[2]["count"] += 1
                    rows[2]["value"] += payout.vout[k].value
                    break
        if r.shift.cur_in == sym:
            sent += r.shift.amt
            if r.deposit.is_withdrawal:
                rows[3]["count"] += 1
                rows[3]["value"] += r.shift.amt
    for k, row in rows.items():
        denom = sent if k == 3 else received
        row["share"] = Fraction(row["value"], denom) if denom else Fraction(0)
    return {"received": received, "sent": sent, "types": rows}


def parse_amount(text: str, symbol: str) -> int:
    return to_units(text, get_chain(symbol).decimals)
