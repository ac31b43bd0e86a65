"""Shielded-pool heuristics: founder/miner attribution, unique-value round
trips, anonymity-set accounting and the suspect-cluster filter."""

from __future__ import annotations

import enum
import logging
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from fractions import Fraction
from typing import Iterable, Optional

from .cluster import ClusterSet, TagCategory, TagMap
from .errors import InputError
from .evidence import LinkEvidence, LinkKind
from .ledger import ZEC, Address, Ledger, LedgerTx, class_counts, pool_balance_series

log = logging.getLogger(__name__)

FOUNDER_WITHDRAWAL = ZEC.coins("250.0001")
FOUNDER_DEPOSIT = ZEC.coins("249.9999")
FOUNDER_ADDRESS_CAP = ZEC.coins("44272.5")
FOUNDER_GAP = (6, 10)
MINER_MIN_OUTPUTS = 100
TSB_AMOUNTS = tuple(ZEC.coins(a) for a in (100, 200, 400, 500))
TSB_TX_TOL = ZEC.coins(5)
TSB_CLUSTER_TOL = ZEC.coins(1)
TSB_MAX_HISTORY = 250
TSB_SPLIT = date(2017, 5, 16)


class Direction(str, enum.Enum):
    DEPOSIT = "DEPOSIT"
    WITHDRAWAL = "WITHDRAWAL"


class Attribution(str, enum.Enum):
    FOUNDER = "FOUNDER"
    MINER = "MINER"
    OTHER = "OTHER"
    UNKNOWN = "UNKNOWN"


# first entry wins when a withdrawal is hit by several heuristics
_PRIORITY = (
    (LinkKind.FOUNDER_VALUE, Attribution.FOUNDER),
    (LinkKind.MINER_PAYOUT, Attribution.MINER),
    (LinkKind.ROUND_TRIP_UNIQUE, Attribution.OTHER),
)


@dataclass(frozen=True)
class PoolEvent:
    txid: str
    height: int
    timestamp: int
    direction: Direction
    value: int
    actors: tuple[Address, ...]
    attribution: Attribution = Attribution.UNKNOWN


def withdrawn_value(tx: LedgerTx) -> int:
    return sum(z.value for z in tx.zout)


def _zin_addrs(tx: LedgerTx) -> tuple[Address, ...]:
    sym = tx.chain.symbol
    return tuple(dict.fromkeys(Address(sym, z.addr) for z in tx.zin))


def _zout_addrs(tx: LedgerTx) -> tuple[Address, ...]:
    sym = tx.chain.symbol
    return tuple(dict.fromkeys(Address(sym, z.addr) for z in tx.zout))


def _require_shielded(ledger: Ledger) -> None:
    if not ledger.chain.shielded:
        raise InputError(f"{ledger.chain.symbol} ledger has no shielded pool", "NOT_SHIELDED")


def pool_events(ledger: Ledger, links: Iterable[LinkEvidence] = ()) -> list[PoolEvent]:
    """Deposits (t-to-z) and withdrawals (z-to-t), with attribution from ``links``."""
    _require_shielded(ledger)
    attr = _withdrawal_attribution(links)
    out = []
    for tx in ledger:
        if tx.is_deposit:
            out.append(PoolEvent(tx.txid, tx.height, tx.timestamp, Direction.DEPOSIT,
                                 tx.pool_in, _zin_addrs(tx)))
        elif tx.is_withdrawal:
            out.append(PoolEvent(tx.txid, tx.height, tx.timestamp, Direction.WITHDRAWAL,
                                 withdrawn_value(tx), _zout_addrs(tx),
                                 attr.get(tx.txid, Attribution.UNKNOWN)))
    return out


# -- founders ---------------------------------------------------------------------------

def tag_founders(
    ledger: Ledger,
    known: Iterable[Address] = (),
    withdrawal_value: int = FOUNDER_WITHDRAWAL,
    deposit_value: int = FOUNDER_DEPOSIT,
) -> tuple[TagMap, list[LinkEvidence]]:
    """Every z-to-t withdrawing exactly ``withdrawal_value`` is a founder payout.

    ``deposit_value`` is recorded in the link params only; the deposit side
    is a diagnostic, see :func:`founder_deposit_report`.
    """
    _require_shielded(ledger)
    tags = TagMap()
    for a in known:
        tags.add(a, "Founders", TagCategory.FOUNDER)
    params = {"withdrawal_value": withdrawal_value, "deposit_value": deposit_value}
    links = []
    for tx in ledger:
        if not tx.is_withdrawal or withdrawn_value(tx) != withdrawal_value:
            continue
        dst = _zout_addrs(tx)
        for a in dst:
            tags.add(a, "Founders", TagCategory.FOUNDER)
        links.append(LinkEvidence(LinkKind.FOUNDER_VALUE, dst_txids=(tx.txid,), dst_addrs=dst,
                                  value=withdrawal_value, unit=ledger.chain.symbol, params=params))
    log.info("founder heuristic: %d withdrawals", len(links))
    return tags, links


@dataclass
class FounderDepositReport:
    deposit_value: int
    cap: int
    per_address: dict[Address, dict] = field(default_factory=dict)
    total_deposits: int = 0
    exact_deposits: int = 0
    gaps_in_range: int = 0
    gaps_total: int = 0
    withdrawal_gaps_in_range: int = 0
    withdrawal_gaps_total: int = 0

    @property
    def gap_fraction(self) -> Optional[Fraction]:
        return Fraction(self.gaps_in_range, self.gaps_total) if self.gaps_total else None

    @property
    def cap_respected(self) -> bool:
        return all(row["received"] <= self.cap for row in self.per_address.values())

    def to_json(self) -> dict:
        return {
            "deposit_value": str(self.deposit_value),
            "cap": str(self.cap),
            "total_deposits": self.total_deposits,
            "exact_deposits": self.exact_deposits,
            "gap_fraction": None if self.gap_fraction is None else float(self.gap_fraction),
            "withdrawal_gap_fraction": (
                self.withdrawal_gaps_in_range / self.withdrawal_gaps_total
                if self.withdrawal_gaps_total else None
            ),
            "cap_respected": self.cap_respected,
            "addresses": {
                str(a): {"deposits": row["deposits"], "exact": row["exact"],
                         "deposited": str(row["deposited"]), "received": str(row["received"])}
                for a, row in sorted(self.per_address.items())
            },
        }


def founder_deposit_report(
    ledger: Ledger,
    known: Iterable[Address] | None = None,
    deposit_value: int = FOUNDER_DEPOSIT,
    withdrawal_value: int = FOUNDER_WITHDRAWAL,
    cap: int = FOUNDER_ADDRESS_CAP,
    gap: tuple[int, int] = FOUNDER_GAP,
) -> FounderDepositReport:
    """Deposit-side founder diagnostics.

    Per founder address: deposit count, exact-``deposit_value`` count,
    deposited total, and coinbase value received (checked against ``cap``).
    Also the share of consecutive exact deposits, and of consecutive
    ``withdrawal_value`` withdrawals, spaced ``gap`` blocks apart.
    Without ``known``, founder addresses are those making exact deposits.
    """
    _require_shielded(ledger)
    sym = ledger.chain.symbol
    if known is None:
        known_set = {a for tx in ledger if tx.is_deposit and tx.pool_in == deposit_value
                     for a in _zin_addrs(tx)}
    else:
        known_set = set(known)
    rep = FounderDepositReport(deposit_value, cap)
    rows = rep.per_address
    for a in known_set:
        rows[a] = {"deposits": 0, "exact": 0, "deposited": 0, "received": 0}
    lo, hi = gap
    last_exact = None
    last_wd = None
    for tx in ledger:
        if tx.coinbase:
            for o in tx.vout:
                a = Address(sym, o.addr)
                if a in rows:
                    rows[a]["received"] += o.value
        elif tx.is_deposit:
            addrs = [a for a in _zin_addrs(tx) if a in rows]
            if not addrs:
                continue
            rep.total_deposits += 1
            exact = tx.pool_in == deposit_value
            for a in addrs:
                rows[a]["deposits"] += 1
                rows[a]["deposited"] += sum(z.value for z in tx.zin if z.addr == a.value)
                rows[a]["exact"] += exact
            if exact:
                rep.exact_deposits += 1
                if last_exact is not None:
                    rep.gaps_total += 1
                    rep.gaps_in_range += lo <= tx.height - last_exact <= hi
                last_exact = tx.height
        elif tx.is_withdrawal and withdrawn_value(tx) == withdrawal_value:
            if last_wd is not None:
                rep.withdrawal_gaps_total += 1
                rep.withdrawal_gaps_in_range += lo <= tx.height - last_wd <= hi
            last_wd = tx.height
    return rep


# -- miners -----------------------------------------------------------------------------------

def tag_miners(
    ledger: Ledger, pools: TagMap, min_outputs: int = MINER_MIN_OUTPUTS,
) -> tuple[TagMap, list[LinkEvidence]]:
    """A z-to-t paying more than ``min_outputs`` distinct addresses, one of them
    a tagged mining pool, is a pool payout; the other recipients are miners."""
    _require_shielded(ledger)
    pool_addrs = pools.with_category(TagCategory.POOL)
    tags = TagMap()
    links = []
    for tx in ledger:
        if not tx.is_withdrawal:
            continue
        dst = _zout_addrs(tx)
        if len(dst) <= min_outputs:
            continue
        hit = [a for a in dst if a in pool_addrs]
        if not hit:
            continue
        for a in dst:
            if a not in pool_addrs:
                tags.add(a, "Miner", TagCategory.MINER)
        links.append(LinkEvidence(
            LinkKind.MINER_PAYOUT, src_addrs=tuple(hit), dst_txids=(tx.txid,), dst_addrs=dst,
            value=withdrawn_value(tx), unit=ledger.chain.symbol,
            params={"min_outputs": min_outputs},
            meta={"pool": pools.get(hit[0]).label},
        ))
    log.info("miner heuristic: %d payouts, %d miner addresses", len(links), len(tags))
    return tags, links


# -- unique-value round trips --------------------------------------------------------------

def _unique_pairs(ledger: Ledger) -> list[tuple[LedgerTx, LedgerTx, int]]:
    """(deposit, withdrawal, height gap) for every value seen exactly once on each side,
    with the withdrawal later in the ledger."""
    deps: dict[int, list[int]] = defaultdict(list)
    wds: dict[int, list[int]] = defaultdict(list)
    for i, tx in enumerate(ledger):
        if tx.is_deposit:
            deps[tx.pool_in].append(i)
        elif tx.is_withdrawal:
            wds[withdrawn_value(tx)].append(i)
    out = []
    for v, di in deps.items():
        wi = wds.get(v)
        if len(di) != 1 or wi is None or len(wi) != 1:
            continue
        d, w = ledger[di[0]], ledger[wi[0]]
        if wi[0] > di[0]:
            out.append((d, w, w.height - d.height))
    out.sort(key=lambda p: ledger.position(p[0].txid))
    return out


def round_trip_unique(ledger: Ledger, max_interval: int) -> list[LinkEvidence]:
    """Link a deposit and a withdrawal of the same value when that value occurs
    exactly once on each side and the withdrawal follows within ``max_interval`` blocks."""
    _require_shielded(ledger)
    if max_interval < 0:
        raise InputError("max_interval must be >= 0")
    sym = ledger.chain.symbol
    return [
        LinkEvidence(
            LinkKind.ROUND_TRIP_UNIQUE,
            src_txids=(d.txid,), src_addrs=_zin_addrs(d),
            dst_txids=(w.txid,), dst_addrs=_zout_addrs(w),
            value=d.pool_in, unit=sym, params={"max_interval": max_interval},
            meta={"gap": gap},
        )
        for d, w, gap in _unique_pairs(ledger)
        if gap <= max_interval
    ]


def round_trip_sweep(ledger: Ledger, intervals: Iterable[int] = range(1, 101)) -> list[tuple[int, int, int]]:
    """(interval, links, linked value) for each interval, from a single pairing pass."""
    _require_shielded(ledger)
    pairs = sorted((gap, d.pool_in) for d, _, gap in _unique_pairs(ledger))
    gaps = [g for g, _ in pairs]
    cum = [0]
    for _, v in pairs:
        cum.append(cum[-1] + v)
    out = []
    for k in intervals:
        n = bisect_right(gaps, k)
        out.append((k, n, cum[n]))
    return out


# -- anonymity set accounting ------------------------------------------------------------------

def _withdrawal_attribution(links: Iterable[LinkEvidence]) -> dict[str, Attribution]:
    hits: dict[str, set] = defaultdict(set)
    for link in links:
        for t in link.dst_txids:
            hits[t].add(LinkKind(link.kind))
    out = {}
    for txid, kinds in hits.items():
        for kind, cls in _PRIORITY:
            if kind in kinds:
                out[txid] = cls
                break
    return out


@dataclass
class AnonymityReport:
    total_count: int
    total_value: int
    classes: dict[Attribution, dict]
    h5_overlap: dict

    def share(self, cls: Attribution) -> Fraction:
        return self.classes[cls]["share"]

    @property
    def linked_share(self) -> Fraction:
        return sum((self.classes[c]["share"] for c in (Attribution.FOUNDER, Attribution.MINER,
                                                         Attribution.OTHER)), Fraction(0))

    def to_json(self) -> dict:
        return {
            "total": {"count": self.total_count, "value": str(self.total_value)},
            "linked_share": float(self.linked_share),
            "classes": {
                c.value: {"count": row["count"], "value": str(row["value"]),
                          "share": float(row["share"]), "count_share": float(row["count_share"])}
                for c, row in self.classes.items()
            },
            "h5_overlap": {"count": self.h5_overlap["count"], "value": str(self.h5_overlap["value"])},
        }


def anonymity_reduction(ledger: Ledger, links: Iterable[LinkEvidence]) -> AnonymityReport:
    """Share of z-to-t count and value attributed to each class.

    Each withdrawal lands in exactly one class (founder beats miner beats
    round-trip). Round-trip hits on withdrawals already claimed by a higher
    class are reported as ``h5_overlap``.
    """
    _require_shielded(ledger)
    links = list(links)
    attr = _withdrawal_attribution(links)
    h5 = {t for link in links if LinkKind(link.kind) is LinkKind.ROUND_TRIP_UNIQUE for t in link.dst_txids}
    rows = {c: {"count": 0, "value": 0} for c in Attribution}
    overlap = {"count": 0, "value": 0}
    total_n = total_v = 0
    for tx in ledger:
        if not tx.is_withdrawal:
            continue
        v = withdrawn_value(tx)
        total_n += 1
        total_v += v
        cls = attr.get(tx.txid, Attribution.UNKNOWN)
        rows[cls]["count"] += 1
        rows[cls]["value"] += v
        if tx.txid in h5 and cls is not Attribution.OTHER:
            overlap["count"] += 1
            overlap["value"] += v
    for row in rows.values():
        row["share"] = Fraction(row["value"], total_v) if total_v else Fraction(0)
        row["count_share"] = Fraction(row["count"], total_n) if total_n else Fraction(0)
    return AnonymityReport(total_n, total_v, rows, overlap)


# -- suspect-cluster filter ----------------------------------------------------------------------

def month_bucket(ts: int, split: date | None = TSB_SPLIT) -> str:
    d = datetime.fromtimestamp(ts, tz=timezone.utc).date()
    key = f"{d.year:04d}-{d.month:02d}"
    if split is not None and (d.year, d.month) == (split.year, split.month):
        key += "/after" if d >= split else "/before"
    return key


@dataclass
class TsbResult:
    flagged: dict[str, dict[int, tuple[int, ...]]]
    params: dict

    def counts(self) -> dict[str, dict[int, int]]:
        return {m: {a: len(c) for a, c in row.items()} for m, row in self.flagged.items()}

    def all_flagged(self) -> set[int]:
        return {c for row in self.flagged.values() for cs in row.values() for c in cs}

    def evidence(self, clusters: ClusterSet, unit: str = "ZEC") -> list[LinkEvidence]:
        return [
            LinkEvidence(LinkKind.TSB_FLAG, src_addrs=clusters.members(cid), value=amt, unit=unit,
                         params=self.params, meta={"month": month, "cluster_id": cid})
            for month, row in sorted(self.flagged.items())
            for amt, cids in sorted(row.items())
            for cid in cids
        ]


def tsb_filter(
    ledger: Ledger,
    clusters: ClusterSet,
    amounts: Iterable[int] = TSB_AMOUNTS,
    tx_tol: int = TSB_TX_TOL,
    cluster_tol: int = TSB_CLUSTER_TOL,
    max_history: int = TSB_MAX_HISTORY,
    exclude: TagMap | None = None,
    split: date | None = TSB_SPLIT,
) -> TsbResult:
    """Flag clusters whose pool deposits match a requested payment amount.

    A cluster is flagged in month M under amount A when, in M, it made a
    t-to-z within ``tx_tol`` of some requested amount and its deposits that
    month sum to within ``cluster_tol`` of A; no member ever received from
    the pool; and no member touches more than ``max_history`` transactions.
    Clusters holding an address tagged FOUNDER or MINER in ``exclude`` are
    skipped.
    """
    _require_shielded(ledger)
    amounts = tuple(sorted(set(amounts)))
    sym = ledger.chain.symbol
    params = {"amounts": list(amounts), "tx_tol": tx_tol, "cluster_tol": cluster_tol,
              "max_history": max_history, "split": split.isoformat() if split else None}

    pool_recipients = {a for tx in ledger for a in (Address(sym, z.addr) for z in tx.zout)}
    banned: set[int] = set()
    if exclude is not None:
        for a, t in exclude.items():
            if t.category in (TagCategory.FOUNDER, TagCategory.MINER):
                cid = clusters.cluster_of(a)
                if cid is not None:
                    banned.add(cid)

    totals: dict[tuple[str, int], int] = defaultdict(int)
    near: set[tuple[str, int]] = set()
    for tx in ledger:
        if not tx.is_deposit:
            continue
        zin = _zin_addrs(tx)
        cid = clusters.cluster_of(zin[0])
        if cid is None:
            log.debug("deposit %s from unclustered address, skipped", tx.txid)
            continue
        key = (month_bucket(tx.timestamp, split), cid)
        totals[key] += tx.pool_in
        if any(abs(tx.pool_in - a) <= tx_tol for a in amounts):
            near.add(key)

    eligible: dict[int, bool] = {}

    def ok(cid: int) -> bool:
        if cid not in eligible:
            members = clusters.members(cid)
            eligible[cid] = cid not in banned and not any(
                a in pool_recipients or ledger.history_size(a.value) > max_history for a in members
            )
        return eligible[cid]

    flagged: dict[str, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for (month, cid) in sorted(near):
        total = totals[(month, cid)]
        for a in amounts:
            if abs(total - a) <= cluster_tol and ok(cid):
                flagged[month][a].append(cid)
    return TsbResult(
        {m: {a: tuple(c) for a, c in row.items()} for m, row in sorted(flagged.items())}, params,
    )


def zcash_summary(ledger: Ledger) -> dict:
    """Class counts, pool totals and final pool balance."""
    fmt = ledger.chain.format_units
    series = pool_balance_series(ledger)
    return {
        "tx_classes": {c.value: n for c, n in sorted(class_counts(ledger).items())},
        "deposited": fmt(sum(tx.pool_in for tx in ledger)),
        "withdrawn": fmt(sum(tx.pool_out for tx in ledger)),
        "pool_balance": fmt(series[-1][1]) if series else "0",
        "pool_points": len(series),
    }
