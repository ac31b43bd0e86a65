"""Address clustering, tag bookkeeping and the common-relationship graph."""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Optional

from .coinjoin import detect_coinjoin
from .dsu import DisjointSet
from .errors import InputError, TagConflict
from .evidence import LinkEvidence, LinkKind
from .ledger import Address, LedgerTx, gc_paused

log = logging.getLogger(__name__)


# -- tags -----------------------------------------------------------------------

class TagCategory(str, enum.Enum):
    EXCHANGE = "EXCHANGE"
    POOL = "POOL"
    FOUNDER = "FOUNDER"
    MINER = "MINER"
    SERVICE = "SERVICE"
    OTHER = "OTHER"


class Tag(NamedTuple):
    label: str
    category: TagCategory


class TagMap:
    """Address -> (label, category). A second, different tag for an address is
    a conflict: :meth:`add` raises, :meth:`merge` reports and keeps the first."""

    def __init__(self, items: Iterable[tuple[Address, Tag]] = ()):
        self._tags: dict[Address, Tag] = {}
        for addr, tag in items:
            self.add(addr, tag.label, tag.category)

    def add(self, addr: Address, label: str, category: TagCategory | str) -> None:
        tag = Tag(label, TagCategory(category))
        old = self._tags.get(addr)
        if old is not None and old != tag:
            raise TagConflict(f"{addr} already tagged {old.label}/{old.category.value}, refusing {label}")
        self._tags[addr] = tag

    def merge(self, other: "TagMap") -> list[tuple[Address, Tag, Tag]]:
        conflicts = []
        for addr, tag in other.items():
            old = self._tags.get(addr)
            if old is None:
                self._tags[addr] = tag
            elif old != tag:
                conflicts.append((addr, old, tag))
        return conflicts

    def get(self, addr: Address) -> Optional[Tag]:
        return self._tags.get(addr)

    def __contains__(self, addr) -> bool:
        return addr in self._tags

    def __len__(self) -> int:
        return len(self._tags)

    def __iter__(self) -> Iterator[Address]:
        return iter(self._tags)

    def items(self):
        return self._tags.items()

    def with_category(self, category: TagCategory | str) -> set[Address]:
        category = TagCategory(category)
        return {a for a, t in self._tags.items() if t.category is category}

    @classmethod
    def load_csv(cls, path: str | Path) -> "TagMap":
        tags = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"address", "chain", "label", "category"} - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{path}: tag file missing columns {sorted(missing)}", "MALFORMED_RECORD")
            for row in reader:
                try:
                    tags.add(Address(row["chain"], row["address"]), row["label"], row["category"])
                except ValueError as exc:
                    if isinstance(exc, TagConflict):
                        raise
                    raise InputError(f"{path}: bad tag row {row}: {exc}", "MALFORMED_RECORD") from None
        return tags

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "chain", "label", "category"])
            for addr in sorted(self._tags):
                t = self._tags[addr]
                w.writerow([addr.value, addr.chain, t.label, t.category.value])


# -- cluster sets -----------------------------------------------------------------

class ClusterSet:
    """Immutable partition of addresses with canonical ids.

    Id 0 is the largest cluster; ties break on the smallest member address.
    """

    def __init__(self, groups: Iterable[Iterable[Address]], guard_violations: Iterable = ()):
        canon = sorted((sorted(g) for g in groups if g), key=lambda g: (-len(g), g[0]))
        self._members: tuple[tuple[Address, ...], ...] = tuple(tuple(g) for g in canon)
        self._cid: dict[Address, int] = {}
        for cid, g in enumerate(self._members):
            for a in g:
                if a in self._cid:
                    raise InputError(f"address {a} in two clusters")
                self._cid[a] = cid
        self.guard_violations = tuple(guard_violations)

    @classmethod
    def from_dsu(cls, dsu: DisjointSet, guard_violations: Iterable = ()) -> "ClusterSet":
        return cls(dsu.groups(), guard_violations)

    def to_dsu(self) -> DisjointSet:
        dsu: DisjointSet = DisjointSet()
        for g in self._members:
            dsu.union_all(g)
        return dsu

    def __len__(self) -> int:
        return len(self._members)

    def __contains__(self, addr) -> bool:
        return addr in self._cid

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusterSet):
            return NotImplemented
        return self._members == other._members

    def __repr__(self) -> str:
        return f"ClusterSet({len(self)} clusters, {self.n_addresses} addresses)"

    @property
    def n_addresses(self) -> int:
        return len(self._cid)

    def cluster_of(self, addr: Address) -> Optional[int]:
        return self._cid.get(addr)

    def members(self, cid: int) -> tuple[Address, ...]:
        return self._members[cid]

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self._members]

    def clusters(self) -> Iterator[tuple[int, tuple[Address, ...]]]:
        return enumerate(self._members)

    def partition(self) -> frozenset[frozenset[Address]]:
        return frozenset(frozenset(g) for g in self._members)

    def merge(self, other: "ClusterSet") -> "ClusterSet":
        dsu = self.to_dsu()
        for g in other._members:
            dsu.union_all(g)
        return ClusterSet.from_dsu(dsu, self.guard_violations + other.guard_violations)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "chain", "cluster_id"])
            for cid, g in enumerate(self._members):
                for a in g:
                    w.writerow([a.value, a.chain, cid])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ClusterSet":
        groups: dict[str, list[Address]] = defaultdict(list)
        try:
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    groups[row["cluster_id"]].append(Address(row["chain"], row["address"]))
        except (KeyError, csv.Error) as exc:
            raise InputError(f"{path}: bad cluster file ({exc})", "MALFORMED_RECORD") from None
        return cls(groups.values())


# -- heuristics ---------------------------------------------------------------------

def _default_skip(tx: LedgerTx) -> bool:
    return tx.chain.symbol == "DASH" and detect_coinjoin(tx)


def multi_input_cluster(
    txs: Iterable[LedgerTx],
    *,
    include_outputs: bool = False,
    skip: Callable[[LedgerTx], bool] | None = _default_skip,
) -> ClusterSet:
    """Co-spent input addresses end up in one cluster.

    Addresses of skipped transactions (Dash CoinJoins by default) are still
    recorded, as singletons unless linked elsewhere. With ``include_outputs``
    every output address is registered too, so cluster sizes cover all
    observed addresses rather than only spenders.
    """
    with gc_paused():
        return _multi_input(txs, include_outputs, skip)


def _multi_input(txs, include_outputs, skip) -> ClusterSet:
    # one string-keyed forest per chain; Address keys only at the end
    forests: dict[str, DisjointSet[str]] = {}
    for tx in txs:
        sym = tx.chain.symbol
        dsu = forests.get(sym)
        if dsu is None:
            dsu = forests[sym] = DisjointSet()
        if tx.joinsplits or tx.xfer is not None:
            ins = tx.input_addresses()
        else:
            ins = [i.addr for i in tx.vin]
        if skip is not None and len(ins) > 1 and skip(tx):
            for a in ins:
                dsu.add(a)
        else:
            dsu.union_all(ins)
        if include_outputs:
            for a in tx.output_addresses():
                dsu.add(a)
    groups = [
        [Address(sym, a) for a in g] for sym, dsu in forests.items() for g in dsu.groups()
    ]
    return ClusterSet(groups)


class GuardViolation(NamedTuple):
    txid: str
    left: frozenset[str]
    right: frozenset[str]


def change_cluster(
    txs: Iterable[LedgerTx],
    clusters: ClusterSet,
    excluded: Iterable[Address] = (),
    tags: TagMap | None = None,
) -> ClusterSet:
    """Attach the single transparent output of a shielding tx to its senders.

    Only joinsplit transactions with transparent inputs and exactly one
    distinct transparent output address qualify; that address must not be
    in ``excluded``. Merges that would join clusters tagged with different
    exchange names are refused and listed in ``guard_violations``.
    """
    excluded = set(excluded)
    dsu = clusters.to_dsu()
    exch: dict[Address, set[str]] = defaultdict(set)
    if tags is not None:
        for addr, tag in tags.items():
            if tag.category is TagCategory.EXCHANGE:
                exch[addr].add(tag.label)
    # labels per current root
    root_labels: dict[Address, set[str]] = defaultdict(set)
    for addr, labels in exch.items():
        if addr in dsu:
            root_labels[dsu.find(addr)] |= labels

    violations: list[GuardViolation] = []
    for tx in txs:
        if not tx.joinsplits:
            continue
        ins = tx.input_addresses()
        outs = tx.output_addresses()
        if not ins or len(outs) != 1:
            continue
        sym = tx.chain.symbol
        target = Address(sym, outs[0])
        if target in excluded:
            continue
        srcs = [Address(sym, a) for a in ins]
        for a in srcs + [target]:
            if a not in dsu:
                dsu.add(a)
                root_labels[a] |= exch.get(a, set())
        # merging the senders is the multi-input rule and is never guarded
        merged_in: set[str] = set()
        for r in {dsu.find(a) for a in srcs}:
            merged_in |= root_labels.get(r, set())
        dsu.union_all(srcs)
        r_in = dsu.find(srcs[0])
        root_labels[r_in] = merged_in
        r_t = dsu.find(target)
        if r_t == r_in:
            continue
        lt = root_labels.get(r_t, set())
        if merged_in and lt and merged_in != lt:
            violations.append(GuardViolation(tx.txid, frozenset(merged_in), frozenset(lt)))
            continue
        root_labels[dsu.union(r_in, r_t)] = merged_in | lt
    if violations:
        log.info("change heuristic: %d merges refused by exchange guard", len(violations))
    return ClusterSet.from_dsu(dsu, clusters.guard_violations + tuple(violations))


@dataclass(frozen=True)
class ClusterTags:
    cluster_id: int
    size: int
    labels: Counter
    dominant: Optional[str]
    coverage: Fraction
    conflicts: tuple[str, ...]


def propagate_tags(clusters: ClusterSet, tags: TagMap) -> dict[int, ClusterTags]:
    """Summaries for every cluster holding at least one tagged address.

    The dominant label is the most frequent one, ties broken alphabetically.
    Any label other than the dominant one is listed as a conflict.
    """
    per: dict[int, Counter] = defaultdict(Counter)
    for addr, tag in tags.items():
        cid = clusters.cluster_of(addr)
        if cid is not None:
            per[cid][tag.label] += 1
    out = {}
    for cid in sorted(per):
        labels = per[cid]
        dominant = min(labels, key=lambda lab: (-labels[lab], lab))
        size = len(clusters.members(cid))
        out[cid] = ClusterTags(
            cid, size, labels, dominant, Fraction(sum(labels.values()), size),
            tuple(sorted(lab for lab in labels if lab != dominant)),
        )
    return out


# -- relation graph -------------------------------------------------------------------

class RelationGraph:
    """Directed multigraph collapsed to weights: u -> v counts shifts from u to v."""

    def __init__(self):
        self._w: dict[tuple[Address, Address], int] = {}
        self._out: dict[Address, set[Address]] = defaultdict(set)
        self._in: dict[Address, set[Address]] = defaultdict(set)
        self.skipped = 0

    def add(self, u: Address, v: Address, weight: int = 1) -> None:
        if u == v:
            raise InputError(f"self-loop on {u}")
        if weight < 1:
            raise InputError("edge weight must be >= 1")
        self._w[(u, v)] = self._w.get((u, v), 0) + weight
        self._out[u].add(v)
        self._in[v].add(u)

    def __len__(self) -> int:
        return len(self._w)

    def edges(self) -> list[tuple[Address, Address, int]]:
        return [(u, v, w) for (u, v), w in sorted(self._w.items())]

    def weight(self, u: Address, v: Address) -> int:
        return self._w.get((u, v), 0)

    @property
    def total_weight(self) -> int:
        return sum(self._w.values())

    def nodes(self) -> set[Address]:
        return set(self._out) | set(self._in)

    def input_cluster(self, v: Address) -> frozenset[Address]:
        return frozenset(self._in.get(v, ()))

    def output_cluster(self, u: Address) -> frozenset[Address]:
        return frozenset(self._out.get(u, ()))

    def in_degree(self, v: Address) -> int:
        return len(self._in.get(v, ()))

    def out_degree(self, u: Address) -> int:
        return len(self._out.get(u, ()))

    def rank_by_in_degree(self, k: int | None = None) -> list[tuple[Address, int]]:
        r = sorted(((v, len(s)) for v, s in self._in.items()), key=lambda x: (-x[1], x[0]))
        return r[:k] if k is not None else r

    def rank_by_out_degree(self, k: int | None = None) -> list[tuple[Address, int]]:
        r = sorted(((u, len(s)) for u, s in self._out.items()), key=lambda x: (-x[1], x[0]))
        return r[:k] if k is not None else r

    def degree_histogram(self, direction: str = "in") -> Counter:
        src = self._in if direction == "in" else self._out
        return Counter(len(s) for s in src.values())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "weight"])
            for u, v, wt in self.edges():
                w.writerow([str(u), str(v), wt])


def build_relation_graph(passthroughs: Iterable[LinkEvidence]) -> RelationGraph:
    """One edge per pass-through: first deposit input address -> first payout address.

    Deposits funded straight from a shielded pool have no transparent sender;
    those links are skipped and counted in ``skipped``.
    """
    g = RelationGraph()
    for link in passthroughs:
        if link.kind != LinkKind.PASS_THROUGH:
            continue
        if not link.src_addrs or not link.dst_addrs:
            g.skipped += 1
            continue
        g.add(link.src_addrs[0], link.dst_addrs[0])
    return g
