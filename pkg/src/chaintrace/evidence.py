"""Link evidence records and their JSONL form."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

import orjson

from .errors import InputError
from .ledger import Address


class LinkKind(str, enum.Enum):
    FOUNDER_VALUE = "FOUNDER_VALUE"
    MINER_PAYOUT = "MINER_PAYOUT"
    ROUND_TRIP_UNIQUE = "ROUND_TRIP_UNIQUE"
    PASS_THROUGH = "PASS_THROUGH"
    UTURN_BASIC = "UTURN_BASIC"
    UTURN_ADDR = "UTURN_ADDR"
    UTURN_UTXO = "UTURN_UTXO"
    XRT = "XRT"
    TSB_FLAG = "TSB_FLAG"
    COINJOIN = "COINJOIN"


@dataclass(frozen=True, eq=False)
class LinkEvidence:
    """One heuristic-derived link between a source and a destination.

    ``params`` holds the thresholds the detector ran with, verbatim.
    ``meta`` carries detector outputs that are not endpoints (shift ids,
    the same-address flag of a round trip, ...). Neither takes part in
    :meth:`key`, which is what scoring compares.
    """

    kind: LinkKind
    src_txids: tuple[str, ...] = ()
    src_addrs: tuple[Address, ...] = ()
    dst_txids: tuple[str, ...] = ()
    dst_addrs: tuple[Address, ...] = ()
    value: int = 0
    unit: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)
    meta: Mapping[str, Any] = field(default_factory=dict)

    def key(self) -> tuple:
        return (
            LinkKind(self.kind).value,
            tuple(sorted(self.src_txids)),
            tuple(sorted(self.src_addrs)),
            tuple(sorted(self.dst_txids)),
            tuple(sorted(self.dst_addrs)),
        )

    def __eq__(self, other):
        if not isinstance(other, LinkEvidence):
            return NotImplemented
        return self.key() == other.key() and self.value == other.value

    def __hash__(self):
        return hash((self.key(), self.value))

    def to_record(self) -> dict:
        return {
            "kind": LinkKind(self.kind).value,
            "params": {k: _plain(v) for k, v in self.params.items()},
            "src": {"txids": list(self.src_txids), "addrs": [str(a) for a in self.src_addrs]},
            "dst": {"txids": list(self.dst_txids), "addrs": [str(a) for a in self.dst_addrs]},
            "value": str(self.value),
            "unit": self.unit,
            "meta": {k: _plain(v) for k, v in self.meta.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LinkEvidence":
        try:
            return cls(
                kind=LinkKind(rec["kind"]),
                src_txids=tuple(rec["src"]["txids"]),
                src_addrs=tuple(Address.parse(a) for a in rec["src"]["addrs"]),
                dst_txids=tuple(rec["dst"]["txids"]),
                dst_addrs=tuple(Address.parse(a) for a in rec["dst"]["addrs"]),
                value=int(rec.get("value", 0)),
                unit=rec.get("unit", ""),
                params=rec.get("params") or {},
                meta=rec.get("meta") or {},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad evidence record: {exc}", "MALFORMED_RECORD") from None


def _plain(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, (set, frozenset, tuple)):
        return sorted(_plain(x) for x in v) if isinstance(v, (set, frozenset)) else [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, Address):
        return str(v)
    if isinstance(v, int) and not isinstance(v, bool) and abs(v) >= 2**63:
        return str(v)
    return v


def write_evidence(links: Iterable[LinkEvidence], path: str | Path) -> int:
    n = 0
    with open(path, "wb") as fh:
        for link in links:
            fh.write(orjson.dumps(link.to_record()))
            fh.write(b"\n")
            n += 1
    return n


def read_evidence(path: str | Path) -> list[LinkEvidence]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path} does not exist", "MISSING_FILE")
    out = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = orjson.loads(raw)
            except orjson.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: {exc}", "MALFORMED_RECORD") from None
            out.append(LinkEvidence.from_record(rec))
    return out
