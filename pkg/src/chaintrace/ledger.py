"""Multi-chain transaction model, JSONL ingestion and Zcash tx classification.

All values are integers in the chain's smallest unit. Decimal strings are
converted exactly or rejected; nothing on a matching path touches floats.

For transactions carrying joinsplits, ``vin``/``vout`` hold the spendable
transparent side while the joinsplit ``zin``/``zout`` lists annotate the pool
boundary: a t-to-z spends coins through ``vin`` and records the deposited
amount per funding address in ``zin``; a z-to-t lists each receiving
t-address in ``zout`` *and* as a spendable ``vout`` entry. The miner-fee share
of a withdrawal is a ``zout`` entry whose ``addr`` is ``None``.
"""

from __future__ import annotations

import bisect
import contextlib
import enum
import gc
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional

import orjson

from .errors import LedgerError


@contextlib.contextmanager
def gc_paused():
    """Suspend the cyclic collector during bulk allocation of acyclic records.

    Generation-2 passes over millions of live tuples otherwise dominate
    ingest time; nothing built here forms reference cycles.
    """
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()

log = logging.getLogger(__name__)


class Accounting(str, enum.Enum):
    UTXO = "UTXO"
    ACCOUNT = "ACCOUNT"


@dataclass(frozen=True)
class ChainId:
    symbol: str
    accounting: Accounting
    decimals: int
    shielded: bool = False  # chain carries joinsplits (Zcash-style pool)

    def __post_init__(self):
        if not self.symbol or not self.symbol.isalnum() or self.symbol != self.symbol.upper():
            raise LedgerError(f"bad chain symbol {self.symbol!r}", "BAD_CHAIN")
        if not 0 <= self.decimals <= 18:
            raise LedgerError(f"decimals out of range: {self.decimals}", "BAD_CHAIN")
        object.__setattr__(self, "accounting", Accounting(self.accounting))

    @property
    def is_utxo(self) -> bool:
        return self.accounting is Accounting.UTXO

    def to_units(self, text: str) -> int:
        return to_units(text, self.decimals)

    def format_units(self, units: int) -> str:
        return format_units(units, self.decimals)

    def coins(self, whole: int | str) -> int:
        """Units for a literal coin amount, e.g. ``ZEC.coins("250.0001")``."""
        return self.to_units(str(whole))

    def manifest(self) -> dict:
        return {
            "symbol": self.symbol,
            "accounting": self.accounting.value,
            "decimals": self.decimals,
            "shielded": self.shielded,
        }


def to_units(text: str, decimals: int) -> int:
    """Exact decimal-string to integer conversion; raises on anything lossy."""
    if type(text) is not str:
        raise LedgerError(f"value must be a decimal string, got {text!r}")
    whole, dot, frac = text.partition(".")
    if not (whole.isdigit() and text.isascii()) or (dot and not frac.isdigit()):
        raise LedgerError(f"not a non-negative decimal: {text!r}")
    if len(frac) > decimals:
        stripped = frac.rstrip("0")
        if len(stripped) > decimals:
            raise LedgerError(f"{text!r} has more than {decimals} decimal places")
        frac = stripped
    return int(whole + frac.ljust(decimals, "0")) if decimals else int(whole)


def format_units(units: int, decimals: int) -> str:
    if units < 0:
        return "-" + format_units(-units, decimals)
    if not decimals:
        return str(units)
    whole, frac = divmod(units, 10**decimals)
    frac_s = str(frac).rjust(decimals, "0").rstrip("0")
    return f"{whole}.{frac_s}" if frac_s else str(whole)


DEFAULT_CHAINS: dict[str, ChainId] = {
    c.symbol: c
    for c in (
        ChainId("BTC", Accounting.UTXO, 8),
        ChainId("BCH", Accounting.UTXO, 8),
        ChainId("DASH", Accounting.UTXO, 8),
        ChainId("DOGE", Accounting.UTXO, 8),
        ChainId("LTC", Accounting.UTXO, 8),
        ChainId("ZEC", Accounting.UTXO, 8, shielded=True),
        ChainId("ETH", Accounting.ACCOUNT, 18),
        ChainId("ETC", Accounting.ACCOUNT, 18),
    )
}

_registry: dict[str, ChainId] = dict(DEFAULT_CHAINS)


def register_chain(chain: ChainId) -> ChainId:
    known = _registry.get(chain.symbol)
    if known is not None and known != chain:
        raise LedgerError(f"chain {chain.symbol} already registered as {known}", "BAD_CHAIN")
    _registry[chain.symbol] = chain
    return chain


def get_chain(symbol: str) -> ChainId:
    try:
        return _registry[symbol]
    except KeyError:
        raise LedgerError(f"unknown chain {symbol!r}", "CHAIN_MISSING") from None


def load_manifest(path: str | Path) -> ChainId:
    data = json.loads(Path(path).read_text())
    try:
        chain = ChainId(
            data["symbol"], Accounting(data["accounting"]), int(data["decimals"]),
            bool(data.get("shielded", False)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise LedgerError(f"{path}: bad chain manifest ({exc})", "BAD_CHAIN") from None
    return register_chain(chain)


ZEC = DEFAULT_CHAINS["ZEC"]
ETH = DEFAULT_CHAINS["ETH"]
DASH = DEFAULT_CHAINS["DASH"]


class Address(NamedTuple):
    """Chain-scoped address. Two addresses on different chains never compare equal."""

    chain: str
    value: str

    @property
    def shielded(self) -> bool:
        return self.value[:2] in ("zc", "zs")

    def __str__(self) -> str:
        return f"{self.chain}:{self.value}"

    @classmethod
    def parse(cls, text: str) -> "Address":
        chain, sep, value = text.partition(":")
        if not sep or not value:
            raise LedgerError(f"address must look like CHAIN:value, got {text!r}")
        return cls(chain, value)


class TxIn(NamedTuple):
    src_txid: str
    src_idx: int
    addr: str
    value: int


class TxOut(NamedTuple):
    addr: Optional[str]  # None only for the fee sentinel inside a zout list
    value: int


class JoinSplit(NamedTuple):
    zin: tuple[TxOut, ...] = ()
    zout: tuple[TxOut, ...] = ()


class AccountXfer(NamedTuple):
    frm: str
    to: str
    value: int
    fee: int


class ZTxClass(str, enum.Enum):
    TRANSPARENT = "TRANSPARENT"
    COINGEN = "COINGEN"
    SHIELDED = "SHIELDED"
    DESHIELDED = "DESHIELDED"
    MIXED = "MIXED"
    PRIVATE = "PRIVATE"


@dataclass(frozen=True, slots=True)
class LedgerTx:
    txid: str
    chain: ChainId
    height: int
    timestamp: int
    coinbase: bool = False
    vin: tuple[TxIn, ...] = ()
    vout: tuple[TxOut, ...] = ()
    joinsplits: tuple[JoinSplit, ...] = ()
    xfer: Optional[AccountXfer] = None

    def input_addresses(self) -> list[str]:
        """Distinct transparent input addresses, first-seen order (vin, then zin)."""
        seen: dict[str, None] = {}
        for i in self.vin:
            seen[i.addr] = None
        for js in self.joinsplits:
            for z in js.zin:
                seen[z.addr] = None
        if self.xfer is not None:
            seen[self.xfer.frm] = None
        return list(seen)

    def output_addresses(self) -> list[str]:
        """Distinct transparent output addresses (vout, then assigned zout)."""
        seen: dict[str, None] = {}
        for o in self.vout:
            if o.addr is not None:
                seen[o.addr] = None
        for js in self.joinsplits:
            for z in js.zout:
                if z.addr is not None:
                    seen[z.addr] = None
        if self.xfer is not None:
            seen[self.xfer.to] = None
        return list(seen)

    @property
    def zin(self) -> list[TxOut]:
        return [z for js in self.joinsplits for z in js.zin]

    @property
    def zout(self) -> list[TxOut]:
        """Address-assigned pool outputs; the fee sentinel is excluded."""
        return [z for js in self.joinsplits for z in js.zout if z.addr is not None]

    @property
    def pool_in(self) -> int:
        return sum(z.value for js in self.joinsplits for z in js.zin)

    @property
    def pool_out(self) -> int:
        """Everything leaving the pool, fee allocation included."""
        return sum(z.value for js in self.joinsplits for z in js.zout)

    @property
    def is_deposit(self) -> bool:
        """t-to-z: value enters the pool and no t-address receives from it."""
        return bool(self.joinsplits) and bool(self.zin) and not self.zout

    @property
    def is_withdrawal(self) -> bool:
        """z-to-t: t-addresses receive from the pool and none fund it."""
        return bool(self.joinsplits) and bool(self.zout) and not self.zin

    def fee(self) -> int:
        if self.xfer is not None:
            return self.xfer.fee
        if self.coinbase:
            return 0
        if not self.joinsplits:
            return sum([i.value for i in self.vin]) - sum([o.value for o in self.vout])
        return (
            sum(i.value for i in self.vin) - sum(o.value for o in self.vout)
            - self.pool_in + self.pool_out
        )


def classify_zcash_tx(tx: LedgerTx) -> ZTxClass:
    if tx.coinbase:
        return ZTxClass.COINGEN
    if not tx.joinsplits:
        return ZTxClass.TRANSPARENT
    if tx.vin and tx.vout:
        return ZTxClass.MIXED
    has_in = any(js.zin for js in tx.joinsplits)
    has_out = any(z.addr is not None for js in tx.joinsplits for z in js.zout)
    if has_in and not has_out:
        return ZTxClass.SHIELDED
    if has_out and not has_in:
        return ZTxClass.DESHIELDED
    if not has_in and not has_out:
        return ZTxClass.PRIVATE
    return ZTxClass.MIXED


class Ledger:
    """Immutable, height-ordered list of transactions for one chain plus indices.

    Build through :func:`parse_ledger` or :meth:`Ledger.from_txs`; both run the
    same validation (ordering, duplicate txids, double spends, value balance).
    """

    def __init__(self, chain: ChainId, txs: Iterable[LedgerTx], *, lines: Iterable[int] | None = None):
        self.chain = chain
        self._txs: list[LedgerTx] = []
        self._pos: dict[str, int] = {}
        self._spent_by: dict[tuple[str, int], int] = {}
        self._block_start: list[int] = []
        self._heights: list[int] = []
        self._block_ts: list[int] = []
        line_iter = iter(lines) if lines is not None else None
        with gc_paused():
            for tx in txs:
                line = next(line_iter) if line_iter is not None else len(self._txs) + 1
                self._add(tx, line)
        self._txs = tuple(self._txs)  # type: ignore[assignment]

    @classmethod
    def from_txs(cls, chain: ChainId, txs: Iterable[LedgerTx]) -> "Ledger":
        return cls(chain, txs)

    def _add(self, tx: LedgerTx, line: int) -> None:
        chain = self.chain
        if tx.chain != chain:
            raise LedgerError(f"tx {tx.txid} is on {tx.chain.symbol}, ledger is {chain.symbol}", line=line)
        if tx.txid in self._pos:
            raise LedgerError(f"duplicate txid {tx.txid}", "DUPLICATE_TXID", line)
        if self._heights:
            last = self._heights[-1]
            if tx.height < last:
                raise LedgerError(
                    f"height {tx.height} after height {last}; ledger must be append-ordered",
                    "OUT_OF_ORDER", line,
                )
            if tx.height == last and tx.timestamp != self._block_ts[-1]:
                raise LedgerError(f"tx {tx.txid} disagrees on block {last} timestamp", line=line)
        if chain.is_utxo:
            if tx.xfer is not None:
                raise LedgerError(f"account transfer on UTXO chain {chain.symbol}", line=line)
            if tx.joinsplits and not chain.shielded:
                raise LedgerError(f"joinsplit on non-shielded chain {chain.symbol}", line=line)
            if tx.coinbase and tx.vin:
                raise LedgerError("coinbase tx with inputs", line=line)
            if not tx.coinbase and tx.fee() < 0:
                raise LedgerError(f"tx {tx.txid} spends more than it consumes", "VALUE_IMBALANCE", line)
        else:
            if tx.vin or tx.vout or tx.joinsplits:
                raise LedgerError(f"UTXO fields on account chain {chain.symbol}", line=line)
            if tx.xfer is None and not tx.coinbase:
                raise LedgerError(f"account tx {tx.txid} has no transfer", line=line)
        idx = len(self._txs)
        spent_by = self._spent_by
        for i in tx.vin:
            key = (i.src_txid, i.src_idx)
            if key in spent_by:
                raise LedgerError(f"outpoint {i.src_txid}:{i.src_idx} spent twice", "DOUBLE_SPEND", line)
            spent_by[key] = idx
        self._txs.append(tx)
        self._pos[tx.txid] = idx
        if not self._heights or tx.height != self._heights[-1]:
            self._heights.append(tx.height)
            self._block_start.append(idx)
            self._block_ts.append(tx.timestamp)

    # -- sequence protocol -------------------------------------------------
    def __len__(self) -> int:
        return len(self._txs)

    def __iter__(self) -> Iterator[LedgerTx]:
        return iter(self._txs)

    def __getitem__(self, i):
        return self._txs[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Ledger):
            return NotImplemented
        return self.chain == other.chain and self._txs == other._txs

    def __repr__(self) -> str:
        return f"Ledger({self.chain.symbol}, {len(self)} txs, {len(self._heights)} blocks)"

    @property
    def txs(self) -> tuple[LedgerTx, ...]:
        return self._txs  # type: ignore[return-value]

    # -- indices -------------------------------------------------------------
    def get(self, txid: str) -> LedgerTx | None:
        i = self._pos.get(txid)
        return None if i is None else self._txs[i]

    def position(self, txid: str) -> int:
        return self._pos[txid]

    def spender_of(self, txid: str, idx: int) -> LedgerTx | None:
        i = self._spent_by.get((txid, idx))
        return None if i is None else self._txs[i]

    @property
    def heights(self) -> list[int]:
        return list(self._heights)

    def block_timestamp(self, height: int) -> int | None:
        j = bisect.bisect_left(self._heights, height)
        if j < len(self._heights) and self._heights[j] == height:
            return self._block_ts[j]
        return None

    def txs_in_heights(self, lo: int, hi: int) -> tuple[LedgerTx, ...]:
        """Transactions with ``lo <= height <= hi``."""
        a = bisect.bisect_left(self._heights, lo)
        b = bisect.bisect_right(self._heights, hi)
        if a >= b:
            return ()
        start = self._block_start[a]
        end = self._block_start[b] if b < len(self._block_start) else len(self._txs)
        return self._txs[start:end]

    def closest_block(self, ts: int) -> int:
        """Height of the block whose timestamp is closest to ``ts`` (ties: lower height)."""
        if not self._heights:
            raise LedgerError(f"{self.chain.symbol} ledger is empty", "CHAIN_MISSING")
        order = self._ts_order
        keys = self._ts_sorted
        j = bisect.bisect_left(keys, ts)
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(keys):
                h = self._heights[order[k]]
                cand = (abs(keys[k] - ts), h)
                if best is None or cand < best:
                    best = cand
        # equal timestamps elsewhere in the ledger are adjacent in sort order
        return best[1]  # type: ignore[index]

    @cached_property
    def _ts_order(self) -> list[int]:
        return sorted(range(len(self._heights)), key=lambda k: (self._block_ts[k], self._heights[k]))

    @cached_property
    def _ts_sorted(self) -> list[int]:
        return [self._block_ts[k] for k in self._ts_order]

    @cached_property
    def by_address(self) -> dict[str, tuple[int, ...]]:
        """Address -> positions of txs where it appears as input or output."""
        acc: dict[str, list[int]] = defaultdict(list)
        for idx, tx in enumerate(self._txs):
            for a in set(tx.input_addresses()) | set(tx.output_addresses()):
                acc[a].append(idx)
        return {a: tuple(v) for a, v in acc.items()}

    @cached_property
    def outputs_by_value(self) -> dict[int, list[tuple[int, int]]]:
        """Value -> [(tx position, output index)]; account transfers use index -1."""
        acc: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for idx, tx in enumerate(self._txs):
            if tx.xfer is not None:
                acc[tx.xfer.value].append((idx, -1))
            for k, o in enumerate(tx.vout):
                acc[o.value].append((idx, k))
        return dict(acc)

    def history_size(self, addr: str) -> int:
        return len(self.by_address.get(addr, ()))


# -- JSONL (de)serialization ---------------------------------------------------

def _outs(items, chain: ChainId, allow_none: bool = False) -> tuple[TxOut, ...]:
    dec = chain.decimals
    out = tuple([TxOut(o["addr"], to_units(o["value"], dec)) for o in items])
    for o in out:
        if type(o.addr) is not str:
            if o.addr is None and not allow_none:
                raise LedgerError("output without address")
            if o.addr is not None:
                raise LedgerError(f"address must be a string, got {o.addr!r}")
    return out


def tx_from_record(rec: dict, chain: ChainId) -> LedgerTx:
    to_u = chain.to_units
    vin_recs = rec.get("vin")
    dec = chain.decimals
    vin = tuple([
        TxIn(str(i["src_txid"]), int(i["src_idx"]), i["addr"], to_units(i["value"], dec))
        for i in vin_recs
    ]) if vin_recs else ()
    vout_recs = rec.get("vout")
    vout = _outs(vout_recs, chain) if vout_recs else ()
    js = tuple(
        JoinSplit(_outs(j.get("zin") or (), chain), _outs(j.get("zout") or (), chain, allow_none=True))
        for j in rec.get("joinsplits") or ()
    )
    x = rec.get("xfer")
    xfer = None
    if x:
        xfer = AccountXfer(x["from"], x["to"], to_u(x["value"]), to_u(x.get("fee", "0")))
    height, ts = rec["height"], rec["ts"]
    if type(height) is not int or type(ts) is not int or height < 0:
        raise LedgerError(f"height/ts must be non-negative integers: {height!r}, {ts!r}")
    coinbase = rec.get("coinbase", False)
    if type(coinbase) is not bool:
        raise LedgerError(f"coinbase must be boolean, got {coinbase!r}")
    txid = rec["txid"]
    if not isinstance(txid, str) or not txid:
        raise LedgerError(f"bad txid {txid!r}")
    return LedgerTx(txid, chain, height, ts, coinbase, vin, vout, js, xfer)


def tx_to_record(tx: LedgerTx) -> dict:
    fmt = tx.chain.format_units
    rec: dict = {"txid": tx.txid, "height": tx.height, "ts": tx.timestamp, "coinbase": tx.coinbase}
    if tx.vin:
        rec["vin"] = [
            {"src_txid": i.src_txid, "src_idx": i.src_idx, "addr": i.addr, "value": fmt(i.value)}
            for i in tx.vin
        ]
    if tx.vout:
        rec["vout"] = [{"addr": o.addr, "value": fmt(o.value)} for o in tx.vout]
    if tx.joinsplits:
        rec["joinsplits"] = [
            {
                "zin": [{"addr": z.addr, "value": fmt(z.value)} for z in j.zin],
                "zout": [{"addr": z.addr, "value": fmt(z.value)} for z in j.zout],
            }
            for j in tx.joinsplits
        ]
    if tx.xfer is not None:
        x = tx.xfer
        rec["xfer"] = {"from": x.frm, "to": x.to, "value": fmt(x.value), "fee": fmt(x.fee)}
    return rec


def _iter_records(path: Path, chain: ChainId) -> Iterator[tuple[int, LedgerTx]]:
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = orjson.loads(raw)
                if not isinstance(rec, dict):
                    raise LedgerError("record is not a JSON object")
                tx = tx_from_record(rec, chain)
            except LedgerError as exc:
                raise LedgerError(str(exc.args[0]), exc.code, lineno) from None
            except (orjson.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise LedgerError(f"{type(exc).__name__}: {exc}", "MALFORMED_RECORD", lineno) from None
            yield lineno, tx


def parse_ledger(path: str | Path, chain: ChainId) -> Ledger:
    path = Path(path)
    if not path.exists():
        raise LedgerError(f"{path} does not exist", "MISSING_FILE")
    pairs = _iter_records(path, chain)
    lines: list[int] = []

    def txs():
        for lineno, tx in pairs:
            lines.append(lineno)
            yield tx

    def line_numbers():
        while True:
            yield lines[-1]

    ledger = Ledger(chain, txs(), lines=line_numbers())
    log.info("parsed %s: %d txs", path, len(ledger))
    return ledger


def serialize_ledger(ledger: Ledger | Iterable[LedgerTx], path: str | Path) -> None:
    with open(path, "wb") as fh:
        for tx in ledger:
            fh.write(orjson.dumps(tx_to_record(tx)))
            fh.write(b"\n")


def load_chain_dir(directory: str | Path) -> dict[str, Ledger]:
    """Load every ``<SYMBOL>.json`` manifest and its ``<SYMBOL>.jsonl`` ledger."""
    directory = Path(directory)
    if not directory.is_dir():
        raise LedgerError(f"{directory} is not a directory", "MISSING_FILE")
    ledgers = {}
    for manifest in sorted(directory.glob("*.json")):
        data_file = manifest.with_suffix(".jsonl")
        if not data_file.exists():
            continue
        chain = load_manifest(manifest)
        ledgers[chain.symbol] = parse_ledger(data_file, chain)
    return ledgers


def write_chain_dir(directory: str | Path, ledgers: dict[str, Ledger]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sym, ledger in ledgers.items():
        (directory / f"{sym}.json").write_text(json.dumps(ledger.chain.manifest(), indent=2))
        serialize_ledger(ledger, directory / f"{sym}.jsonl")


# -- pool accounting -------------------------------------------------------------

def class_counts(ledger: Ledger) -> Counter:
    return Counter(classify_zcash_tx(tx) for tx in ledger)


def pool_balance_series(ledger: Ledger) -> list[tuple[int, int]]:
    """Cumulative shielded-pool balance after each block that touches the pool."""
    if not ledger.chain.shielded:
        raise LedgerError(f"{ledger.chain.symbol} has no shielded pool", "NOT_SHIELDED")
    series: list[tuple[int, int]] = []
    balance = 0
    cur_height = None
    for tx in ledger:
        if not tx.joinsplits:
            continue
        if cur_height is not None and tx.height != cur_height:
            if balance < 0:
                raise LedgerError(f"pool balance negative at height {cur_height}", "NEGATIVE_POOL")
            series.append((cur_height, balance))
        cur_height = tx.height
        balance += tx.pool_in - tx.pool_out
    if cur_height is not None:
        if balance < 0:
            raise LedgerError(f"pool balance negative at height {cur_height}", "NEGATIVE_POOL")
        series.append((cur_height, balance))
    return series
